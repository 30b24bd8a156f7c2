"""Server-side catalog: model records, the published manifest, and the
on-disk layout shared by the explanation job and the HTTP service.

Directory layout:
    manifest.json          current published snapshot (atomic replace)
    basis/NNN.vec          one direction per basis member (f32, magic-tagged)
    models/{id}/record.json
    models/{id}/snapshot.bin
    job.json               transient progress of the running explanation job
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import numpy as np

from xpert.merge import SnapshotError, read_snapshot
from xpert.probe import (
    PromptSet,
    candidate_words,
    extract_shift_embedding,
    instruction_hash,
    probe_models,
    word_to_subvector,
)
from xpert.protocol import BackendError
from xpert.vectorspace import (
    DEFAULT_CANDIDATE_CAP,
    DEFAULT_EPSILON_FRACTION,
    DEFAULT_ORTHO_THRESHOLD,
    Coordinate,
    DecompositionReport,
    StyleBasis,
    SubVector,
    decompose,
    extend_basis_for_model,
)

VEC_MAGIC = b"XPERTVEC"


def quantize_direction(vector: np.ndarray) -> np.ndarray:
    """Round a direction to f32-representable doubles.

    Basis members cross the registry boundary as f32 files; quantizing at
    append time makes disk round-trips lossless, so reloaded bases keep
    their fingerprints bit for bit.
    """
    out = np.asarray(vector, dtype=np.float64).astype(np.float32)
    return out.astype(np.float64)


def write_basis_vector(path, direction: np.ndarray) -> None:
    direction = np.asarray(direction, dtype=np.float64)
    payload = direction.astype("<f4").tobytes()
    Path(path).write_bytes(VEC_MAGIC + payload)


def read_basis_vector(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:len(VEC_MAGIC)] != VEC_MAGIC:
        raise ValueError(f"{path}: not a basis vector file")
    body = data[len(VEC_MAGIC):]
    if len(body) % 4:
        raise ValueError(f"{path}: truncated basis vector")
    return np.frombuffer(body, dtype="<f4").astype(np.float64)


@dataclass(frozen=True)
class ModelRecord:
    """One cached personalized model as stored under models/{id}/.

    The probe block (summarizer fingerprint, prompt set, shift embedding)
    is the server-side cache that lets coordinates be recomputed whenever
    the basis grows, without re-probing the model.
    """

    model_id: str
    display_name: str
    artifact_uri: str
    base_model_fingerprint: str
    created_at: str
    artifact_bytes: int
    artifact_sha256: str
    summarizer_fingerprint: str = ""
    instruction_template_hash: str = ""
    prompt_set_id: str = ""
    shift_embedding: tuple[float, ...] | None = None
    coordinate: Coordinate | None = None
    report: DecompositionReport | None = None

    def __post_init__(self):
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if self.artifact_bytes < 0:
            raise ValueError("artifact_bytes must be non-negative")
        if (self.coordinate is None) != (self.report is None):
            raise ValueError("coordinate and report must appear together")
        if self.coordinate is not None and self.shift_embedding is None:
            raise ValueError("coordinate requires the probed shift embedding")
        if self.shift_embedding is not None:
            object.__setattr__(self, "shift_embedding",
                               tuple(float(v) for v in self.shift_embedding))

    def probed_with(self, summarizer_fingerprint: str,
                    instruction_template_hash: str,
                    prompt_set_id: str) -> bool:
        return (self.shift_embedding is not None
                and self.summarizer_fingerprint == summarizer_fingerprint
                and self.instruction_template_hash
                == instruction_template_hash
                and self.prompt_set_id == prompt_set_id)

    def to_json_dict(self) -> dict:
        payload = {
            "model_id": self.model_id,
            "display_name": self.display_name,
            "artifact_uri": self.artifact_uri,
            "base_model_fingerprint": self.base_model_fingerprint,
            "created_at": self.created_at,
            "artifact_bytes": self.artifact_bytes,
            "artifact_sha256": self.artifact_sha256,
            "probe": None,
        }
        if self.shift_embedding is not None:
            payload["probe"] = {
                "summarizer_fingerprint": self.summarizer_fingerprint,
                "instruction_template_hash": self.instruction_template_hash,
                "prompt_set_id": self.prompt_set_id,
                "shift_embedding": list(self.shift_embedding),
            }
        payload["coordinate"] = None
        payload["report"] = None
        if self.coordinate is not None:
            payload["coordinate"] = {
                "basis_fingerprint": self.coordinate.basis_fingerprint,
                "entries": {
                    str(i): v
                    for i, v in sorted(self.coordinate.entries.items())},
            }
            payload["report"] = {
                "residual_norm": self.report.residual_norm,
                "epsilon_used": self.report.epsilon_used,
                "satisfied": self.report.satisfied,
            }
        return payload

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "ModelRecord":
        probe = payload.get("probe") or {}
        coordinate = None
        report = None
        if payload.get("coordinate") is not None:
            raw = payload["coordinate"]
            coordinate = Coordinate(
                basis_fingerprint=raw["basis_fingerprint"],
                entries={int(i): float(v)
                         for i, v in raw["entries"].items()})
            raw_report = payload["report"]
            report = DecompositionReport(
                coordinate=coordinate,
                residual_norm=float(raw_report["residual_norm"]),
                epsilon_used=float(raw_report["epsilon_used"]),
                satisfied=bool(raw_report["satisfied"]))
        return cls(model_id=payload["model_id"],
                   display_name=payload["display_name"],
                   artifact_uri=payload["artifact_uri"],
                   base_model_fingerprint=payload["base_model_fingerprint"],
                   created_at=payload["created_at"],
                   artifact_bytes=int(payload["artifact_bytes"]),
                   artifact_sha256=payload["artifact_sha256"],
                   summarizer_fingerprint=probe.get(
                       "summarizer_fingerprint", ""),
                   instruction_template_hash=probe.get(
                       "instruction_template_hash", ""),
                   prompt_set_id=probe.get("prompt_set_id", ""),
                   shift_embedding=(
                       tuple(probe["shift_embedding"])
                       if probe.get("shift_embedding") is not None else None),
                   coordinate=coordinate,
                   report=report)


@dataclass(frozen=True)
class ManifestModel:
    """The manifest's per-model row: what a device needs to select."""

    model_id: str
    display_name: str
    artifact_uri: str
    artifact_bytes: int
    artifact_sha256: str
    coordinate: Coordinate | None


@dataclass(frozen=True)
class RegistryManifest:
    """A published, immutable snapshot of the registry state.

    Basis membership is append-only across versions; coordinates always
    refer to this manifest's basis. A fresh registry has basis None and
    embedding_dim 0 (the summarizer geometry is unknown until the first
    explanation run).
    """

    version: int
    summarizer_fingerprint: str
    instruction_template_hash: str
    embedding_dim: int
    ortho_threshold: float
    epsilon_fraction: float
    basis: StyleBasis | None
    models: tuple[ManifestModel, ...]

    def __post_init__(self):
        if self.version < 0:
            raise ValueError("version must be non-negative")
        if self.basis is not None:
            if self.basis.dim != self.embedding_dim:
                raise ValueError("basis dim does not match embedding_dim")
            if (self.basis.ortho_threshold != self.ortho_threshold
                    or self.basis.epsilon_fraction != self.epsilon_fraction):
                raise ValueError("threshold fields disagree with the basis")
        for model in self.models:
            if model.coordinate is None:
                continue
            if self.basis is None:
                raise ValueError(
                    f"model {model.model_id!r} has a coordinate but the "
                    "manifest has no basis")
            if model.coordinate.basis_fingerprint != self.basis.fingerprint:
                raise ValueError(
                    f"model {model.model_id!r} coordinate bound to a "
                    "different basis")
            for index in model.coordinate.entries:
                if not 0 <= index < len(self.basis.members):
                    raise ValueError(
                        f"model {model.model_id!r} coordinate index {index} "
                        "outside basis")
        object.__setattr__(self, "models", tuple(self.models))

    @property
    def basis_fingerprint(self) -> str:
        return "" if self.basis is None else self.basis.fingerprint

    def model(self, model_id: str) -> ManifestModel:
        for row in self.models:
            if row.model_id == model_id:
                return row
        raise KeyError(model_id)

    def to_json_dict(self) -> dict:
        members = () if self.basis is None else self.basis.members
        return {
            "version": self.version,
            "summarizer_fingerprint": self.summarizer_fingerprint,
            "instruction_template_hash": self.instruction_template_hash,
            "embedding_dim": self.embedding_dim,
            "ortho_threshold": self.ortho_threshold,
            "epsilon_fraction": self.epsilon_fraction,
            "basis": [
                {"index": i, "word": member.word,
                 "vector": list(member.direction)}
                for i, member in enumerate(members)],
            "models": [
                {"model_id": m.model_id,
                 "display_name": m.display_name,
                 "artifact_uri": m.artifact_uri,
                 "artifact_bytes": m.artifact_bytes,
                 "artifact_sha256": m.artifact_sha256,
                 "coordinate": None if m.coordinate is None else {
                     str(i): v
                     for i, v in sorted(m.coordinate.entries.items())}}
                for m in self.models],
        }

    def to_json_bytes(self) -> bytes:
        return (json.dumps(self.to_json_dict(), indent=2) + "\n").encode()

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "RegistryManifest":
        members = []
        for i, entry in enumerate(payload["basis"]):
            if entry["index"] != i:
                raise ValueError("basis indices must be contiguous from 0")
            members.append(SubVector(word=entry["word"],
                                     direction=np.asarray(entry["vector"])))
        embedding_dim = int(payload["embedding_dim"])
        basis = None
        if embedding_dim > 0:
            basis = StyleBasis(
                dim=embedding_dim,
                members=tuple(members),
                ortho_threshold=float(payload["ortho_threshold"]),
                epsilon_fraction=float(payload["epsilon_fraction"]))
        elif members:
            raise ValueError("basis members without an embedding_dim")
        models = []
        for row in payload["models"]:
            coordinate = None
            if row.get("coordinate") is not None:
                if basis is None:
                    raise ValueError("coordinate without a basis")
                coordinate = Coordinate(
                    basis_fingerprint=basis.fingerprint,
                    entries={int(i): float(v)
                             for i, v in row["coordinate"].items()})
            models.append(ManifestModel(
                model_id=row["model_id"],
                display_name=row["display_name"],
                artifact_uri=row["artifact_uri"],
                artifact_bytes=int(row["artifact_bytes"]),
                artifact_sha256=row["artifact_sha256"],
                coordinate=coordinate))
        return cls(version=int(payload["version"]),
                   summarizer_fingerprint=payload["summarizer_fingerprint"],
                   instruction_template_hash=payload[
                       "instruction_template_hash"],
                   embedding_dim=embedding_dim,
                   ortho_threshold=float(payload["ortho_threshold"]),
                   epsilon_fraction=float(payload["epsilon_fraction"]),
                   basis=basis,
                   models=tuple(models))

    @classmethod
    def from_json_bytes(cls, data: bytes) -> "RegistryManifest":
        return cls.from_json_dict(json.loads(data))


@dataclass(frozen=True)
class Explanation:
    """Human-readable decomposition of one model."""

    model_id: str
    terms: tuple[tuple[str, float], ...]  # sorted by |coefficient| desc
    residual_fraction: float

    def __post_init__(self):
        magnitudes = [abs(c) for _, c in self.terms]
        if magnitudes != sorted(magnitudes, reverse=True):
            raise ValueError("terms must be sorted by |coefficient| desc")
        if not 0.0 <= self.residual_fraction <= 1.0:
            raise ValueError("residual_fraction must be in [0, 1]")

    def render(self, top_k: int = 5) -> str:
        if not self.terms:
            return f"{self.model_id}: no measurable style shift"
        shown = ", ".join(f"{word} ({coefficient:+.3g})"
                          for word, coefficient in self.terms[:top_k])
        return f"{self.model_id}: {shown}"


# ---------------------------------------------------------------------------
# the store


def _write_json_atomic(path: Path, payload) -> None:
    staging = path.with_name(path.name + ".tmp")
    staging.write_text(json.dumps(payload, indent=2) + "\n")
    os.replace(staging, path)


class ExplainJobError(RuntimeError):
    """Explanation run aborted; already-persisted progress is intact."""

    def __init__(self, message: str, failing_model: str | None = None):
        super().__init__(message)
        self.failing_model = failing_model


class Registry:
    """Directory-backed catalog with an append-only basis.

    One writer at a time (callers serialize through ``lock``); readers
    can safely consume ``manifest.json`` at any moment because every
    mutation lands via atomic rename.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.lock = threading.RLock()
        config_path = self.root / "config.json"
        if not config_path.exists():
            raise FileNotFoundError(
                f"{self.root} is not a registry (missing config.json)")
        config = json.loads(config_path.read_text())
        self.base_model_fingerprint = config["base_model_fingerprint"]
        self.ortho_threshold = float(config["ortho_threshold"])
        self.epsilon_fraction = float(config["epsilon_fraction"])
        self.candidate_cap = int(config["candidate_cap"])

    @classmethod
    def create(cls, root, base_model_fingerprint: str, *,
               ortho_threshold: float = DEFAULT_ORTHO_THRESHOLD,
               epsilon_fraction: float = DEFAULT_EPSILON_FRACTION,
               candidate_cap: int = DEFAULT_CANDIDATE_CAP) -> "Registry":
        root = Path(root)
        if (root / "config.json").exists():
            raise FileExistsError(f"registry already exists at {root}")
        (root / "basis").mkdir(parents=True, exist_ok=True)
        (root / "models").mkdir(exist_ok=True)
        _write_json_atomic(root / "config.json", {
            "schema": 1,
            "base_model_fingerprint": base_model_fingerprint,
            "ortho_threshold": ortho_threshold,
            "epsilon_fraction": epsilon_fraction,
            "candidate_cap": candidate_cap,
        })
        registry = cls(root)
        registry._publish_manifest(registry._empty_manifest())
        return registry

    # -- paths ---------------------------------------------------------------

    def _model_dir(self, model_id: str) -> Path:
        return self.root / "models" / model_id

    def _record_path(self, model_id: str) -> Path:
        return self._model_dir(model_id) / "record.json"

    def artifact_path(self, model_id: str) -> Path:
        return self._model_dir(model_id) / "snapshot.bin"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def job_path(self) -> Path:
        return self.root / "job.json"

    # -- reads ---------------------------------------------------------------

    def _empty_manifest(self) -> RegistryManifest:
        return RegistryManifest(
            version=0, summarizer_fingerprint="",
            instruction_template_hash="", embedding_dim=0,
            ortho_threshold=self.ortho_threshold,
            epsilon_fraction=self.epsilon_fraction,
            basis=None, models=())

    def manifest(self) -> RegistryManifest:
        if not self.manifest_path.exists():
            return self._empty_manifest()
        return RegistryManifest.from_json_bytes(
            self.manifest_path.read_bytes())

    def records(self) -> list[ModelRecord]:
        """All records in registration (= id) order."""
        models_dir = self.root / "models"
        records = []
        for record_path in sorted(models_dir.glob("*/record.json")):
            records.append(ModelRecord.from_json_dict(
                json.loads(record_path.read_text())))
        return records

    def record(self, model_id: str) -> ModelRecord:
        path = self._record_path(model_id)
        if not path.exists():
            raise KeyError(model_id)
        return ModelRecord.from_json_dict(json.loads(path.read_text()))

    # -- registration ----------------------------------------------------------

    def register_model(self, display_name: str, artifact_uri: str,
                       base_model_fingerprint: str) -> str:
        """Copy an artifact into the store and persist its record."""
        if base_model_fingerprint != self.base_model_fingerprint:
            raise ValueError(
                f"base model mismatch: got {base_model_fingerprint!r}, "
                f"registry expects {self.base_model_fingerprint!r}")
        source = Path(artifact_uri)
        try:
            read_snapshot(source)  # malformed artifacts are rejected here
        except (OSError, SnapshotError) as err:
            raise ValueError(
                f"unreadable artifact {artifact_uri}: {err}") from err
        with self.lock:
            existing = sorted((self.root / "models").glob("m*"))
            model_id = f"m{len(existing):04d}"
            model_dir = self._model_dir(model_id)
            model_dir.mkdir(parents=True)
            blob = source.read_bytes()
            self.artifact_path(model_id).write_bytes(blob)
            record = ModelRecord(
                model_id=model_id,
                display_name=display_name,
                artifact_uri=f"/models/{model_id}/artifact",
                base_model_fingerprint=base_model_fingerprint,
                created_at=datetime.now(timezone.utc).isoformat(
                    timespec="seconds"),
                artifact_bytes=len(blob),
                artifact_sha256=hashlib.sha256(blob).hexdigest())
            self._save_record(record)
            manifest = self.manifest()
            rows = manifest.models + (self._manifest_row(record),)
            self._publish_manifest(replace(manifest, models=rows))
        return model_id

    def _save_record(self, record: ModelRecord) -> None:
        _write_json_atomic(self._record_path(record.model_id),
                           record.to_json_dict())

    def _manifest_row(self, record: ModelRecord) -> ManifestModel:
        return ManifestModel(model_id=record.model_id,
                             display_name=record.display_name,
                             artifact_uri=record.artifact_uri,
                             artifact_bytes=record.artifact_bytes,
                             artifact_sha256=record.artifact_sha256,
                             coordinate=record.coordinate)

    def _publish_manifest(self, manifest: RegistryManifest) -> None:
        staging = self.manifest_path.with_name("manifest.json.tmp")
        staging.write_bytes(manifest.to_json_bytes())
        os.replace(staging, self.manifest_path)

    # -- explanation ----------------------------------------------------------

    def _load_job(self, summarizer_fingerprint: str,
                  template_hash: str, prompt_set_id: str) -> dict | None:
        if not self.job_path.exists():
            return None
        job = json.loads(self.job_path.read_text())
        if (job.get("status") == "running"
                and job.get("summarizer_fingerprint")
                == summarizer_fingerprint
                and job.get("instruction_template_hash") == template_hash
                and job.get("prompt_set_id") == prompt_set_id):
            return job
        return None

    def _basis_member(self, index: int, word: str,
                      probability: float, dim: int) -> SubVector:
        direction = read_basis_vector(
            self.root / "basis" / f"{index:03d}.vec")
        if direction.shape != (dim,):
            raise ExplainJobError(
                f"basis vector {index} has dim {direction.shape}")
        return SubVector(word=word, direction=direction,
                         source_probability=probability)

    def _persist_new_members(self, basis: StyleBasis, old_count: int) -> None:
        for index in range(old_count, len(basis.members)):
            write_basis_vector(self.root / "basis" / f"{index:03d}.vec",
                               basis.members[index].direction)

    def explain_all(self, summarizer, base_gen, model_backend_for,
                    prompts: PromptSet, *,
                    candidate_cap: int | None = None,
                    after_model_hook=None) -> RegistryManifest:
        """Probe every unexplained model, grow the shared basis, then
        recompute all coordinates against the final basis and publish a
        new manifest version.

        Progress is persisted model by model (job.json plus basis files),
        so a killed run resumes where it stopped and converges to the
        same manifest bytes an uninterrupted run produces.  A rerun with
        nothing to do returns the current manifest untouched.
        """
        with self.lock:
            return self._explain_all_locked(
                summarizer, base_gen, model_backend_for, prompts,
                candidate_cap=candidate_cap,
                after_model_hook=after_model_hook)

    def _explain_all_locked(self, summarizer, base_gen, model_backend_for,
                            prompts, *, candidate_cap, after_model_hook):
        records = self.records()
        if not records:
            raise ValueError("no registered models to explain")
        cap = self.candidate_cap if candidate_cap is None else candidate_cap
        summarizer_fp = summarizer.fingerprint
        template_hash = instruction_hash()
        manifest = self.manifest()
        dim = summarizer.embedding_dim

        empty_basis = StyleBasis(dim=dim, members=(),
                                 ortho_threshold=self.ortho_threshold,
                                 epsilon_fraction=self.epsilon_fraction)
        rebinding = (manifest.summarizer_fingerprint
                     not in ("", summarizer_fp)
                     or manifest.instruction_template_hash
                     not in ("", template_hash))

        # Resume state outranks the manifest: an interrupted run may have
        # grown past the published basis (or started a rebinding from
        # scratch), and job.json + basis/NNN.vec carry that progress.
        job = self._load_job(summarizer_fp, template_hash,
                             prompts.prompt_set_id)
        if job is not None:
            basis = empty_basis
            for index, word in enumerate(job["basis_words"]):
                basis = basis.append(self._basis_member(
                    index, word, job["basis_probabilities"][index], dim))
        else:
            self.job_path.unlink(missing_ok=True)  # stale, different run
            if rebinding or manifest.basis is None:
                # a different summarizer (or instruction) produces
                # embeddings in an unrelated space: re-probe everything
                basis = empty_basis
            else:
                if manifest.embedding_dim != dim:
                    raise ExplainJobError(
                        f"summarizer dim {dim} != manifest dim "
                        f"{manifest.embedding_dim}")
                basis = manifest.basis
            for stale in (self.root / "basis").glob("*.vec"):
                if int(stale.stem) >= len(basis.members):
                    stale.unlink()
            job = {
                "status": "running",
                "summarizer_fingerprint": summarizer_fp,
                "instruction_template_hash": template_hash,
                "prompt_set_id": prompts.prompt_set_id,
                "basis_words": [m.word for m in basis.members],
                "basis_probabilities": [m.source_probability
                                        for m in basis.members],
            }

        # A record's own probe block is the sole completion marker, so a
        # crash at any point repeats at most one model's probing, and
        # re-probing is idempotent (the basis already holds its members).
        pending = [r for r in records
                   if not r.probed_with(summarizer_fp, template_hash,
                                        prompts.prompt_set_id)]
        if not pending and not rebinding and manifest.basis is not None \
                and basis.fingerprint == manifest.basis.fingerprint \
                and not self.job_path.exists():
            return manifest  # nothing to do; keep the published version

        base_texts = None

        def word_to_vector(word: str) -> SubVector:
            nonlocal base_texts
            if base_texts is None:
                base_texts = [base_gen.generate([p])[0]
                              for p in prompts.prompts]
            sub = word_to_subvector(summarizer, word, base_gen, prompts,
                                    base_texts=base_texts)
            # quantize at the boundary so .vec files are lossless stores
            return SubVector(word=sub.word,
                             direction=quantize_direction(sub.direction),
                             source_probability=sub.source_probability)

        for record in pending:
            try:
                pllm_gen = model_backend_for(record)
                pairs = probe_models(base_gen, pllm_gen, prompts)
                shift = extract_shift_embedding(summarizer, pairs)
                ranked = candidate_words(summarizer, shift, cap) \
                    if float(np.linalg.norm(shift)) > 0.0 else []
                old_count = len(basis.members)
                basis, _ = extend_basis_for_model(
                    shift, basis, iter(ranked), word_to_vector,
                    candidate_cap=cap)
            except BackendError as err:
                _write_json_atomic(self.job_path, job)
                raise ExplainJobError(
                    f"backend failed while explaining "
                    f"{record.model_id}: {err}",
                    failing_model=record.model_id) from err
            # persistence order matters: vectors, then the job that
            # references them, then the record marking the model done
            self._persist_new_members(basis, old_count)
            job["basis_words"] = [m.word for m in basis.members]
            job["basis_probabilities"] = [m.source_probability
                                          for m in basis.members]
            _write_json_atomic(self.job_path, job)
            updated = replace(record,
                              summarizer_fingerprint=summarizer_fp,
                              instruction_template_hash=template_hash,
                              prompt_set_id=prompts.prompt_set_id,
                              shift_embedding=tuple(shift),
                              coordinate=None, report=None)
            self._save_record(updated)
            if after_model_hook is not None:
                after_model_hook(record.model_id)

        # final pass: every coordinate lives on the finished basis
        rows = []
        for record in self.records():
            if record.probed_with(summarizer_fp, template_hash,
                                  prompts.prompt_set_id):
                report = decompose(np.asarray(record.shift_embedding), basis)
                record = replace(record, coordinate=report.coordinate,
                                 report=report)
                self._save_record(record)
            rows.append(self._manifest_row(record))
        published = RegistryManifest(
            version=manifest.version + 1,
            summarizer_fingerprint=summarizer_fp,
            instruction_template_hash=template_hash,
            embedding_dim=dim,
            ortho_threshold=self.ortho_threshold,
            epsilon_fraction=self.epsilon_fraction,
            basis=basis,
            models=tuple(rows))
        self._publish_manifest(published)
        self.job_path.unlink(missing_ok=True)
        return published

    # -- rendering -------------------------------------------------------------

    def render_explanation(self, model_id: str) -> Explanation:
        record = self.record(model_id)
        if record.coordinate is None:
            raise ValueError(f"model {model_id} is not explained yet")
        manifest = self.manifest()
        if manifest.basis is None:
            raise ValueError("registry has no published basis")
        words = [m.word for m in manifest.basis.members]
        terms = sorted(
            ((words[i], value)
             for i, value in record.coordinate.entries.items()
             if value != 0.0),
            key=lambda t: (-abs(t[1]), t[0]))
        shift_norm = float(np.linalg.norm(record.shift_embedding))
        fraction = record.report.residual_norm / shift_norm \
            if shift_norm > 0.0 else 0.0
        return Explanation(model_id=model_id, terms=tuple(terms),
                           residual_fraction=min(1.0, fraction))
