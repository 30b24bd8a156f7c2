"""Synthetic style worlds and a deterministic stub backend.

The stub speaks the full wire protocol with planted ground truth, so the
entire pipeline (probe, registry, selector) runs at desk scale with
reproducible, seeded behavior.  Every reply is a pure function of the
world seed and the request content, which is what makes golden
transcripts and bit-identical reruns possible.

Stub numerics (mirrored by any conforming reference backend):

* RNG streams derive from sha256("xpert-stub:" + parts joined by \\x1f),
  whose 32-byte digest seeds numpy's default generator as four little-
  endian uint64 words.
* Generated texts carry their style mixture in a leading bracket tag,
  ``[word:weight,...]`` with repr-formatted weights (``[]`` when plain).
* shift_embed averages per-pair planted-vector deltas computed from the
  tags (the reserved word ``default`` contributes the zero vector), then
  adds in-span Gaussian noise of scale noise_sigma/sqrt(pair count)
  seeded from the per-pair (prompt, delta) signature, so equal additive
  offsets on both sides cancel exactly.
* candidates ranks the vocabulary by cosine against the query and maps
  scores through a temperature-4 softmax.
* word_vector applies a fixed orthogonal map to the mean of the prompt
  token embeddings; grad_word_vector differentiates the cosine-distance
  loss analytically.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from xpert.probe import (
    PromptSet,
    candidate_words,
    extract_shift_embedding,
    probe_models,
    word_to_subvector,
)
from xpert.protocol import (
    KNOWN_OPS,
    PROTOCOL_VERSION,
    BackendHandle,
    LoopbackTransport,
    Transport,
    encode_message,
)
from xpert.vectorspace import (
    StyleBasis,
    SubVector,
    decompose,
    extend_basis_for_model,
)

STYLE_WORDS = (
    "friendly", "formal", "poetic", "sarcastic", "concise", "verbose",
    "cheerful", "technical", "witty", "solemn", "playful", "academic",
    "dramatic", "blunt", "tender", "brisk", "ornate", "humble", "cryptic",
    "lucid", "breezy", "stern", "lyrical", "dry", "vivid", "mellow",
    "urgent", "earnest", "ironic", "crisp", "florid", "gloomy", "upbeat",
    "casual", "whimsical", "polite",
)

# reserved mixture word contributing the zero vector (unstyled mass)
PLAIN_WORD = "default"

SOFTMAX_TEMPERATURE = 4.0

# Calibrated noise levels for the benchmark sweeps.  Probe noise leaks
# across style axes, so anything much above 0.05 starts tripping the
# orthogonality gate during basis construction and whole words vanish
# from the catalog; 0.05 keeps the basis intact while still smoothing
# the selection-accuracy curve near the 0.5 crossover.  0.8 is past the
# cliff and reliably scrambles graded-intensity orderings.
CALIBRATED_NOISE_SIGMA = 0.05
DISRUPTIVE_NOISE_SIGMA = 0.8


def _derive_rng(*parts) -> np.random.Generator:
    """Seed a generator from a content signature, reproducibly."""
    canonical = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(b"xpert-stub:" + canonical.encode("utf-8")).digest()
    words = np.frombuffer(digest, dtype="<u8")
    return np.random.default_rng(words.tolist())


def _canonical_orthonormal(rng: np.random.Generator, rows: int,
                           dim: int) -> np.ndarray:
    """Orthonormal rows with QR signs fixed for reproducibility."""
    q, r = np.linalg.qr(rng.normal(size=(dim, rows)))
    q = q * np.sign(np.diag(r))
    return q.T.copy()


def parse_mixture(spec: str | None,
                  vocabulary: tuple[str, ...] | None = None) -> dict[str, float]:
    """Parse a mixture spec like ``"poetic"`` or ``"poetic:0.7,default:0.3"``.

    Empty or None means no style.  Weights must be finite and
    non-negative; when a vocabulary is given, words outside it (other
    than the reserved plain word) are rejected.
    """
    if spec is None or spec == "":
        return {}
    mixture: dict[str, float] = {}
    for part in spec.split(","):
        word, sep, raw = part.partition(":")
        weight = float(raw) if sep else 1.0
        if not word:
            raise ValueError(f"bad mixture entry {part!r}")
        if not math.isfinite(weight) or weight < 0:
            raise ValueError(f"bad mixture weight {part!r}")
        if vocabulary is not None and word != PLAIN_WORD \
                and word not in vocabulary:
            raise ValueError(f"unknown style word {word!r}")
        mixture[word] = mixture.get(word, 0.0) + weight
    return mixture


def canonical_mixture(mixture: dict[str, float]) -> str:
    return ",".join(f"{w}:{mixture[w]!r}" for w in sorted(mixture))


@dataclass(frozen=True, eq=False)
class StyleWorld:
    """Planted ground truth: one unit vector per style word."""

    seed: int
    dim: int
    styles: dict[str, np.ndarray]
    noise_sigma: float
    style_gap: float  # minimum pairwise angle between styles, degrees

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(self.styles)

    @cached_property
    def planted(self) -> np.ndarray:
        mat = np.array([self.styles[w] for w in self.styles])
        mat.setflags(write=False)
        return mat

    def mixture_vector(self, mixture: dict[str, float]) -> np.ndarray:
        """Planted combination; unknown and plain words contribute zero."""
        vec = np.zeros(self.dim)
        for word in sorted(mixture):
            if word in self.styles:
                vec = vec + mixture[word] * self.styles[word]
        return vec


def generate_world(seed: int, n_styles: int, dim: int,
                   noise_sigma: float = 0.0) -> StyleWorld:
    """Plant ``n_styles`` orthonormal unit style vectors in ``dim``.

    Orthonormality trivially satisfies the pairwise |cos| <= 0.05 bound
    the harness promises; the noise knob feeds the stub's shift_embed.
    """
    if not 1 <= n_styles <= dim:
        raise ValueError("need 1 <= n_styles <= dim")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    words = list(STYLE_WORDS[:n_styles])
    for i in range(len(words), n_styles):
        words.append(f"style{i:02d}")
    planted = _canonical_orthonormal(_derive_rng("world", seed, n_styles, dim),
                                     n_styles, dim)
    styles = {w: planted[i] for i, w in enumerate(words)}
    if n_styles > 1:
        gram = np.abs(planted @ planted.T)
        np.fill_diagonal(gram, 0.0)
        gap = math.degrees(math.acos(min(1.0, float(gram.max()))))
    else:
        gap = 90.0
    return StyleWorld(seed=seed, dim=dim, styles=styles,
                      noise_sigma=noise_sigma, style_gap=gap)


@dataclass(frozen=True)
class SyntheticModel:
    """A pretend personalized model: its training-style mixture."""

    model_id: str
    mixture: dict[str, float]
    similarity: float  # mixture mass on the sweep's reference style

    def mixture_spec(self) -> str:
        return canonical_mixture(self.mixture)


class StubServer:
    """Protocol backend planted on a StyleWorld; stateless and replayable."""

    def __init__(self, world: StyleWorld):
        self.world = world
        self._words = world.words
        self._planted = world.planted
        self._linmap = _canonical_orthonormal(
            _derive_rng("linmap", world.seed, world.dim),
            world.dim, world.dim)
        self.fingerprint = (
            f"stub:v1:seed={world.seed}:dim={world.dim}"
            f":styles={len(self._words)}:noise={world.noise_sigma!r}")

    # -- plumbing -----------------------------------------------------------

    def handle_line(self, line: str) -> str:
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("not an object")
        except ValueError:
            return encode_message(
                {"id": None,
                 "error": {"code": "bad_json",
                           "message": "unparseable request line"}})
        if request.get("op") == "hello":
            return encode_message(self._hello(request))
        request_id = request.get("id")
        if not isinstance(request_id, int):
            return encode_message(
                {"id": None,
                 "error": {"code": "bad_request",
                           "message": "missing integer id"}})
        try:
            op = request.get("op")
            if op == "generate":
                reply = self._generate(request)
            elif op == "shift_embed":
                reply = self._shift_embed(request)
            elif op == "candidates":
                reply = self._candidates(request)
            elif op == "word_vector":
                reply = self._word_vector(request)
            elif op == "grad_word_vector":
                reply = self._grad_word_vector(request)
            else:
                raise _OpError("unsupported", f"unknown op {op!r}")
        except _OpError as err:
            return encode_message(
                {"id": request_id,
                 "error": {"code": err.code, "message": err.message}})
        return encode_message({"id": request_id, **reply})

    def _hello(self, request: dict) -> dict:
        if request.get("proto") != PROTOCOL_VERSION:
            return {"id": None,
                    "error": {"code": "unsupported_proto",
                              "message": f"want proto {PROTOCOL_VERSION}"}}
        return {"op": "hello",
                "embedding_dim": self.world.dim,
                "capabilities": list(KNOWN_OPS),
                "fingerprint": self.fingerprint}

    # -- ops ----------------------------------------------------------------

    def _generate(self, request: dict) -> dict:
        prompts = request.get("prompts")
        if not isinstance(prompts, list) or not prompts \
                or not all(isinstance(p, str) and p for p in prompts):
            raise _OpError("bad_request", "prompts must be non-empty strings")
        try:
            mixture = parse_mixture(request.get("style_word"), self._words)
        except ValueError as err:
            raise _OpError("unknown_style", str(err))
        tag = canonical_mixture(mixture)
        texts = []
        for prompt in prompts:
            digest = hashlib.sha256(
                f"gen\x1f{self.world.seed}\x1f{tag}\x1f{prompt}"
                .encode("utf-8")).hexdigest()[:8]
            texts.append(f"[{tag}] r{digest} :: {prompt}")
        return {"texts": texts}

    def _parse_tag(self, text: str) -> dict[str, float]:
        if text.startswith("[") and "]" in text:
            spec = text[1:text.index("]")]
            try:
                return parse_mixture(spec)
            except ValueError:
                return {}
        return {}

    def _shift_embed(self, request: dict) -> dict:
        instruction = request.get("instruction")
        pairs = request.get("pairs")
        if not isinstance(instruction, str) or not instruction:
            raise _OpError("bad_request", "missing instruction")
        if not isinstance(pairs, list) or not pairs:
            raise _OpError("bad_request", "pairs must be a non-empty list")
        deltas = np.zeros((len(pairs), self.world.dim))
        signature_parts = []
        for i, pair in enumerate(pairs):
            try:
                prompt = pair["prompt"]
                base_mix = self._parse_tag(pair["base"])
                pers_mix = self._parse_tag(pair["personalized"])
            except (TypeError, KeyError):
                raise _OpError("bad_request", f"malformed pair at index {i}")
            delta = dict(pers_mix)
            for word, weight in base_mix.items():
                delta[word] = delta.get(word, 0.0) - weight
            delta = {w: x for w, x in delta.items() if x != 0.0}
            deltas[i] = self.world.mixture_vector(delta)
            signature_parts.append(f"{prompt}\x1e{canonical_mixture(delta)}")
        vector = deltas.mean(axis=0)
        if self.world.noise_sigma > 0.0:
            rng = _derive_rng("shift-noise", self.world.seed,
                              "\x1d".join(signature_parts))
            scale = self.world.noise_sigma / math.sqrt(len(pairs))
            vector = vector + (rng.normal(size=len(self._words)) * scale) \
                @ self._planted
        return {"vector": vector.tolist()}

    def _candidates(self, request: dict) -> dict:
        vector = _as_float_array(request.get("vector"), self.world.dim)
        limit = request.get("limit")
        if not isinstance(limit, int) or limit < 1:
            raise _OpError("bad_request", "limit must be a positive integer")
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise _OpError("degenerate_vector", "query vector has zero norm")
        cosines = self._planted @ vector / norm
        logits = SOFTMAX_TEMPERATURE * cosines
        weights = np.exp(logits - logits.max())
        probabilities = weights / weights.sum()
        order = sorted(range(len(self._words)),
                       key=lambda i: (-probabilities[i], self._words[i]))
        return {"words": [{"word": self._words[i],
                           "probability": float(probabilities[i])}
                          for i in order[:limit]]}

    def _token_embedding(self, word: str) -> np.ndarray:
        if word in self.world.styles:
            return self.world.styles[word]
        raw = _derive_rng("wordvec", self.world.seed, word).normal(
            size=self.world.dim)
        return raw / np.linalg.norm(raw)

    def _prompt_mean(self, request: dict) -> tuple[np.ndarray, int]:
        word = request.get("word")
        if not isinstance(word, str) or not word:
            raise _OpError("bad_request", "missing word")
        prefix = _as_token_rows(request.get("prefix"), self.world.dim)
        suffix = _as_token_rows(request.get("suffix"), self.world.dim)
        tokens = np.vstack([prefix, self._token_embedding(word)[None, :],
                            suffix])
        return tokens.mean(axis=0), tokens.shape[0]

    def _word_vector(self, request: dict) -> dict:
        mean, _ = self._prompt_mean(request)
        return {"vector": (self._linmap @ mean).tolist()}

    def _grad_word_vector(self, request: dict) -> dict:
        mean, token_count = self._prompt_mean(request)
        target = _as_float_array(request.get("target"), self.world.dim)
        out = self._linmap @ mean
        norm_out = float(np.linalg.norm(out))
        norm_target = float(np.linalg.norm(target))
        if norm_out == 0.0 or norm_target == 0.0:
            raise _OpError("degenerate_vector",
                           "cosine loss undefined at zero norm")
        cos = float(out @ target) / (norm_out * norm_target)
        dcos_dout = (target / (norm_out * norm_target)
                     - (out @ target) * out / (norm_out ** 3 * norm_target))
        dloss_dmean = -(self._linmap.T @ dcos_dout)
        per_token = (dloss_dmean / token_count).tolist()
        n_prefix = len(request.get("prefix") or [])
        n_suffix = len(request.get("suffix") or [])
        return {"loss": 1.0 - cos,
                "grad_prefix": [list(per_token) for _ in range(n_prefix)],
                "grad_suffix": [list(per_token) for _ in range(n_suffix)]}


class _OpError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _as_float_array(values, dim: int) -> np.ndarray:
    if not isinstance(values, list) or len(values) != dim:
        raise _OpError("bad_request", f"expected a vector of length {dim}")
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise _OpError("bad_request", "vector entries must be finite")
    return arr


def _as_token_rows(rows, dim: int) -> np.ndarray:
    if rows is None:
        return np.zeros((0, dim))
    if not isinstance(rows, list):
        raise _OpError("bad_request", "token rows must be a list")
    out = np.zeros((len(rows), dim))
    for i, row in enumerate(rows):
        out[i] = _as_float_array(row, dim)
    return out


class StyledTransport:
    """Pins a generation personality onto every unstyled generate call.

    Models a generator backend that is intrinsically personalized: the
    probing client stays unaware of the mixture behind the handle.
    """

    def __init__(self, inner: Transport, style_word: str):
        self._inner = inner
        self._style_word = style_word

    def exchange(self, line: str) -> str:
        request = json.loads(line)
        if isinstance(request, dict) and request.get("op") == "generate" \
                and "style_word" not in request:
            request["style_word"] = self._style_word
            line = encode_message(request)
        return self._inner.exchange(line)

    def close(self) -> None:
        self._inner.close()


def stub_backend(world: StyleWorld, style_word: str | None = None,
                 server: StubServer | None = None) -> BackendHandle:
    """Connect an in-process handle to a stub backend for ``world``.

    With ``style_word`` set, the handle behaves like a generator whose
    every response carries that style mixture.
    """
    server = server or StubServer(world)
    transport: Transport = LoopbackTransport(server)
    endpoint = f"stub:seed={world.seed}"
    if style_word:
        parse_mixture(style_word, world.words)  # fail fast on bad specs
        transport = StyledTransport(transport, style_word)
        endpoint += f":style={style_word}"
    return BackendHandle(transport, endpoint=endpoint)


# ---------------------------------------------------------------------------
# experiment drivers
#
# Each driver replays one desk-scale experiment against the stub and
# emits TrialReports.  All of them are pure functions of (world, config):
# the stub derives every noise draw from content signatures, so reruns
# are bit-identical without any driver-side RNG.


@dataclass(frozen=True)
class SweepConfig:
    """Shared experiment knobs; sweep-specific inputs stay positional."""

    probe_prompts: int = 4
    local_samples: int = 4
    metric: str = "l1"
    candidate_cap: int = 64
    k_max: int = 2
    workdir: str | None = None  # scratch space; a temp dir when None

    def __post_init__(self):
        if self.probe_prompts < 1 or self.local_samples < 1:
            raise ValueError("probe_prompts and local_samples must be >= 1")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")


@dataclass(frozen=True)
class TrialReport:
    """One row of sweep output (a level, a model count, a mixture)."""

    config: dict
    selection_accuracy: float
    oracle_agreement: float
    backend_call_counts: dict
    basis_size: int
    runtime_ms: int
    extras: dict

    def __post_init__(self):
        for name in ("selection_accuracy", "oracle_agreement"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value!r}")
        for key, count in self.backend_call_counts.items():
            if not isinstance(count, int) or count < 0:
                raise ValueError(f"bad call count {key}={count!r}")
        if self.basis_size < 0 or self.runtime_ms < 0:
            raise ValueError("basis_size and runtime_ms must be >= 0")

    def to_json_dict(self) -> dict:
        return {
            "config": dict(self.config),
            "selection_accuracy": self.selection_accuracy,
            "oracle_agreement": self.oracle_agreement,
            "backend_call_counts": dict(self.backend_call_counts),
            "basis_size": self.basis_size,
            "runtime_ms": self.runtime_ms,
            "extras": dict(self.extras),
        }


def write_trial_reports(path, reports) -> None:
    """One JSON object per line, in report order."""
    with open(path, "w", encoding="utf-8") as sink:
        for report in reports:
            sink.write(json.dumps(report.to_json_dict(), sort_keys=True))
            sink.write("\n")


PLOTDATA_COLUMNS = ("sweep", "x", "selection_accuracy", "oracle_agreement",
                    "xpert_calls", "exhaustive_calls", "basis_size",
                    "runtime_ms")


def write_plotdata_csv(path, reports) -> None:
    """Flat CSV for external plotting; columns as PLOTDATA_COLUMNS.

    ``x`` is the sweep's independent variable (similarity level, model
    count, noise level, or mixture label).
    """
    import csv

    with open(path, "w", encoding="utf-8", newline="") as sink:
        writer = csv.writer(sink)
        writer.writerow(PLOTDATA_COLUMNS)
        for report in reports:
            counts = report.backend_call_counts
            writer.writerow([
                report.config.get("sweep", ""),
                report.config.get("x", ""),
                report.selection_accuracy,
                report.oracle_agreement,
                counts.get("xpert", 0),
                counts.get("exhaustive", 0),
                report.basis_size,
                report.runtime_ms,
            ])


def _oracle_distance(a: dict[int, float], b: dict[int, float],
                     metric: str) -> float:
    """Straight-line re-derivation of coordinate distance for oracles."""
    gaps = [a.get(i, 0.0) - b.get(i, 0.0) for i in set(a) | set(b)]
    if metric == "l1":
        return float(sum(abs(g) for g in gaps))
    return float(math.sqrt(sum(g * g for g in gaps)))


def _handle_calls(*handles) -> int:
    return int(sum(sum(h.call_counts.values()) for h in handles))


def _registry_catalog(world, server, mixtures, prompts, workdir,
                      candidate_cap):
    """Spin up a registry, register one model per mixture, explain all.

    Returns (registry, manifest, model_ids in registration order).
    Imported lazily: the registry depends on this module's stub, not the
    other way around.
    """
    from xpert.merge import TensorSnapshot, write_snapshot
    from xpert.registry import Registry

    workdir = Path(workdir)
    artifact = workdir / "weights.bin"
    if not artifact.exists():
        write_snapshot(TensorSnapshot(
            {"w": np.zeros((2, 2), dtype=np.float32)}), artifact)
    registry = Registry.create(workdir / "registry",
                               base_model_fingerprint="stub-base",
                               candidate_cap=candidate_cap)
    handles = {}
    for i, mixture in enumerate(mixtures):
        model_id = registry.register_model(
            f"synthetic-{i:03d}", str(artifact), "stub-base")
        handles[model_id] = stub_backend(
            world, style_word=canonical_mixture(mixture), server=server)
    manifest = registry.explain_all(
        stub_backend(world, server=server),
        stub_backend(world, server=server),
        lambda record: handles[record.model_id], prompts)
    return registry, manifest, sorted(handles)


def _run_selection_trial(world, server, manifest, reference_word,
                         local_prompts, config):
    """One device-side selection: fresh handles, so calls are countable."""
    from xpert.selector import compute_local_profile, select_best

    local_gen = stub_backend(world, style_word=reference_word,
                             server=server)
    base_gen = stub_backend(world, server=server)
    summarizer = stub_backend(world, server=server)
    local_texts = local_gen.generate(local_prompts.prompts)
    profile = compute_local_profile(summarizer, base_gen, local_texts,
                                    local_prompts, manifest.basis)
    result = select_best(profile, manifest, metric=config.metric)
    calls = _handle_calls(local_gen, base_gen, summarizer)

    rows = [m for m in manifest.models if m.coordinate is not None]
    oracle_id = min(
        (_oracle_distance(profile.coordinate.entries, m.coordinate.entries,
                          config.metric), m.model_id)
        for m in rows)[1]
    return result, oracle_id, calls


def _sweep_workdir(config: SweepConfig, label: str):
    import tempfile

    if config.workdir is not None:
        root = Path(config.workdir) / label
        root.mkdir(parents=True, exist_ok=True)
        return root, None
    holder = tempfile.TemporaryDirectory(prefix=f"xpert-{label}-")
    return Path(holder.name), holder


def run_accuracy_sweep(world: StyleWorld, similarities, n_models: int,
                       trials: int,
                       config: SweepConfig = SweepConfig()) -> list[TrialReport]:
    """Selection accuracy versus model-to-local-data similarity.

    Per level s, every cached model is personalized with mass s on its
    own style and the rest on the next style over; each trial plays one
    device whose local data is purely the reference style and checks
    that selection returns that device's intended model.  The stub's
    probe noise is what makes low-similarity levels hard.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 2 <= n_models <= len(world.words):
        raise ValueError("need 2 <= n_models <= n_styles")
    for s in similarities:
        if not 0.0 < s <= 1.0:
            raise ValueError(f"similarity {s!r} outside (0, 1]")

    words = world.words
    probe_prompts = PromptSet.from_texts(
        [f"probe-{k} question" for k in range(config.probe_prompts)])
    reports = []
    for s in similarities:
        start = time.perf_counter()
        server = StubServer(world)
        mixtures = []
        for i in range(n_models):
            own, partner = words[i], words[(i + 1) % n_models]
            mixture = {own: s} if s == 1.0 else {own: s, partner: 1.0 - s}
            mixtures.append(mixture)
        workdir, holder = _sweep_workdir(config, f"acc-{s!r}")
        try:
            registry, manifest, model_ids = _registry_catalog(
                world, server, mixtures, probe_prompts, workdir,
                config.candidate_cap)
            hits = agreements = 0
            xpert_calls = None
            for t in range(trials):
                # idempotent: only the first call pays the explain cost
                manifest = registry.explain_all(
                    stub_backend(world, server=server),
                    stub_backend(world, server=server),
                    lambda record: None, probe_prompts)
                reference = words[t % n_models]
                intended = model_ids[t % n_models]
                local_prompts = PromptSet.from_texts(
                    [f"device-{t}-{k} note"
                     for k in range(config.local_samples)])
                result, oracle_id, calls = _run_selection_trial(
                    world, server, manifest, reference, local_prompts,
                    config)
                hits += result.model_id == intended
                agreements += result.model_id == oracle_id
                if xpert_calls is None:
                    xpert_calls = calls
                elif calls != xpert_calls:
                    raise RuntimeError(
                        f"selection cost drifted: {calls} != {xpert_calls}")
        finally:
            if holder is not None:
                holder.cleanup()
        reports.append(TrialReport(
            config={"sweep": "accuracy", "x": s, "similarity": s,
                    "n_models": n_models, "trials": trials,
                    "seed": world.seed, "noise_sigma": world.noise_sigma,
                    "metric": config.metric},
            selection_accuracy=hits / trials,
            oracle_agreement=agreements / trials,
            backend_call_counts={
                "xpert": xpert_calls,
                "exhaustive": n_models * config.local_samples},
            basis_size=len(manifest.basis.members),
            runtime_ms=int((time.perf_counter() - start) * 1000),
            extras={"intended_share": hits / trials}))
    return reports


def run_scalability_sweep(world: StyleWorld, model_counts,
                          config: SweepConfig = SweepConfig()
                          ) -> list[TrialReport]:
    """Selection-time backend cost versus catalog size.

    The xpert path probes local data once regardless of how many models
    are cached; the simulated exhaustive baseline pays one inference per
    model per local sample.
    """
    words = world.words
    local_prompts = PromptSet.from_texts(
        [f"scale-{k} note" for k in range(config.local_samples)])
    probe_prompts = PromptSet.from_texts(
        [f"probe-{k} question" for k in range(config.probe_prompts)])
    reports = []
    for count in model_counts:
        if count < 1:
            raise ValueError("model counts must be >= 1")
        start = time.perf_counter()
        server = StubServer(world)
        mixtures = [{words[i % len(words)]: 1.0} for i in range(count)]
        workdir, holder = _sweep_workdir(config, f"scale-{count}")
        try:
            registry, manifest, model_ids = _registry_catalog(
                world, server, mixtures, probe_prompts, workdir,
                config.candidate_cap)
            result, oracle_id, calls = _run_selection_trial(
                world, server, manifest, words[0], local_prompts, config)
        finally:
            if holder is not None:
                holder.cleanup()
        chosen = mixtures[model_ids.index(result.model_id)]
        reports.append(TrialReport(
            config={"sweep": "scalability", "x": count,
                    "model_count": count, "seed": world.seed,
                    "local_samples": config.local_samples,
                    "metric": config.metric},
            selection_accuracy=float(chosen == {words[0]: 1.0}),
            oracle_agreement=float(result.model_id == oracle_id),
            backend_call_counts={
                "xpert": calls,
                "exhaustive": count * config.local_samples},
            basis_size=len(manifest.basis.members),
            runtime_ms=int((time.perf_counter() - start) * 1000),
            extras={"selected": result.model_id}))
    return reports


def _coordinate_entries(report) -> dict[int, float]:
    return dict(report.coordinate.entries)


def run_multilevel_check(world: StyleWorld, levels=(1.0, 2.0, 3.0, 4.0),
                         trials: int = 100,
                         config: SweepConfig = SweepConfig()
                         ) -> TrialReport:
    """Ordering consistency for graded personalization strengths.

    Models sit at increasing magnitudes along one planted style; for
    every level triple i<j<k the middle distances d(i,j) and d(j,k) must
    both stay below d(i,k).  The world's noise_sigma is the summarizer
    quality knob: raise it and violations appear.
    """
    levels = tuple(float(x) for x in levels)
    if len(levels) < 3:
        raise ValueError("need at least 3 graded levels")
    if any(b <= a for a, b in zip(levels, levels[1:])) or levels[0] <= 0:
        raise ValueError("levels must be positive and strictly increasing")
    if trials < 1:
        raise ValueError("trials must be >= 1")

    word = world.words[0]
    server = StubServer(world)
    start = time.perf_counter()
    total_violations = 0
    clean_trials = 0
    basis_sizes = []
    for t in range(trials):
        prompts = PromptSet.from_texts(
            [f"grade-{t}-{k} question" for k in range(config.probe_prompts)])
        summarizer = stub_backend(world, server=server)
        base_gen = stub_backend(world, server=server)
        base_texts = base_gen.generate(prompts.prompts)

        def word_to_vector(candidate: str) -> SubVector:
            return word_to_subvector(summarizer, candidate, base_gen,
                                     prompts, base_texts=base_texts)

        basis = StyleBasis(dim=world.dim)
        shifts = []
        for level in levels:
            handle = stub_backend(world, style_word=f"{word}:{level!r}",
                                  server=server)
            pairs = probe_models(base_gen, handle, prompts)
            shift = extract_shift_embedding(summarizer, pairs)
            ranked = candidate_words(summarizer, shift,
                                     config.candidate_cap)
            basis, _ = extend_basis_for_model(
                shift, basis, ranked, word_to_vector,
                candidate_cap=config.candidate_cap)
            shifts.append(shift)
        coords = [_coordinate_entries(decompose(shift, basis))
                  for shift in shifts]
        violations = 0
        for i in range(len(levels)):
            for j in range(i + 1, len(levels)):
                for k in range(j + 1, len(levels)):
                    outer = _oracle_distance(coords[i], coords[k], "l1")
                    violations += not (_oracle_distance(
                        coords[i], coords[j], "l1") < outer)
                    violations += not (_oracle_distance(
                        coords[j], coords[k], "l1") < outer)
        total_violations += violations
        clean_trials += violations == 0
        basis_sizes.append(len(basis.members))

    return TrialReport(
        config={"sweep": "multilevel", "x": world.noise_sigma,
                "levels": list(levels), "trials": trials,
                "seed": world.seed, "noise_sigma": world.noise_sigma},
        selection_accuracy=clean_trials / trials,
        oracle_agreement=1.0,  # no selection oracle in this check
        backend_call_counts={"xpert": 0, "exhaustive": 0},
        basis_size=max(basis_sizes),
        runtime_ms=int((time.perf_counter() - start) * 1000),
        extras={"violations": total_violations,
                "violation_free_trials": clean_trials})


def run_merge_check(world: StyleWorld, mixtures,
                    tau: float | None = None,
                    config: SweepConfig = SweepConfig()
                    ) -> list[TrialReport]:
    """Merging beats the best single model on mixed-style local data.

    The catalog holds one pure model per planted style.  For every local
    mixture with at least two styles of weight >= 0.2 the merge plan's
    achieved distance must be strictly below the best singleton's; a
    trial that fails raises.  Single-style mixtures are allowed and must
    collapse to a singleton plan.
    """
    from xpert.registry import ManifestModel, RegistryManifest
    from xpert.selector import (
        compute_local_profile,
        find_merge_set,
        select_best,
    )

    server = StubServer(world)
    summarizer = stub_backend(world, server=server)
    base_gen = stub_backend(world, server=server)
    probe_prompts = PromptSet.from_texts(
        [f"probe-{k} question" for k in range(config.probe_prompts)])
    base_texts = base_gen.generate(probe_prompts.prompts)

    def word_to_vector(candidate: str) -> SubVector:
        return word_to_subvector(summarizer, candidate, base_gen,
                                 probe_prompts, base_texts=base_texts)

    # catalog of pure models, explained against one shared basis
    basis = StyleBasis(dim=world.dim)
    shifts = []
    for word in world.words:
        handle = stub_backend(world, style_word=word, server=server)
        pairs = probe_models(base_gen, handle, probe_prompts)
        shift = extract_shift_embedding(summarizer, pairs)
        ranked = candidate_words(summarizer, shift, config.candidate_cap)
        basis, _ = extend_basis_for_model(
            shift, basis, ranked, word_to_vector,
            candidate_cap=config.candidate_cap)
        shifts.append(shift)
    rows = []
    for i, (word, shift) in enumerate(zip(world.words, shifts)):
        report = decompose(shift, basis)
        rows.append(ManifestModel(
            model_id=f"m{i:04d}", display_name=f"pure-{word}",
            artifact_uri=f"/models/m{i:04d}/artifact", artifact_bytes=0,
            artifact_sha256="", coordinate=report.coordinate))
    manifest = RegistryManifest(
        version=1, summarizer_fingerprint=summarizer.fingerprint,
        instruction_template_hash="", embedding_dim=world.dim,
        ortho_threshold=basis.ortho_threshold,
        epsilon_fraction=basis.epsilon_fraction,
        basis=basis, models=tuple(rows))

    reports = []
    for index, mixture in enumerate(mixtures):
        mixture = dict(mixture)
        if not mixture or any(w not in world.styles for w in mixture):
            raise ValueError(f"mixture {index} uses unknown styles")
        start = time.perf_counter()
        local_prompts = PromptSet.from_texts(
            [f"mix-{index}-{k} note" for k in range(config.local_samples)])
        local_gen = stub_backend(world,
                                 style_word=canonical_mixture(mixture),
                                 server=server)
        local_texts = local_gen.generate(local_prompts.prompts)
        profile = compute_local_profile(summarizer, base_gen, local_texts,
                                        local_prompts, basis)
        single = select_best(profile, manifest, metric=config.metric)
        plan = find_merge_set(profile, manifest, tau=tau,
                              k_max=config.k_max, metric=config.metric)
        margin = single.distance - plan.achieved_distance
        heavy_styles = sum(weight >= 0.2 for weight in mixture.values())
        if heavy_styles >= 2 and not margin > 0.0:
            raise ValueError(
                f"mixture {canonical_mixture(mixture)}: merge plan "
                f"({plan.achieved_distance!r}) failed to improve on the "
                f"best single model ({single.distance!r})")
        if len(mixture) == 1 and len(plan.members) != 1:
            raise ValueError(
                f"single-style mixture {canonical_mixture(mixture)} "
                f"produced a {len(plan.members)}-way merge plan")
        reports.append(TrialReport(
            config={"sweep": "merge", "x": canonical_mixture(mixture),
                    "seed": world.seed,
                    "noise_sigma": world.noise_sigma,
                    "metric": config.metric, "k_max": config.k_max},
            selection_accuracy=1.0,
            oracle_agreement=1.0,
            backend_call_counts={"xpert": 0, "exhaustive": 0},
            basis_size=len(basis.members),
            runtime_ms=int((time.perf_counter() - start) * 1000),
            extras={"best_single_distance": single.distance,
                    "merged_distance": plan.achieved_distance,
                    "margin": margin,
                    "feasible": plan.feasible,
                    "threshold_tau": plan.threshold_tau,
                    "members": list(plan.members)}))
    return reports
