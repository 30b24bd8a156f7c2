"""Device-side logic: profile local data in the shared style space, pick
or merge cached models by coordinate distance, plan memory-bounded layer
streaming, and download the chosen artifact with resume + verification.
"""

from __future__ import annotations

import hashlib
import http.client
import itertools
import json
import math
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.optimize

from xpert.probe import PromptSet, ResponsePair, extract_shift_embedding
from xpert.protocol import BackendHandle
from xpert.registry import ManifestModel, RegistryManifest
from xpert.vectorspace import Coordinate, StyleBasis, decompose

DEFAULT_METRIC = "l1"
DEFAULT_K_MAX = 2
TAU_FRACTION = 0.25
TAU_FLOOR = 1e-9


@dataclass(frozen=True)
class LocalProfile:
    """The local dataset's coordinate; the only thing that leaves
    the device."""

    coordinate: Coordinate
    sample_count: int
    prompt_set_id: str

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if not all(math.isfinite(v) for v in self.coordinate.entries.values()):
            raise ValueError("coordinate entries must be finite")


def save_profile(profile: LocalProfile, path) -> None:
    payload = {
        "basis_fingerprint": profile.coordinate.basis_fingerprint,
        "entries": {str(i): v
                    for i, v in sorted(profile.coordinate.entries.items())},
        "sample_count": profile.sample_count,
        "prompt_set_id": profile.prompt_set_id,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_profile(path) -> LocalProfile:
    payload = json.loads(Path(path).read_text())
    coordinate = Coordinate(
        basis_fingerprint=payload["basis_fingerprint"],
        entries={int(i): float(v) for i, v in payload["entries"].items()})
    return LocalProfile(coordinate=coordinate,
                        sample_count=int(payload["sample_count"]),
                        prompt_set_id=payload["prompt_set_id"])


def compute_local_profile(backend: BackendHandle, base_gen: BackendHandle,
                          local_texts: Sequence[str], prompts: PromptSet,
                          basis: StyleBasis) -> LocalProfile:
    """Map local responses into the shared style space.

    Pairs each local text with the base model's response to the same
    prompt, summarizes the difference, and decomposes it over the given
    basis.  Local texts go only to the local backend handles; backend
    call volume depends on |prompts| alone.
    """
    if not local_texts:
        raise ValueError("local_texts must be non-empty")
    if len(local_texts) != len(prompts):
        raise ValueError(
            f"{len(local_texts)} local texts for {len(prompts)} prompts; "
            "counts must match")
    pairs = []
    for prompt, local_text in zip(prompts.prompts, local_texts):
        base_text = base_gen.generate([prompt])[0]
        pairs.append(ResponsePair(prompt=prompt, base=base_text,
                                  personalized=local_text))
    shift = extract_shift_embedding(backend, pairs)
    report = decompose(shift, basis)
    return LocalProfile(coordinate=report.coordinate,
                        sample_count=len(local_texts),
                        prompt_set_id=prompts.prompt_set_id)


# ---------------------------------------------------------------------------
# distances and selection


def _check_metric(metric: str) -> str:
    metric = metric.lower()
    if metric not in ("l1", "l2"):
        raise ValueError(f"unknown metric {metric!r}; use 'l1' or 'l2'")
    return metric


def coordinate_distance(a: Coordinate, b: Coordinate,
                        metric: str = DEFAULT_METRIC) -> float:
    """Distance over the union support; absent indices count as zero."""
    if a.basis_fingerprint != b.basis_fingerprint:
        raise ValueError("coordinates live on different bases "
                         "(fingerprint mismatch)")
    metric = _check_metric(metric)
    indices = set(a.entries) | set(b.entries)
    gaps = [a.entries.get(i, 0.0) - b.entries.get(i, 0.0) for i in indices]
    if metric == "l1":
        return float(sum(abs(g) for g in gaps))
    return float(math.sqrt(sum(g * g for g in gaps)))


@dataclass(frozen=True)
class SelectionResult:
    model_id: str
    distance: float
    ranking: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.ranking:
            raise ValueError("ranking must be non-empty")
        distances = [d for _, d in self.ranking]
        if distances != sorted(distances):
            raise ValueError("ranking must be sorted ascending")
        if (self.model_id, self.distance) != self.ranking[0]:
            raise ValueError("model_id must head the ranking")


def _explained_models(profile: LocalProfile,
                      manifest: RegistryManifest) -> list[ManifestModel]:
    explained = [m for m in manifest.models if m.coordinate is not None]
    if not explained:
        raise ValueError("manifest lists no explained models")
    if profile.coordinate.basis_fingerprint != manifest.basis_fingerprint:
        raise ValueError("profile was computed against a different basis "
                         "(fingerprint mismatch)")
    return explained


def select_best(profile: LocalProfile, manifest: RegistryManifest,
                metric: str = DEFAULT_METRIC) -> SelectionResult:
    """Rank every explained model by coordinate distance to the profile.

    Ties break lexicographically on model_id, so results are total and
    reproducible.
    """
    metric = _check_metric(metric)
    scored = sorted(
        (coordinate_distance(profile.coordinate, m.coordinate, metric),
         m.model_id)
        for m in _explained_models(profile, manifest))
    ranking = tuple((model_id, distance) for distance, model_id in scored)
    return SelectionResult(model_id=ranking[0][0], distance=ranking[0][1],
                           ranking=ranking)


# ---------------------------------------------------------------------------
# merge planning


@dataclass(frozen=True)
class MergePlan:
    members: tuple[tuple[str, float], ...]
    achieved_distance: float
    threshold_tau: float
    feasible: bool

    def __post_init__(self):
        if not self.members:
            raise ValueError("plan needs at least one member")
        if any(alpha < 0 for _, alpha in self.members):
            raise ValueError("alphas must be non-negative")
        if self.feasible and not self.achieved_distance < self.threshold_tau:
            raise ValueError("feasible plan must beat the threshold")


def default_tau(profile: LocalProfile) -> float:
    l1_mass = sum(abs(v) for v in profile.coordinate.entries.values())
    return TAU_FRACTION * max(l1_mass, TAU_FLOOR)


def _stack_coordinates(target: Coordinate,
                       members: Sequence[ManifestModel]
                       ) -> tuple[np.ndarray, np.ndarray]:
    indices = sorted(set(target.entries).union(
        *(set(m.coordinate.entries) for m in members)))
    matrix = np.array([[m.coordinate.entries.get(i, 0.0) for i in indices]
                       for m in members], dtype=np.float64).T
    goal = np.array([target.entries.get(i, 0.0) for i in indices],
                    dtype=np.float64)
    return matrix, goal


def _solve_alphas(matrix: np.ndarray, goal: np.ndarray,
                  metric: str) -> np.ndarray:
    """argmin_{alpha >= 0} distance(matrix @ alpha, goal)."""
    k = matrix.shape[1]
    if metric == "l2":
        alphas, _ = scipy.optimize.nnls(matrix, goal)
        return alphas
    # L1 as a linear program: minimize sum(t) with -t <= M a - g <= t
    m = matrix.shape[0]
    objective = np.concatenate([np.zeros(k), np.ones(m)])
    upper = np.vstack([
        np.hstack([matrix, -np.eye(m)]),
        np.hstack([-matrix, -np.eye(m)]),
    ])
    bounds = [(0.0, None)] * k + [(0.0, None)] * m
    result = scipy.optimize.linprog(
        objective, A_ub=upper, b_ub=np.concatenate([goal, -goal]),
        bounds=bounds, method="highs")
    if not result.success:
        raise RuntimeError(f"alpha solve failed: {result.message}")
    return result.x[:k]


def find_merge_set(profile: LocalProfile, manifest: RegistryManifest,
                   tau: float | None = None, k_max: int = DEFAULT_K_MAX,
                   metric: str = DEFAULT_METRIC) -> MergePlan:
    """Smallest model set whose weighted coordinate mix beats tau.

    The singleton best model wins outright when it is already below tau.
    Otherwise subset sizes are tried in increasing k; within one k the
    plan with minimum achieved distance wins, ties broken by member ids.
    An infeasible search still returns the best attempt, marked
    feasible=False.
    """
    metric = _check_metric(metric)
    if tau is None:
        tau = default_tau(profile)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    explained = {m.model_id: m for m in _explained_models(profile, manifest)}
    best_single = select_best(profile, manifest, metric)
    best_plan = MergePlan(members=((best_single.model_id, 1.0),),
                          achieved_distance=best_single.distance,
                          threshold_tau=tau,
                          feasible=best_single.distance < tau)
    if best_plan.feasible:
        return best_plan
    for k in range(2, k_max + 1):
        round_best: tuple[float, tuple[str, ...], np.ndarray] | None = None
        for ids in itertools.combinations(sorted(explained), k):
            members = [explained[model_id] for model_id in ids]
            matrix, goal = _stack_coordinates(profile.coordinate, members)
            alphas = _solve_alphas(matrix, goal, metric)
            gap = matrix @ alphas - goal
            distance = float(np.abs(gap).sum()) if metric == "l1" \
                else float(np.linalg.norm(gap))
            if round_best is None or (distance, ids) < round_best[:2]:
                round_best = (distance, ids, alphas)
        if round_best is None:
            continue  # fewer models than k
        distance, ids, alphas = round_best
        plan = MergePlan(
            members=tuple((model_id, float(max(alpha, 0.0)))
                          for model_id, alpha in zip(ids, alphas)),
            achieved_distance=distance,
            threshold_tau=tau,
            feasible=distance < tau)
        if plan.feasible:
            return plan
        if plan.achieved_distance < best_plan.achieved_distance:
            best_plan = plan
    return best_plan


# ---------------------------------------------------------------------------
# layer streaming


@dataclass(frozen=True)
class ScheduleStep:
    layer_index: int
    action: str  # load | infer | evict


@dataclass(frozen=True)
class LayerSchedule:
    steps: tuple[ScheduleStep, ...]
    peak_resident_bytes: int
    budget_bytes: int


class BudgetError(ValueError):
    """Budget below the minimal feasible residency."""

    def __init__(self, message: str, minimal_budget: int):
        super().__init__(message)
        self.minimal_budget = minimal_budget


def plan_layer_schedule(layer_bytes: Sequence[int], working_bytes: int,
                        budget_bytes: int) -> LayerSchedule:
    """Stream layers through a fixed memory budget.

    Layers stay resident as long as they fit; when the next load would
    burst the budget, the oldest resident layers are evicted first.
    Working bytes (activation scratch) stay reserved throughout.
    """
    sizes = [int(s) for s in layer_bytes]
    if not sizes or any(s <= 0 for s in sizes):
        raise ValueError("layer_bytes must be positive integers")
    if working_bytes < 0 or budget_bytes < 0:
        raise ValueError("byte counts must be non-negative")
    minimal = max(sizes) + int(working_bytes)
    if budget_bytes < minimal:
        raise BudgetError(
            f"budget {budget_bytes} below minimal feasible {minimal}",
            minimal_budget=minimal)
    steps: list[ScheduleStep] = []
    resident: list[int] = []  # layer indices, oldest first
    resident_bytes = 0
    peak = 0
    for index, size in enumerate(sizes):
        while resident_bytes + size + working_bytes > budget_bytes:
            evicted = resident.pop(0)
            resident_bytes -= sizes[evicted]
            steps.append(ScheduleStep(layer_index=evicted, action="evict"))
        steps.append(ScheduleStep(layer_index=index, action="load"))
        resident.append(index)
        resident_bytes += size
        peak = max(peak, resident_bytes + working_bytes)
        steps.append(ScheduleStep(layer_index=index, action="infer"))
    return LayerSchedule(steps=tuple(steps), peak_resident_bytes=peak,
                         budget_bytes=int(budget_bytes))


# ---------------------------------------------------------------------------
# artifact download


def download_and_verify(entry: ManifestModel, destination,
                        base_url: str = "", max_attempts: int = 5) -> Path:
    """Fetch one model artifact, resuming partial transfers by byte range,
    then verify length and content hash against the manifest entry.
    """
    destination = Path(destination)
    url = entry.artifact_uri
    if base_url:
        url = base_url.rstrip("/") + "/" + url.lstrip("/")
    part = destination.with_name(destination.name + ".part")
    if not part.exists():
        part.write_bytes(b"")
    have = part.stat().st_size
    attempts = 0
    while have < entry.artifact_bytes:
        if attempts >= max_attempts:
            raise IOError(f"gave up on {url} after {attempts} attempts")
        attempts += 1
        request = urllib.request.Request(url)
        if have:
            request.add_header("Range", f"bytes={have}-")
        try:
            with urllib.request.urlopen(request) as response, \
                    open(part, "ab" if have else "wb") as sink:
                while True:
                    chunk = response.read(65536)
                    if not chunk:
                        break
                    sink.write(chunk)
        except (urllib.error.URLError, http.client.HTTPException,
                ConnectionError, TimeoutError):
            pass  # retry resumes from whatever landed on disk
        have = part.stat().st_size
    if have != entry.artifact_bytes:
        raise IOError(
            f"artifact length {have} != manifest {entry.artifact_bytes}")
    digest = hashlib.sha256(part.read_bytes()).hexdigest()
    if digest != entry.artifact_sha256:
        raise IOError(f"artifact hash mismatch for {entry.model_id}: "
                      f"{digest[:12]}.. != {entry.artifact_sha256[:12]}..")
    part.replace(destination)
    return destination
