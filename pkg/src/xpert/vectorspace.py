"""Style vector space: word-labeled sub-vectors, one-shot decomposition,
and sequential growth of a shared near-orthogonal basis.

A personalized model's behavior shift is captured as one embedding vector.
This module explains such vectors as weighted combinations of unit
sub-vectors, each labeled with the style word that produced it.  Because
members are kept near-orthogonal, a coefficient is read off with a single
projection instead of a joint solve.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Iterator

import numpy as np

DEFAULT_ORTHO_THRESHOLD = 0.1
DEFAULT_EPSILON_FRACTION = 0.2
DEFAULT_CANDIDATE_CAP = 512

WordToVector = Callable[[str], "SubVector"]


def as_vector(values, dim: int | None = None) -> np.ndarray:
    """Validate and copy input into a read-only 1-D float64 array.

    Raises ValueError on empty input, non-finite entries, or a dimension
    mismatch when ``dim`` is given.
    """
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("expected a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector entries must be finite")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"expected dimension {dim}, got {arr.shape[0]}")
    arr.setflags(write=False)
    return arr


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clipped to [-1, 1].

    Raises ValueError for zero-norm inputs or mismatched dimensions.
    """
    va = as_vector(a)
    vb = as_vector(b)
    if va.shape[0] != vb.shape[0]:
        raise ValueError("dimension mismatch")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero-norm vectors")
    return float(np.clip(float(va @ vb) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True, eq=False)
class SubVector:
    """A unit direction labeled by the style word that produced it."""

    word: str
    direction: np.ndarray
    source_probability: float = 1.0

    def __post_init__(self):
        if not isinstance(self.word, str) or not self.word:
            raise ValueError("word must be a non-empty string")
        direction = as_vector(self.direction)
        norm = float(np.linalg.norm(direction))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"direction must be unit norm, got {norm!r}")
        if not (0.0 < self.source_probability <= 1.0):
            raise ValueError("source_probability must be in (0, 1]")
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "source_probability",
                           float(self.source_probability))

    @property
    def dim(self) -> int:
        return self.direction.shape[0]


@dataclass(frozen=True, eq=False)
class StyleBasis:
    """Append-only collection of near-orthogonal sub-vectors.

    Member indices are assigned at insertion and never change; growing the
    basis returns a new value.  Every member pair satisfies
    ``|cos| <= ortho_threshold``.
    """

    dim: int
    members: tuple[SubVector, ...] = ()
    ortho_threshold: float = DEFAULT_ORTHO_THRESHOLD
    epsilon_fraction: float = DEFAULT_EPSILON_FRACTION

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be at least 1")
        if not (0.0 <= self.ortho_threshold < 1.0):
            raise ValueError("ortho_threshold must be in [0, 1)")
        if not (0.0 < self.epsilon_fraction < 1.0):
            raise ValueError("epsilon_fraction must be in (0, 1)")
        object.__setattr__(self, "members", tuple(self.members))
        for member in self.members:
            if member.dim != self.dim:
                raise ValueError("member dimension mismatch")
        mat = self.matrix
        if len(self.members) > 1:
            gram = np.abs(mat @ mat.T)
            np.fill_diagonal(gram, 0.0)
            worst = float(gram.max())
            if worst > self.ortho_threshold:
                raise ValueError(
                    f"member pair with |cos| {worst:.4f} exceeds "
                    f"threshold {self.ortho_threshold}")

    @cached_property
    def matrix(self) -> np.ndarray:
        """Members stacked as rows, shape (len(members), dim)."""
        if not self.members:
            mat = np.zeros((0, self.dim))
        else:
            mat = np.array([m.direction for m in self.members])
        mat.setflags(write=False)
        return mat

    @cached_property
    def fingerprint(self) -> str:
        """Content hash binding coordinates to this exact member set."""
        h = hashlib.sha256()
        h.update(b"style-basis:v1")
        h.update(struct.pack("<qdd", self.dim, self.ortho_threshold,
                             self.epsilon_fraction))
        for member in self.members:
            encoded = member.word.encode("utf-8")
            h.update(struct.pack("<q", len(encoded)))
            h.update(encoded)
            h.update(np.ascontiguousarray(member.direction,
                                          dtype="<f8").tobytes())
        return h.hexdigest()

    def append(self, sub: SubVector) -> "StyleBasis":
        """Return a new basis with ``sub`` appended at the next index.

        Raises ValueError if the new member would break near-orthogonality
        or has the wrong dimension.
        """
        if sub.dim != self.dim:
            raise ValueError("sub-vector dimension mismatch")
        if not is_orthogonal(sub.direction, self):
            raise ValueError(
                f"sub-vector {sub.word!r} is not near-orthogonal to the "
                f"existing members at threshold {self.ortho_threshold}")
        return dataclasses.replace(self, members=self.members + (sub,))


@dataclass(frozen=True)
class Coordinate:
    """Sparse coefficients over a specific basis; absent indices mean 0."""

    basis_fingerprint: str
    entries: dict[int, float]


@dataclass(frozen=True)
class DecompositionReport:
    """Outcome of decomposing one vector over a basis."""

    coordinate: Coordinate
    residual_norm: float
    epsilon_used: float
    satisfied: bool


def project_coefficient(v, member: SubVector) -> float:
    """Coefficient of ``v`` along one member: dot(v, m) / |m|."""
    vec = as_vector(v, dim=member.dim)
    return float(vec @ member.direction) / float(
        np.linalg.norm(member.direction))


def is_orthogonal(direction, basis: StyleBasis,
                  threshold: float | None = None) -> bool:
    """True when |cos| against every member is at most the threshold.

    Vacuously true on an empty basis.  The sign of the correlation is
    irrelevant; only its magnitude gates admission.
    """
    vec = as_vector(direction, dim=basis.dim)
    if not basis.members:
        return True
    if threshold is None:
        threshold = basis.ortho_threshold
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("zero-norm direction")
    member_norms = np.linalg.norm(basis.matrix, axis=1)
    cosines = np.abs(basis.matrix @ vec) / (member_norms * norm)
    return bool(np.all(cosines <= threshold))


def decompose(v, basis: StyleBasis) -> DecompositionReport:
    """One-shot projection of ``v`` onto every basis member.

    Each coefficient is an independent projection, not a joint solve;
    near-orthogonality keeps the reconstruction close to optimal.  The
    report is satisfied when the residual falls below
    ``epsilon_fraction * |v|`` (a zero vector counts as satisfied).
    """
    vec = as_vector(v, dim=basis.dim)
    norm_v = float(np.linalg.norm(vec))
    epsilon_used = basis.epsilon_fraction * norm_v
    if not basis.members:
        entries: dict[int, float] = {}
        residual_norm = norm_v
    else:
        mat = basis.matrix
        member_norms = np.linalg.norm(mat, axis=1)
        coeffs = (mat @ vec) / member_norms
        residual_norm = float(np.linalg.norm(vec - coeffs @ mat))
        entries = {i: float(z) for i, z in enumerate(coeffs)}
    satisfied = residual_norm < epsilon_used or residual_norm == 0.0
    coordinate = Coordinate(basis_fingerprint=basis.fingerprint,
                            entries=entries)
    return DecompositionReport(coordinate=coordinate,
                               residual_norm=residual_norm,
                               epsilon_used=epsilon_used,
                               satisfied=satisfied)


def extend_basis_for_model(
    v,
    basis: StyleBasis,
    candidates: Iterable[tuple[str, float]],
    word_to_vector: WordToVector,
    candidate_cap: int = DEFAULT_CANDIDATE_CAP,
) -> tuple[StyleBasis, DecompositionReport]:
    """Grow the basis until ``v`` decomposes within its epsilon budget.

    Candidates are consumed in stream order.  Each consumed word is
    converted through the callback and appended iff it stays
    near-orthogonal to every existing member; the decomposition is
    re-evaluated after each append and once before any consumption, so a
    vector already explained by the incoming basis consumes nothing.
    Stops at satisfaction, stream exhaustion, or the candidate cap.
    """
    vec = as_vector(v, dim=basis.dim)
    report = decompose(vec, basis)
    stream: Iterator[tuple[str, float]] = iter(candidates)
    consumed = 0
    while not report.satisfied and consumed < candidate_cap:
        try:
            word, probability = next(stream)
        except StopIteration:
            break
        consumed += 1
        sub = word_to_vector(word)
        if sub.dim != basis.dim:
            raise ValueError("callback returned a sub-vector of wrong "
                             "dimension")
        if is_orthogonal(sub.direction, basis):
            stamped = dataclasses.replace(sub,
                                          source_probability=float(probability))
            basis = basis.append(stamped)
            report = decompose(vec, basis)
    return basis, report


def build_common_basis(
    models: Iterable[tuple[str, np.ndarray, Iterable[tuple[str, float]]]],
    word_to_vector: WordToVector,
    *,
    dim: int,
    ortho_threshold: float = DEFAULT_ORTHO_THRESHOLD,
    epsilon_fraction: float = DEFAULT_EPSILON_FRACTION,
    candidate_cap: int = DEFAULT_CANDIDATE_CAP,
) -> tuple[StyleBasis, dict[str, DecompositionReport]]:
    """Fold basis growth over several models, sharing one member set.

    Models are processed in input order against the single growing basis,
    so later models reuse directions admitted for earlier ones.  Each
    model's report reflects the basis as of its own turn; callers that
    want coordinates over the final basis re-run :func:`decompose`.
    """
    basis = StyleBasis(dim=dim, ortho_threshold=ortho_threshold,
                       epsilon_fraction=epsilon_fraction)
    reports: dict[str, DecompositionReport] = {}
    for model_id, v, candidates in models:
        if model_id in reports:
            raise ValueError(f"duplicate model id {model_id!r}")
        basis, reports[model_id] = extend_basis_for_model(
            v, basis, candidates, word_to_vector, candidate_cap=candidate_cap)
    return basis, reports
