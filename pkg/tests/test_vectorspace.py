"""Tests for the style vector space: projection, decomposition, basis growth.

Expected values are either computed by hand (noted inline) or checked
against an independent dense least-squares oracle.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xpert.vectorspace import (
    Coordinate,
    StyleBasis,
    SubVector,
    build_common_basis,
    cosine_similarity,
    decompose,
    extend_basis_for_model,
    is_orthogonal,
    project_coefficient,
)


# ---------------------------------------------------------------------------
# oracles and helpers


def lstsq_residual(members: np.ndarray, v: np.ndarray) -> float:
    """Residual of the optimal dense least-squares fit; rows are members."""
    if members.size == 0:
        return float(np.linalg.norm(v))
    sol, *_ = np.linalg.lstsq(members.T, v, rcond=None)
    return float(np.linalg.norm(v - members.T @ sol))


def near_orthogonal_directions(rng: np.random.Generator, dim: int, count: int,
                               max_cos: float = 0.1) -> np.ndarray:
    """Unit rows with pairwise |cos| <= max_cos: perturbed orthonormal set."""
    assert count <= dim
    q, _ = np.linalg.qr(rng.normal(size=(dim, count)))
    dirs = q.T + 0.015 * rng.normal(size=(count, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    gram = np.abs(dirs @ dirs.T) - np.eye(count)
    assert gram.max() <= max_cos
    return dirs


def basis_from_rows(rows: np.ndarray, words: list[str] | None = None,
                    **kwargs) -> StyleBasis:
    words = words or [f"w{i}" for i in range(len(rows))]
    basis = StyleBasis(dim=rows.shape[1], **kwargs)
    for word, row in zip(words, rows):
        basis = basis.append(SubVector(word=word, direction=row))
    return basis


# ---------------------------------------------------------------------------
# cosine similarity


def test_cosine_hand_values():
    # by hand: cos([1,1],[1,0]) = 1/sqrt(2)
    assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(
        0.7071067811865475, abs=1e-15)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([2.0, 0.0], [5.0, 0.0]) == 1.0
    assert cosine_similarity([1.0, 0.0], [-3.0, 0.0]) == -1.0


def test_cosine_rejects_zero_and_mismatched():
    with pytest.raises(ValueError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        cosine_similarity([1.0], [1.0, 0.0])


def test_cosine_clipped_to_unit_interval():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = rng.normal(size=8)
        b = a * rng.uniform(0.5, 2.0)  # collinear, roundoff could push past 1
        assert -1.0 <= cosine_similarity(a, b) <= 1.0


# ---------------------------------------------------------------------------
# orthogonality gate


def test_is_orthogonal_hand_example():
    basis = basis_from_rows(np.array([[1.0, 0.0]]))
    # by hand: cos([1,0.05]/n, [1,0]) = 1/sqrt(1.0025) ~ 0.99875 > 0.1
    cand = np.array([1.0, 0.05])
    cand = cand / np.linalg.norm(cand)
    assert not is_orthogonal(cand, basis)
    assert is_orthogonal(np.array([0.0, 1.0]), basis)


def test_is_orthogonal_vacuous_on_empty():
    basis = StyleBasis(dim=3)
    assert is_orthogonal(np.array([1.0, 0.0, 0.0]), basis)


def test_is_orthogonal_inclusive_at_threshold():
    # cos exactly at the threshold passes ("at most")
    basis = basis_from_rows(np.array([[1.0, 0.0]]), ortho_threshold=0.1)
    c = np.array([0.1, math.sqrt(1 - 0.01)])  # cos vs e1 = 0.1 exactly
    assert is_orthogonal(c, basis)


def test_basis_append_enforces_near_orthogonality():
    basis = basis_from_rows(np.eye(2))
    bad = np.array([1.0, 0.05])
    bad = bad / np.linalg.norm(bad)
    with pytest.raises(ValueError):
        basis.append(SubVector(word="again", direction=bad))


def test_subvector_requires_unit_direction():
    with pytest.raises(ValueError):
        SubVector(word="loud", direction=np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        SubVector(word="", direction=np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        SubVector(word="loud", direction=np.array([1.0, 0.0]),
                  source_probability=0.0)


# ---------------------------------------------------------------------------
# decomposition


def test_decompose_exact_orthonormal_hand_case():
    # v = 3*e1 - 2*e2 + 0.5*e3 over basis {e1, e2} in dim 4.
    # by hand: z = (3, -2), residual = 0.5, eps = 0.2*sqrt(13.25)
    basis = basis_from_rows(np.eye(4)[:2])
    v = np.array([3.0, -2.0, 0.5, 0.0])
    rep = decompose(v, basis)
    assert rep.coordinate.entries == {0: 3.0, 1: -2.0}
    assert rep.residual_norm == 0.5
    assert rep.epsilon_used == pytest.approx(0.7280109889280518, abs=1e-15)
    assert rep.satisfied
    assert rep.coordinate.basis_fingerprint == basis.fingerprint


def test_decompose_empty_basis():
    basis = StyleBasis(dim=3)
    v = np.array([1.0, 2.0, 2.0])
    rep = decompose(v, basis)
    assert rep.coordinate.entries == {}
    assert rep.residual_norm == 3.0  # by hand: sqrt(1+4+4)
    assert not rep.satisfied


def test_decompose_zero_vector_is_satisfied():
    basis = basis_from_rows(np.eye(2))
    rep = decompose(np.zeros(2), basis)
    assert rep.residual_norm == 0.0
    assert rep.epsilon_used == 0.0
    assert rep.satisfied
    assert set(rep.coordinate.entries.values()) <= {0.0}


def test_decompose_matches_lstsq_on_orthonormal():
    rng = np.random.default_rng(11)
    for _ in range(50):
        dim = int(rng.integers(4, 24))
        k = int(rng.integers(1, dim + 1))
        q, _ = np.linalg.qr(rng.normal(size=(dim, k)))
        rows = q.T
        basis = basis_from_rows(rows)
        v = rng.normal(size=dim)
        rep = decompose(v, basis)
        sol, *_ = np.linalg.lstsq(rows.T, v, rcond=None)
        got = np.array([rep.coordinate.entries[i] for i in range(k)])
        assert np.max(np.abs(got - sol)) < 1e-9
        assert abs(rep.residual_norm - lstsq_residual(rows, v)) < 1e-9


def test_decompose_residual_close_to_lstsq_near_orthogonal():
    # one-shot projection is approximate under near-orthogonality;
    # it must stay within +10% of the optimal residual on these worlds
    rng = np.random.default_rng(23)
    for _ in range(50):
        dim = 32
        k = int(rng.integers(2, 9))
        rows = near_orthogonal_directions(rng, dim, k)
        basis = basis_from_rows(rows)
        v = rng.normal(size=dim)
        rep = decompose(v, basis)
        best = lstsq_residual(rows, v)
        assert best <= rep.residual_norm + 1e-12
        assert rep.residual_norm <= 1.10 * best


def test_decompose_scale_covariance_power_of_two_exact():
    rng = np.random.default_rng(3)
    rows = near_orthogonal_directions(rng, 16, 5)
    basis = basis_from_rows(rows)
    v = rng.normal(size=16)
    rep1 = decompose(v, basis)
    rep2 = decompose(2.0 * v, basis)
    for i, z in rep1.coordinate.entries.items():
        assert rep2.coordinate.entries[i] == 2.0 * z
    assert rep2.residual_norm == 2.0 * rep1.residual_norm
    assert rep2.satisfied == rep1.satisfied


def test_project_coefficient_is_plain_dot_for_unit_members():
    member = SubVector(word="curt", direction=np.array([0.0, 1.0, 0.0]))
    assert project_coefficient(np.array([4.0, -2.5, 1.0]), member) == -2.5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_bound_property(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(2, 24))
    k = int(rng.integers(1, min(dim, 8) + 1))
    q, _ = np.linalg.qr(rng.normal(size=(dim, k)))
    basis = basis_from_rows(q.T)
    v = rng.normal(size=dim) * rng.uniform(0.1, 10)
    rep = decompose(v, basis)
    bound = np.linalg.norm(v) * (1 + 1e-12)
    assert all(abs(z) <= bound for z in rep.coordinate.entries.values())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.25, 8.0))
def test_scale_covariance_property(seed, scale):
    rng = np.random.default_rng(seed)
    rows = near_orthogonal_directions(rng, 12, 4)
    basis = basis_from_rows(rows)
    v = rng.normal(size=12)
    rep1 = decompose(v, basis)
    rep2 = decompose(scale * v, basis)
    for i, z in rep1.coordinate.entries.items():
        assert rep2.coordinate.entries[i] == pytest.approx(scale * z, rel=1e-12,
                                                           abs=1e-12)
    assert rep2.residual_norm == pytest.approx(scale * rep1.residual_norm,
                                               rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# basis extension (sequential candidate consumption)


def make_callback(lookup: dict[str, np.ndarray]):
    calls: list[str] = []

    def word_to_vector(word: str) -> SubVector:
        calls.append(word)
        return SubVector(word=word, direction=lookup[word])

    return word_to_vector, calls


def test_extend_zero_candidates_when_already_satisfied():
    basis = basis_from_rows(np.eye(4)[:2], words=["warm", "curt"])
    v = np.array([1.0, -0.5, 0.0, 0.0])  # fully explained already
    callback, calls = make_callback({})
    new_basis, rep = extend_basis_for_model(
        v, basis, iter([("loud", 0.9)]), callback)
    assert calls == []
    assert new_basis.fingerprint == basis.fingerprint
    assert rep.satisfied


def test_extend_appends_until_satisfied():
    e = np.eye(4)
    lookup = {"warm": e[0], "curt": e[1], "loud": e[2]}
    callback, calls = make_callback(lookup)
    v = np.array([2.0, 1.0, 0.0, 0.05])
    basis = StyleBasis(dim=4)
    new_basis, rep = extend_basis_for_model(
        v, basis, iter([("warm", 0.8), ("curt", 0.15), ("loud", 0.05)]),
        callback)
    # after warm: residual = sqrt(1 + 0.0025) > 0.2*|v|; after curt: 0.05 < eps
    assert calls == ["warm", "curt"]
    assert [m.word for m in new_basis.members] == ["warm", "curt"]
    assert [m.source_probability for m in new_basis.members] == [0.8, 0.15]
    assert rep.satisfied


def test_extend_rejects_near_parallel_synonym():
    e = np.eye(8)
    official = 0.95 * e[0] + math.sqrt(1 - 0.95**2) * e[1]
    lookup = {"formal": e[0], "official": official, "warm": e[2]}
    callback, calls = make_callback(lookup)
    v = e[0] + 0.8 * e[2]
    new_basis, rep = extend_basis_for_model(
        v, StyleBasis(dim=8),
        iter([("formal", 0.9), ("official", 0.5), ("warm", 0.3)]), callback)
    # cos(formal, official) = 0.95 > 0.1: rejected, basis keeps growing past it
    assert calls == ["formal", "official", "warm"]
    assert [m.word for m in new_basis.members] == ["formal", "warm"]
    assert rep.satisfied


def test_extend_honors_candidate_cap():
    e = np.eye(6)
    lookup = {f"w{i}": e[i] for i in range(6)}
    callback, calls = make_callback(lookup)
    v = np.ones(6)
    stream = iter([(f"w{i}", 0.5) for i in range(6)])
    new_basis, rep = extend_basis_for_model(
        v, StyleBasis(dim=6), stream, callback, candidate_cap=2)
    assert calls == ["w0", "w1"]
    assert not rep.satisfied
    assert len(new_basis.members) == 2


def test_extend_propagates_callback_failure():
    def boom(word):
        raise RuntimeError("degenerate word")

    with pytest.raises(RuntimeError):
        extend_basis_for_model(np.ones(3), StyleBasis(dim=3),
                               iter([("bad", 0.5)]), boom)


def test_extend_residual_monotone_across_appends():
    rng = np.random.default_rng(41)
    for _ in range(20):
        dim = 24
        rows = near_orthogonal_directions(rng, dim, 8)
        lookup = {f"w{i}": rows[i] for i in range(8)}
        callback, _ = make_callback(lookup)
        v = rng.normal(size=dim)
        stream = iter([(f"w{i}", 0.5) for i in range(8)])
        new_basis, _ = extend_basis_for_model(v, StyleBasis(dim=dim), stream,
                                              callback)
        # replay: residual after each appended prefix must not grow beyond
        # the near-orthogonality slack
        slack = 0.2 * float(np.linalg.norm(v))
        prev = float(np.linalg.norm(v))
        for k in range(1, len(new_basis.members) + 1):
            prefix = basis_from_rows(
                np.array([m.direction for m in new_basis.members[:k]]))
            res = decompose(v, prefix).residual_norm
            assert res <= prev + slack
            prev = res


def test_extend_residual_monotone_exact_orthonormal():
    rng = np.random.default_rng(43)
    dim = 16
    q, _ = np.linalg.qr(rng.normal(size=(dim, 6)))
    rows = q.T
    lookup = {f"w{i}": rows[i] for i in range(6)}
    callback, _ = make_callback(lookup)
    v = rng.normal(size=dim)
    stream = iter([(f"w{i}", 0.5) for i in range(6)])
    basis, _ = extend_basis_for_model(v, StyleBasis(dim=dim), stream, callback)
    prev = float(np.linalg.norm(v))
    for k in range(1, len(basis.members) + 1):
        prefix = basis_from_rows(np.array([m.direction
                                           for m in basis.members[:k]]))
        res = decompose(v, prefix).residual_norm
        assert res <= prev + 1e-9
        prev = res


# ---------------------------------------------------------------------------
# shared basis across models


def test_build_common_basis_deterministic_and_shared():
    rng = np.random.default_rng(5)
    dim = 16
    q, _ = np.linalg.qr(rng.normal(size=(dim, 6)))
    rows = q.T
    lookup = {f"w{i}": rows[i] for i in range(6)}
    models = []
    for j in range(3):
        v = rows[2 * j] * 2.0 + rows[2 * j + 1] * 0.5
        cands = [(f"w{2 * j}", 0.9), (f"w{2 * j + 1}", 0.4), ("w0", 0.1)]
        models.append((f"m{j}", v, cands))

    def run():
        callback, _ = make_callback(lookup)
        return build_common_basis(models, callback, dim=dim)

    basis1, reports1 = run()
    basis2, reports2 = run()
    assert basis1.fingerprint == basis2.fingerprint
    assert [m.word for m in basis1.members] == ["w0", "w1", "w2", "w3", "w4",
                                                "w5"]
    for mid in reports1:
        assert reports1[mid].coordinate.entries == reports2[
            mid].coordinate.entries
        assert reports1[mid].satisfied


def test_build_common_basis_member_count_tracks_style_count():
    rng = np.random.default_rng(9)
    for styles in (3, 5, 8):
        dim = 32
        q, _ = np.linalg.qr(rng.normal(size=(dim, styles)))
        rows = q.T
        lookup = {f"s{i}": rows[i] for i in range(styles)}
        models = [(f"m{i}", rows[i] * 1.5, [(f"s{j}", 0.5)
                                            for j in range(styles)])
                  for i in range(styles)]
        callback, _ = make_callback(lookup)
        basis, reports = build_common_basis(models, callback, dim=dim)
        assert len(basis.members) == styles
        assert all(r.satisfied for r in reports.values())


def test_build_common_basis_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        build_common_basis(
            [("m0", np.ones(2), []), ("m0", np.ones(2), [])],
            lambda w: None, dim=2)


# ---------------------------------------------------------------------------
# fingerprints and value semantics


def test_fingerprint_changes_with_members():
    basis = StyleBasis(dim=3)
    grown = basis.append(SubVector(word="dry", direction=np.eye(3)[0]))
    assert basis.fingerprint != grown.fingerprint
    again = StyleBasis(dim=3).append(SubVector(word="dry",
                                               direction=np.eye(3)[0]))
    assert grown.fingerprint == again.fingerprint


def test_fingerprint_sensitive_to_direction_bits():
    d = np.eye(3)[0]
    b1 = StyleBasis(dim=3).append(SubVector(word="dry", direction=d))
    d2 = d.copy()
    d2[1] = 1e-12  # still unit within tolerance, different bits
    b2 = StyleBasis(dim=3).append(SubVector(word="dry", direction=d2))
    assert b1.fingerprint != b2.fingerprint


def test_coordinate_is_plain_value():
    c = Coordinate(basis_fingerprint="abc", entries={0: 1.0, 3: -2.0})
    assert c == Coordinate(basis_fingerprint="abc", entries={0: 1.0, 3: -2.0})
    assert c.entries[3] == -2.0
