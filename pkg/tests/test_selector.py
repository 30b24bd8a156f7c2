"""Device-side selection: profiles, distance ranking, merge planning,
layer streaming, and verified artifact download.
"""

import hashlib
import math
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from xpert.probe import PromptSet
from xpert.registry import ManifestModel, RegistryManifest
from xpert.selector import (
    BudgetError,
    LocalProfile,
    MergePlan,
    SelectionResult,
    compute_local_profile,
    coordinate_distance,
    default_tau,
    download_and_verify,
    find_merge_set,
    load_profile,
    plan_layer_schedule,
    save_profile,
    select_best,
)
from xpert.simharness import StubServer, generate_world, stub_backend
from xpert.vectorspace import Coordinate, StyleBasis, SubVector

DIM = 8


def axis_basis(dim=DIM, n_members=None) -> StyleBasis:
    n_members = dim if n_members is None else n_members
    members = tuple(
        SubVector(word=f"word{i:02d}", direction=np.eye(dim)[i])
        for i in range(n_members))
    return StyleBasis(dim=dim, members=members)


def make_manifest(coords: dict[str, dict[int, float]],
                  basis: StyleBasis | None = None,
                  version: int = 1) -> RegistryManifest:
    basis = basis or axis_basis()
    models = tuple(
        ManifestModel(model_id=model_id, display_name=model_id,
                      artifact_uri=f"/models/{model_id}/artifact",
                      artifact_bytes=0, artifact_sha256="",
                      coordinate=None if entries is None else Coordinate(
                          basis_fingerprint=basis.fingerprint,
                          entries=dict(entries)))
        for model_id, entries in coords.items())
    return RegistryManifest(version=version, summarizer_fingerprint="stub",
                            instruction_template_hash="tmpl",
                            embedding_dim=basis.dim,
                            ortho_threshold=basis.ortho_threshold,
                            epsilon_fraction=basis.epsilon_fraction,
                            basis=basis, models=models)


def make_profile(entries: dict[int, float],
                 basis: StyleBasis | None = None) -> LocalProfile:
    basis = basis or axis_basis()
    return LocalProfile(
        coordinate=Coordinate(basis_fingerprint=basis.fingerprint,
                              entries=dict(entries)),
        sample_count=4, prompt_set_id="ps-test")


def oracle_distance(a: dict[int, float], b: dict[int, float],
                    metric: str) -> float:
    keys = set(a) | set(b)
    gaps = [a.get(k, 0.0) - b.get(k, 0.0) for k in keys]
    if metric == "l1":
        return sum(abs(g) for g in gaps)
    return math.sqrt(sum(g * g for g in gaps))


# ---------------------------------------------------------------------------
# profiles


def test_profile_validation_and_round_trip(tmp_path):
    profile = make_profile({0: 1.25, 3: -0.5})
    path = tmp_path / "profile.json"
    save_profile(profile, path)
    loaded = load_profile(path)
    assert loaded == profile
    with pytest.raises(ValueError):
        LocalProfile(coordinate=profile.coordinate, sample_count=0,
                     prompt_set_id="x")
    with pytest.raises(ValueError):
        LocalProfile(coordinate=Coordinate("fp", {0: float("nan")}),
                     sample_count=1, prompt_set_id="x")


def local_world(personality):
    world = generate_world(seed=11, n_styles=4, dim=DIM)
    server = StubServer(world)
    backend = stub_backend(world, server=server)
    base_gen = stub_backend(world, server=server)
    basis = StyleBasis(dim=DIM, members=tuple(
        SubVector(word=w, direction=world.styles[w]) for w in world.words))
    prompts = PromptSet.from_texts(("p one", "p two", "p three", "p four"))
    texts = None
    if personality is not None:
        styled = stub_backend(world, style_word=personality, server=server)
        texts = [styled.generate([p])[0] for p in prompts.prompts]
    return world, backend, base_gen, basis, prompts, texts


def test_local_profile_of_base_responses_is_zero():
    world, backend, base_gen, basis, prompts, _ = local_world(None)
    texts = [base_gen.generate([p])[0] for p in prompts.prompts]
    profile = compute_local_profile(backend, base_gen, texts, prompts, basis)
    assert set(profile.coordinate.entries.values()) == {0.0}
    assert profile.sample_count == len(prompts)
    assert profile.prompt_set_id == prompts.prompt_set_id


def test_local_profile_concentrates_on_the_planted_style():
    world, backend, base_gen, basis, prompts, texts = local_world("poetic")
    profile = compute_local_profile(backend, base_gen, texts, prompts, basis)
    entries = profile.coordinate.entries
    mass = sum(abs(v) for v in entries.values())
    poetic_index = world.words.index("poetic")
    assert mass > 0
    assert abs(entries[poetic_index]) / mass >= 0.90


def test_local_profile_splits_mass_for_even_mixtures():
    world, backend, base_gen, basis, prompts, texts = local_world(
        "formal:0.5,poetic:0.5")
    profile = compute_local_profile(backend, base_gen, texts, prompts, basis)
    entries = profile.coordinate.entries
    mass = sum(abs(v) for v in entries.values())
    share_formal = abs(entries[world.words.index("formal")]) / mass
    share_poetic = abs(entries[world.words.index("poetic")]) / mass
    assert abs(share_formal - 0.5) <= 0.10
    assert abs(share_poetic - 0.5) <= 0.10


def test_local_profile_call_volume_depends_only_on_prompts():
    _, backend, base_gen, basis, prompts, texts = local_world("poetic")
    compute_local_profile(backend, base_gen, texts, prompts, basis)
    assert base_gen.call_counts["generate"] == len(prompts)
    assert backend.call_counts["shift_embed"] == 1


def test_local_profile_input_validation():
    _, backend, base_gen, basis, prompts, texts = local_world("poetic")
    with pytest.raises(ValueError):
        compute_local_profile(backend, base_gen, [], prompts, basis)
    with pytest.raises(ValueError, match="counts must match"):
        compute_local_profile(backend, base_gen, texts[:-1], prompts, basis)


# ---------------------------------------------------------------------------
# distances and selection


def test_coordinate_distance_hand_values():
    basis = axis_basis()
    a = Coordinate(basis.fingerprint, {0: 1.0})
    b = Coordinate(basis.fingerprint, {1: 1.0})
    assert coordinate_distance(a, b, "l1") == 2.0
    assert coordinate_distance(a, b, "l2") == pytest.approx(math.sqrt(2.0))
    assert coordinate_distance(a, a, "l1") == 0.0
    with pytest.raises(ValueError, match="fingerprint"):
        coordinate_distance(a, Coordinate("other", {0: 1.0}))
    with pytest.raises(ValueError, match="metric"):
        coordinate_distance(a, b, "cosine")


def test_select_best_hand_example():
    manifest = make_manifest({"A": {0: 1.0}, "B": {1: 1.0}})
    profile = make_profile({0: 1.0})
    result = select_best(profile, manifest, "l1")
    assert result.model_id == "A"
    assert result.distance == 0.0
    assert result.ranking == (("A", 0.0), ("B", 2.0))
    result2 = select_best(profile, manifest, "l2")
    assert result2.ranking[1] == ("B", pytest.approx(math.sqrt(2.0)))


def test_select_best_breaks_ties_lexicographically():
    manifest = make_manifest({"mB": {0: 1.0}, "mA": {0: 1.0}})
    result = select_best(make_profile({0: 2.0}), manifest)
    assert result.model_id == "mA"
    assert [m for m, _ in result.ranking] == ["mA", "mB"]


def test_select_best_errors():
    profile = make_profile({0: 1.0})
    with pytest.raises(ValueError, match="no explained"):
        select_best(profile, make_manifest({}))
    with pytest.raises(ValueError, match="no explained"):
        select_best(profile, make_manifest({"A": None}))
    other_basis = axis_basis(dim=DIM, n_members=3)
    foreign = make_manifest({"A": {0: 1.0}}, basis=other_basis)
    with pytest.raises(ValueError, match="fingerprint"):
        select_best(profile, foreign)


def test_select_best_matches_brute_force_oracle():
    rng = np.random.default_rng(21)
    basis = axis_basis()
    for trial in range(250):
        metric = "l1" if trial % 2 == 0 else "l2"
        n_models = int(rng.integers(1, 9))
        coords = {}
        for m in range(n_models):
            support = rng.choice(DIM, size=rng.integers(1, 5), replace=False)
            coords[f"m{m:02d}"] = {int(i): float(rng.normal())
                                   for i in support}
        profile_entries = {int(i): float(rng.normal())
                           for i in rng.choice(DIM, size=3, replace=False)}
        manifest = make_manifest(coords, basis=basis)
        profile = make_profile(profile_entries, basis=basis)
        result = select_best(profile, manifest, metric)
        expected = sorted(
            ((oracle_distance(profile_entries, c, metric), mid)
             for mid, c in coords.items()))
        assert [m for _, m in expected] == [m for m, _ in result.ranking], \
            f"trial {trial}"
        for (d_exp, _), (_, d_got) in zip(expected, result.ranking):
            assert d_got == pytest.approx(d_exp, abs=1e-12)


def test_selection_is_invariant_under_common_positive_scaling():
    rng = np.random.default_rng(22)
    basis = axis_basis()
    coords = {f"m{m}": {int(i): float(rng.normal()) for i in range(4)}
              for m in range(6)}
    profile_entries = {i: float(rng.normal()) for i in range(4)}
    for scale in (0.001, 1.0, 3.7, 1000.0):
        manifest = make_manifest(
            {mid: {i: scale * v for i, v in c.items()}
             for mid, c in coords.items()}, basis=basis)
        profile = make_profile(
            {i: scale * v for i, v in profile_entries.items()}, basis=basis)
        ranking_ids = [m for m, _ in select_best(profile, manifest).ranking]
        if scale == 0.001:
            reference = ranking_ids
        assert ranking_ids == reference


# ---------------------------------------------------------------------------
# merge planning


def test_exact_match_yields_singleton_plan():
    manifest = make_manifest({"A": {0: 1.0, 2: 0.5}, "B": {1: 1.0}})
    profile = make_profile({0: 1.0, 2: 0.5})
    plan = find_merge_set(profile, manifest, tau=0.01)
    assert plan.feasible
    assert plan.members == (("A", 1.0),)
    assert plan.achieved_distance == 0.0
    assert plan.threshold_tau == 0.01


def test_disjoint_pair_recovers_half_half_alphas():
    manifest = make_manifest({"A": {0: 1.0}, "B": {1: 1.0}})
    profile = make_profile({0: 0.5, 1: 0.5})
    for metric in ("l1", "l2"):
        plan = find_merge_set(profile, manifest, tau=0.01, metric=metric)
        assert plan.feasible
        assert [m for m, _ in plan.members] == ["A", "B"]
        for _, alpha in plan.members:
            assert alpha == pytest.approx(0.5, abs=1e-3)
        assert plan.achieved_distance < 0.01


def test_infeasible_search_returns_best_attempt():
    manifest = make_manifest({"A": {0: 1.0}, "B": {1: 1.0}})
    profile = make_profile({2: 4.0})  # unreachable axis
    plan = find_merge_set(profile, manifest, tau=1e-6)
    assert not plan.feasible
    assert plan.achieved_distance >= 1e-6
    assert 1 <= len(plan.members) <= 2
    with pytest.raises(ValueError):
        MergePlan(members=(("A", 1.0),), achieved_distance=5.0,
                  threshold_tau=0.1, feasible=True)


def test_k_max_one_stops_at_singleton():
    manifest = make_manifest({"A": {0: 1.0}, "B": {1: 1.0}})
    profile = make_profile({0: 0.5, 1: 0.5})
    plan = find_merge_set(profile, manifest, tau=0.01, k_max=1)
    assert not plan.feasible
    assert len(plan.members) == 1


def test_default_tau_tracks_profile_mass():
    profile = make_profile({0: 3.0, 1: -1.0})
    assert default_tau(profile) == pytest.approx(0.25 * 4.0)
    empty = make_profile({0: 0.0})
    assert default_tau(empty) == pytest.approx(0.25 * 1e-9)


def test_merge_tie_breaks_on_lexicographic_member_ids():
    # four clones at equal distance: every pair achieves the same optimum
    manifest = make_manifest({
        "mD": {0: 1.0}, "mC": {0: 1.0}, "mB": {0: 1.0}, "mA": {0: 1.0}})
    profile = make_profile({0: 1.0, 1: 2.0})
    plan = find_merge_set(profile, manifest, tau=1e-9)
    assert not plan.feasible
    assert [m for m, _ in plan.members] in (["mA"], ["mA", "mB"])


def grid_optimum(matrix: np.ndarray, goal: np.ndarray, metric: str,
                 resolution: float = 1e-3, upper: float = 2.0):
    """Exhaustive alpha grid search for k=2, blockwise vectorized."""
    steps = np.arange(0.0, upper + resolution / 2, resolution)
    best_value = np.inf
    best_alphas = (0.0, 0.0)
    for block_start in range(0, len(steps), 200):
        a0 = steps[block_start:block_start + 200]
        gaps = (a0[:, None, None] * matrix[:, 0]
                + steps[None, :, None] * matrix[:, 1] - goal)
        if metric == "l1":
            values = np.abs(gaps).sum(axis=2)
        else:
            values = np.sqrt((gaps ** 2).sum(axis=2))
        index = np.unravel_index(np.argmin(values), values.shape)
        if values[index] < best_value:
            best_value = float(values[index])
            best_alphas = (float(a0[index[0]]), float(steps[index[1]]))
    return best_value, best_alphas


def test_pair_solver_matches_exhaustive_grid_oracle():
    rng = np.random.default_rng(23)
    basis = axis_basis()
    for trial in range(12):
        metric = "l1" if trial % 2 == 0 else "l2"
        support_a = [0, 1]
        support_b = [2, 3]
        coeffs_a = {i: float(rng.uniform(0.3, 1.0)) for i in support_a}
        coeffs_b = {i: float(rng.uniform(0.3, 1.0)) for i in support_b}
        true_alpha = rng.uniform(0.2, 1.4, size=2)
        profile_entries = {
            i: true_alpha[0] * coeffs_a.get(i, 0.0)
            + true_alpha[1] * coeffs_b.get(i, 0.0)
            + float(rng.normal(scale=0.02))
            for i in range(4)}
        manifest = make_manifest({"A": coeffs_a, "B": coeffs_b}, basis=basis)
        profile = make_profile(profile_entries, basis=basis)
        plan = find_merge_set(profile, manifest, tau=1e-12, metric=metric)
        matrix = np.zeros((4, 2))
        for i, v in coeffs_a.items():
            matrix[i, 0] = v
        for i, v in coeffs_b.items():
            matrix[i, 1] = v
        goal = np.array([profile_entries[i] for i in range(4)])
        grid_value, grid_alphas = grid_optimum(matrix, goal, metric)
        solver_alphas = dict(plan.members)
        assert plan.achieved_distance <= grid_value + 1e-12, f"trial {trial}"
        assert abs(plan.achieved_distance - grid_value) <= 1e-3
        assert abs(solver_alphas.get("A", 0.0) - grid_alphas[0]) <= 1e-3
        assert abs(solver_alphas.get("B", 0.0) - grid_alphas[1]) <= 1e-3


# ---------------------------------------------------------------------------
# layer streaming


def replay_schedule(schedule, sizes, working_bytes):
    resident = {}
    loads = Counter()
    infers = Counter()
    infer_sequence = []
    peak = 0
    for step in schedule.steps:
        if step.action == "load":
            assert step.layer_index not in resident, "double load"
            resident[step.layer_index] = sizes[step.layer_index]
            loads[step.layer_index] += 1
        elif step.action == "infer":
            assert step.layer_index in resident, "infer of absent layer"
            infers[step.layer_index] += 1
            infer_sequence.append(step.layer_index)
        elif step.action == "evict":
            assert step.layer_index in resident, "evict of absent layer"
            del resident[step.layer_index]
        else:
            raise AssertionError(f"unknown action {step.action}")
        peak = max(peak, sum(resident.values()) + working_bytes)
    assert loads == Counter({i: 1 for i in range(len(sizes))})
    assert infers == Counter({i: 1 for i in range(len(sizes))})
    assert infer_sequence == sorted(infer_sequence)
    return peak


def test_schedule_spec_examples():
    roomy = plan_layer_schedule([1, 1, 1, 1], 0, 4)
    assert all(step.action != "evict" for step in roomy.steps)
    assert roomy.peak_resident_bytes == 4
    tight = plan_layer_schedule([3, 3, 3, 3], 1, 4)
    assert tight.peak_resident_bytes == 4
    evictions = [s for s in tight.steps if s.action == "evict"]
    assert len(evictions) == 3  # each load after the first forces one


def test_schedule_random_instances_hold_invariants():
    rng = np.random.default_rng(24)
    for trial in range(500):
        n_layers = int(rng.integers(1, 12))
        sizes = [int(rng.integers(1, 64)) for _ in range(n_layers)]
        working = int(rng.integers(0, 16))
        minimal = max(sizes) + working
        headroom = int(rng.integers(0, 128))
        schedule = plan_layer_schedule(sizes, working, minimal + headroom)
        peak = replay_schedule(schedule, sizes, working)
        assert peak == schedule.peak_resident_bytes
        assert schedule.peak_resident_bytes <= minimal + headroom
        with pytest.raises(BudgetError) as excinfo:
            plan_layer_schedule(sizes, working, minimal - 1)
        assert excinfo.value.minimal_budget == minimal


def test_schedule_input_validation():
    with pytest.raises(ValueError):
        plan_layer_schedule([], 0, 10)
    with pytest.raises(ValueError):
        plan_layer_schedule([0, 1], 0, 10)
    with pytest.raises(ValueError):
        plan_layer_schedule([1], -1, 10)


# ---------------------------------------------------------------------------
# artifact download


class _ArtifactHandler(BaseHTTPRequestHandler):
    def log_message(self, *_args):
        pass

    def do_GET(self):
        server = self.server
        header = self.headers.get("Range")
        server.request_log.append(header)
        start = 0
        status = 200
        if header:
            start = int(header.removeprefix("bytes=").split("-")[0])
            status = 206
        body = server.blob[start:]
        self.send_response(status)
        self.send_header("Content-Length", str(len(body)))
        if status == 206:
            total = len(server.blob)
            self.send_header("Content-Range",
                             f"bytes {start}-{total - 1}/{total}")
        self.end_headers()
        if server.fail_after is not None:
            cut = server.fail_after
            server.fail_after = None
            self.wfile.write(body[:cut])
            self.wfile.flush()
            self.connection.close()
            return
        self.wfile.write(body)


@pytest.fixture
def artifact_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ArtifactHandler)
    server.blob = bytes(range(256)) * 40  # 10240 bytes
    server.fail_after = None
    server.request_log = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()


def entry_for(server, sha=None) -> ManifestModel:
    blob = server.blob
    return ManifestModel(
        model_id="m0", display_name="m0",
        artifact_uri=f"http://127.0.0.1:{server.server_address[1]}/artifact",
        artifact_bytes=len(blob),
        artifact_sha256=sha or hashlib.sha256(blob).hexdigest(),
        coordinate=None)


def test_download_happy_path(tmp_path, artifact_server):
    destination = tmp_path / "model.bin"
    result = download_and_verify(entry_for(artifact_server), destination)
    assert result == destination
    assert destination.read_bytes() == artifact_server.blob
    assert artifact_server.request_log == [None]


def test_download_resumes_with_byte_range(tmp_path, artifact_server):
    artifact_server.fail_after = 1000
    destination = tmp_path / "model.bin"
    download_and_verify(entry_for(artifact_server), destination)
    assert destination.read_bytes() == artifact_server.blob
    log = artifact_server.request_log
    assert log[0] is None
    assert any(h is not None and h.startswith("bytes=") for h in log[1:])


def test_download_detects_tampering(tmp_path, artifact_server):
    bad = entry_for(artifact_server, sha="0" * 64)
    with pytest.raises(IOError, match="hash mismatch"):
        download_and_verify(bad, tmp_path / "model.bin")


def test_download_gives_up_after_max_attempts(tmp_path, artifact_server):
    entry = entry_for(artifact_server)
    oversize = ManifestModel(
        model_id=entry.model_id, display_name=entry.display_name,
        artifact_uri=entry.artifact_uri,
        artifact_bytes=entry.artifact_bytes + 1,
        artifact_sha256=entry.artifact_sha256, coordinate=None)
    with pytest.raises(IOError, match="gave up"):
        download_and_verify(oversize, tmp_path / "model.bin", max_attempts=2)
