import warnings

import numpy as np
import pytest

from _instances import random_inputs
from crisloc.detect import rp_history_map
from crisloc.locate import MatchDatabase, as_database, wknn
from crisloc.model import CrislocError, Fingerprint
from crisloc.reconstruct import (NoAdmissibleSubspace, TransferInputs, TransferMatrices,
                                 TransferParams, build_matrices, generalized_eigh, load_map_any,
                                 mmd_matrix, neighbor_ratio_ok, normalize_feasible, objective,
                                 reconstruct_map, save_reconstructed, solve_transform)

LOOSE = TransferParams(alpha=1e6)


def test_matrices_symmetric_psd():
    mat = build_matrices(random_inputs(0))
    for a in (mat.XMXt, mat.P_s, mat.Q_s, mat.D_N, mat.F_N):
        assert np.linalg.norm(a - a.T) <= 1e-10 * np.linalg.norm(a)
        assert np.linalg.eigvalsh(a).min() >= -1e-9 * np.abs(a).max()


def test_mmd_trace_two_forms(rng):
    inp = random_inputs(1)
    mat = build_matrices(inp)
    A = rng.normal(size=(inp.m, 3))
    direct, explicit = 0.0, 0.0
    for i, xt in inp.target.items():
        xs = inp.source[i]
        d = A.T @ xs.mean(axis=0) - A.T @ xt.mean(axis=0)
        direct += d @ d
        X = np.vstack([xs, xt]).T
        explicit += np.trace(A.T @ X @ mmd_matrix(len(xs), len(xt)) @ X.T @ A)
    got = np.trace(A.T @ mat.XMXt @ A)
    assert got == pytest.approx(direct, rel=1e-8)
    assert got == pytest.approx(explicit, rel=1e-8)


def test_scatter_decomposition(rng):
    inp = random_inputs(2)
    mat = build_matrices(inp)
    A = rng.normal(size=(inp.m, 4))
    allx = np.vstack(inp.source)
    c = (allx - allx.mean(axis=0)) @ A
    s_g = np.sum(c * c)
    assert np.trace(A.T @ (mat.P_s + mat.Q_s) @ A) == pytest.approx(s_g, rel=1e-8)


def test_single_class_has_zero_between_scatter(rng):
    src = (rng.normal(size=(6, 5)),)
    inp = TransferInputs(src, {0: rng.normal(size=(4, 5))}, (np.array([], int),),
                         TransferParams(subdim=1))
    mat = build_matrices(inp)
    assert np.all(mat.Q_s == 0)
    with pytest.raises(CrislocError, match="rank 0"):
        solve_transform(mat, inp.params)


def test_generalized_eigh_residuals():
    mat = build_matrices(random_inputs(3))
    B = mat.B(1.0, 0.1)
    z, a = generalized_eigh(mat.Q_s, B)
    assert np.all(np.diff(z) <= 1e-12)
    res = mat.Q_s @ a - B @ a * z
    assert np.abs(res).max() <= 1e-8 * np.linalg.norm(mat.Q_s)
    assert np.allclose(a.T @ B @ a, np.eye(len(z)), atol=1e-8)


def test_eigenvalues_all_one_when_q_equals_b(rng):
    X = rng.normal(size=(6, 6))
    B = X @ X.T + np.eye(6)
    z, _ = generalized_eigh(B, B)
    assert np.allclose(z, 1.0)


def test_stationarity_and_normalization():
    inp = random_inputs(4)
    mat = build_matrices(inp)
    tm = solve_transform(mat, LOOSE)
    B = mat.B(LOOSE.mu, LOOSE.lam)
    Z = np.diag(1.0 / tm.eigenvalues)
    assert np.abs(B @ tm.A - mat.Q_s @ tm.A @ Z).max() <= 1e-6
    assert np.allclose(np.diag(tm.A.T @ mat.Q_s @ tm.A), 1.0)


def test_vacuous_alpha_takes_top_eigenvectors():
    inp = random_inputs(5)
    tm = solve_transform(build_matrices(inp), LOOSE)
    assert list(tm.indices) == list(range(LOOSE.dim(inp.m)))


def test_greedy_selection_respects_neighbor_inequality():
    mat = build_matrices(random_inputs(9))
    params = TransferParams(alpha=0.8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tm = solve_transform(mat, params)
    assert neighbor_ratio_ok(tm.A, mat, 0.8)
    chosen = list(tm.indices)
    assert chosen != list(range(len(chosen)))      # the constraint binds here
    # every skipped eigenvector would have broken the inequality when tried
    z, a = generalized_eigh(mat.Q_s, mat.B(params.mu, params.lam))
    cols = a / np.sqrt(z)
    for j in range(max(chosen)):
        if j not in chosen:
            prefix = [c for c in chosen if c < j] + [j]
            assert not neighbor_ratio_ok(cols[:, prefix], mat, 0.8)


def test_short_selection_warns():
    # one well-separated direction; the rest violate the inequality
    mat = TransferMatrices(np.zeros((3, 3)), np.eye(3), np.diag([3.0, 2.0, 1.0]),
                           np.diag([0.0, 5.0, 5.0]), np.diag([1.0, 1.0, 1.0]))
    with pytest.warns(RuntimeWarning, match="only 1 of 2"):
        tm = solve_transform(mat, TransferParams(alpha=0.5, subdim=2))
    assert tm.A.shape == (3, 1)
    bad = TransferMatrices(mat.XMXt, mat.P_s, mat.Q_s, np.eye(3) * 5, np.eye(3))
    with pytest.raises(NoAdmissibleSubspace):
        solve_transform(bad, TransferParams(alpha=0.5, subdim=2))


def test_optimum_beats_random_feasible(rng):
    inp = random_inputs(7)
    mat = build_matrices(inp)
    tm = solve_transform(mat, LOOSE)
    best = objective(tm.A, mat, LOOSE)
    for _ in range(100):
        R = normalize_feasible(rng.normal(size=tm.A.shape), mat.Q_s)
        assert best < objective(R, mat, LOOSE)


def test_orthogonal_projector_leaves_matching_unchanged(rng):
    xy = rng.uniform(0, 5, (20, 2))
    blocks = rng.normal(size=(20, 6))
    P = np.linalg.qr(rng.normal(size=(6, 6)))[0]
    raw = MatchDatabase(xy, ("a",), {"a": blocks}, 1.0)
    proj = MatchDatabase(xy, ("a",), {"a": blocks @ P}, 1.0, {"a": P})
    for _ in range(10):
        q = Fingerprint(("a",), {"a": rng.normal(size=6)})
        a, b = wknn(q, raw, 3), wknn(q, proj, 3)
        assert a.distance(b) < 1e-9


@pytest.fixture(scope="module")
def fresh_map(scenario, radio_map):
    return rp_history_map(scenario, radio_map.mask, n_bursts=2, key="t-fresh")


def test_empty_altered_set_is_identity(radio_map, fresh_map):
    rec = reconstruct_map(radio_map, fresh_map, [])
    assert rec.base is radio_map and not rec.altered
    assert np.array_equal(as_database(rec).blocks["ap0"], as_database(radio_map).blocks["ap0"])


def test_reconstructed_map_round_trip(tmp_path, radio_map, fresh_map):
    rec = reconstruct_map(radio_map, fresh_map, ["ap3"])
    assert rec.altered == {"ap3"}
    P = rec.projectors["ap3"]
    assert np.allclose(P.T @ P, np.eye(P.shape[1]))
    save_reconstructed(rec, tmp_path / "r.json")
    back = load_map_any(tmp_path / "r.json")
    assert np.array_equal(back.projectors["ap3"], P)
    assert np.array_equal(back.blocks["ap3"], rec.blocks["ap3"])
    assert back.meta["altered"] == ["ap3"]


def test_reconstruct_rejects_unknown_ap(radio_map, fresh_map):
    with pytest.raises(CrislocError, match="unknown AP"):
        reconstruct_map(radio_map, fresh_map, ["nope"])
