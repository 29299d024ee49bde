import dataclasses

import numpy as np
import pytest

from smat.analysis import (alignment_rows, cosine, gradient_alignment, mask_overlap_matrix,
                           overlap_rows, selection_rows, selection_stats, sparsity_report)
from smat.diffcore import Tensor
from smat.experts import ExpertPool
from smat.l0mask import HardConcreteMask, expected_density
from smat.params import ParamSet

from conftest import toy_episode


def _pool_with(state, log_alphas, delta=None):
    p = state.pool
    masks = [HardConcreteMask(Tensor(np.asarray(la, dtype=float))) for la in log_alphas]
    d = p.theta_delta if delta is None else ParamSet.unflatten(p.specs, Tensor(delta))
    return ExpertPool(p.theta_pre, d, masks, np.zeros(len(masks)), p.tau)


def test_fully_closed_masks_have_unit_sparsity(toy_state):
    state, _ = toy_state
    d = state.pool.theta_pre.total_dim
    rep = sparsity_report(_pool_with(state, [np.full(d, -1e9)] * 3))
    assert all(float(r[5]) == 1.0 for r in rep.rows)
    assert rep.merged_sparsity == 1.0


def test_uniform_log_alpha_gives_equal_layer_sparsity(toy_state):
    state, _ = toy_state
    d = state.pool.theta_pre.total_dim
    rep = sparsity_report(_pool_with(state, [np.full(d, 0.3)] * 3))
    np.testing.assert_allclose(rep.layer_density, rep.layer_density[0, 0], atol=1e-15)
    for r in rep.rows:
        assert float(r[5]) + float(r[6]) == pytest.approx(1.0, abs=1e-15)


def test_totals_match_expected_density(toy_state):
    state, _ = toy_state
    rng = np.random.default_rng(0)
    d = state.pool.theta_pre.total_dim
    pool = _pool_with(state, [rng.normal(0, 2, d) for _ in range(3)])
    rep = sparsity_report(pool)
    ref = [expected_density(m).item() for m in pool.masks]
    np.testing.assert_allclose(rep.expert_density, ref, atol=1e-9)


def test_overlap_identical_and_disjoint(toy_state):
    state, _ = toy_state
    d = state.pool.theta_pre.total_dim
    half = np.where(np.arange(d) < d // 2, 10.0, -10.0)
    mat = mask_overlap_matrix(_pool_with(state, [half, half, -half]))
    assert mat[0, 1] == 1.0 and mat[0, 2] == 0.0
    np.testing.assert_array_equal(np.diag(mat), 1.0)


def test_overlap_matches_set_computation(toy_state):
    state, _ = toy_state
    rng = np.random.default_rng(1)
    d = state.pool.theta_pre.total_dim
    bits = [rng.random(d) < 0.4 for _ in range(3)]
    mat = mask_overlap_matrix(_pool_with(state, [np.where(b, 10.0, -10.0) for b in bits]))
    for i in range(3):
        for j in range(3):
            a, b = set(np.flatnonzero(bits[i])), set(np.flatnonzero(bits[j]))
            assert mat[i, j] == pytest.approx(len(a & b) / len(a | b), abs=1e-15)
    assert mat.shape == (3, 3) and np.array_equal(mat, mat.T)
    header, rows = overlap_rows(mat)
    assert header == ["expert", "expert_1", "expert_2", "expert_3"] and len(rows) == 3


def test_cosine_cases():
    g = np.array([1.0, -2.0, 0.5])
    assert cosine(g, g)[0] == pytest.approx(1.0, abs=1e-15)
    assert cosine(g, -g)[0] == pytest.approx(-1.0, abs=1e-15)
    assert cosine(g, np.zeros(3)) == (0.0, True)


def test_identical_episodes_align_perfectly(toy_state):
    state, _ = toy_state
    rng = np.random.default_rng(2)
    d = state.pool.theta_pre.total_dim
    s = dataclasses.replace(state, pool=_pool_with(state, [rng.normal(1, 1, d) for _ in range(3)],
                                                   rng.normal(0, 0.1, d)))
    ep = toy_episode(np.random.default_rng(3))
    res = gradient_alignment(s, [(ep, ep)])
    assert res.delta[0] == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(res.experts[0], 1.0, atol=1e-9)
    other = toy_episode(np.random.default_rng(4))
    res = gradient_alignment(s, [(ep, other), (ep, ep)])
    assert -1.0 <= res.delta[0] <= 1.0 and res.delta[1] == pytest.approx(1.0, abs=1e-9)
    rows = alignment_rows(res)
    assert rows[-4][:2] == ["mean", "delta"]
    with pytest.raises(ValueError):
        gradient_alignment(s, [])


def _log(raws, domains):
    rows = []
    for r, d in zip(raws, domains):
        r = np.asarray(r, dtype=float)
        a = r / r.sum() if r.sum() > 0 else np.zeros_like(r)
        row = {"domain": d}
        row.update({f"alpha_{i + 1}": repr(float(v)) for i, v in enumerate(a)})
        row.update({f"raw_{i + 1}": repr(float(v)) for i, v in enumerate(r)})
        rows.append(row)
    return rows


def test_selection_discreteness_extremes():
    assert selection_stats(_log([[1, 0, 1], [0, 1, 0]], ["a", "b"])).overall_discreteness == 0.0
    assert selection_stats(_log([[0.5, 0.5]] * 3, ["a"] * 3)).overall_discreteness == 0.5


def test_selection_means_recomputed():
    rng = np.random.default_rng(5)
    raws = rng.random((12, 3))
    doms = ["x", "y", "z"] * 4
    st = selection_stats(_log(raws, doms))
    for k, d in enumerate(st.domains):
        idx = [i for i, v in enumerate(doms) if v == d]
        ref = (raws[idx] / raws[idx].sum(axis=1, keepdims=True)).mean(axis=0)
        np.testing.assert_allclose(st.mean_alpha[k], ref, atol=1e-12)
        disc = np.minimum(raws[idx], 1 - raws[idx]).mean()
        assert st.discreteness[k] == pytest.approx(disc, abs=1e-12)
    m = st.mean_alpha
    n = np.linalg.norm(m, axis=1)
    np.testing.assert_allclose(st.similarity, (m @ m.T) / np.outer(n, n), atol=1e-12)
    header, rows = selection_rows(st)
    assert header[:3] == ["domain", "n_episodes", "discreteness"] and rows[-1][0] == "ALL"
    with pytest.raises(ValueError):
        selection_stats([])
