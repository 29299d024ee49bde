import math

import numpy as np
import pytest

from smat import diffcore as dc
from smat.diffcore import Tensor
from smat.l0mask import (HardConcreteMask, binarize, deterministic_gate, expected_density,
                         init_log_alpha, overlap_ratio, prob_nonzero, sample_gate,
                         sample_gate_composed, sparsity, union)


def mask_of(values, **kw):
    return HardConcreteMask(Tensor(np.asarray(values, dtype=float)), **kw)


def test_saturated_gates():
    rng = np.random.default_rng(0)
    assert np.all(sample_gate(mask_of(np.full(50, -40.0)), rng).z.data == 0.0)
    assert np.all(sample_gate(mask_of(np.full(50, 40.0)), rng).z.data == 1.0)


def test_centre_sample():
    z = sample_gate(mask_of([0.0]), u=np.array([0.5])).z.data
    assert z[0] == pytest.approx(0.5, abs=1e-15)


def test_prob_nonzero_reference_value():
    # 1 - CDF at zero with the default stretch: sigmoid(-beta * log(-gamma / zeta))
    p = prob_nonzero(mask_of([0.0])).item()
    oracle = 1.0 / (1.0 + math.exp((2.0 / 3.0) * math.log(0.1 / 1.1)))
    assert p == pytest.approx(oracle, abs=1e-15)
    assert p == pytest.approx(0.8318, abs=5e-5)


def test_prob_nonzero_monte_carlo_at_zero():
    rng = np.random.default_rng(7)
    n = 10 ** 6
    z = sample_gate(mask_of(np.zeros(n)), rng).z.data
    assert abs((z > 0).mean() - 0.8318) < 0.002


def test_prob_nonzero_limits():
    np.testing.assert_array_equal(prob_nonzero(mask_of([-1e9, 1e9])).data, [0.0, 1.0])


def test_density_and_sparsity():
    m = mask_of(np.zeros(10))
    assert expected_density(m).item() == pytest.approx(0.8318, abs=5e-5)
    assert sparsity(m).item() == pytest.approx(0.1682, abs=5e-5)
    assert sparsity(mask_of(np.full(4, -1e9))).item() == 1.0
    assert expected_density(mask_of([1e9, 1e9, -1e9, -1e9])).item() == 0.5


def test_deterministic_gate_values():
    np.testing.assert_allclose(deterministic_gate(mask_of([0.0, 40.0, -40.0])).z.data,
                               [0.5, 1.0, 0.0], atol=1e-15)


def test_binarize_union_overlap():
    z1, z2 = np.array([1, 1, 0, 0.0]), np.array([0, 1, 1, 0.0])
    assert overlap_ratio(z1, z2) == pytest.approx(1 / 3)
    np.testing.assert_array_equal(union([1, 0], [0, 1]), [1, 1])
    assert overlap_ratio(z1, z1) == 1.0
    assert overlap_ratio(np.zeros(3), np.zeros(3)) == 0.0
    np.testing.assert_array_equal(binarize(Tensor([0.2, 0.7])), [0.0, 1.0])


def test_parameter_validation():
    with pytest.raises(ValueError):
        mask_of([0.0], gamma=0.1)
    with pytest.raises(ValueError):
        mask_of([0.0], beta=0.0)
    with pytest.raises(ValueError):
        mask_of([np.nan])


def test_fused_gate_matches_composed_value_and_gradient():
    rng = np.random.default_rng(3)
    la = rng.normal(0, 2, 200)
    u = rng.uniform(1e-6, 1 - 1e-6, 200)
    w = rng.normal(size=200)
    leaf_a, leaf_b = Tensor(la, requires_grad=True), Tensor(la, requires_grad=True)
    with dc.Tape() as t1:
        a = dc.sum(sample_gate(mask_of(la).with_log_alpha(leaf_a), u=u).z * w)
    with dc.Tape() as t2:
        b = dc.sum(sample_gate_composed(mask_of(la).with_log_alpha(leaf_b), u) * w)
    assert a.item() == pytest.approx(b.item(), abs=1e-12)
    np.testing.assert_allclose(t1.gradient(a, [leaf_a])[0].data,
                               t2.gradient(b, [leaf_b])[0].data, atol=1e-12)


def test_pathwise_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    la = rng.normal(0, 1, 30)
    u = rng.uniform(0.05, 0.95, 30)
    m = mask_of(la)
    # keep entries whose pre-clamp value is clear of the kinks
    s = 1 / (1 + np.exp(-(np.log(u) - np.log1p(-u) + la) / m.beta))
    sbar = s * (m.zeta_s - m.gamma) + m.gamma
    keep = (np.abs(sbar) > 1e-3) & (np.abs(sbar - 1) > 1e-3)
    err = dc.finite_difference_check(
        lambda ts: dc.sum(dc.square(sample_gate(m.with_log_alpha(ts[0]), u=u).z)), [la],
        mask=[keep])
    assert err < 1e-6


def test_density_gradient_is_analytic():
    la = np.array([-1.0, 0.0, 2.0])
    leaf = Tensor(la, requires_grad=True)
    with dc.Tape() as tape:
        d = expected_density(mask_of(la).with_log_alpha(leaf))
    g, = tape.gradient(d, [leaf])
    p = prob_nonzero(mask_of(la)).data
    np.testing.assert_allclose(g.data, p * (1 - p) / 3, atol=1e-15)


def test_init_log_alpha_hits_target_density():
    rng = np.random.default_rng(5)
    la = init_log_alpha(1000, rng, density=0.3, std=0.0)
    assert expected_density(mask_of(la)).item() == pytest.approx(0.3, abs=1e-12)
