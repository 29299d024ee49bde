import dataclasses

import numpy as np
import pytest

from smat import diffcore as dc
from smat.diffcore import Tensor
from smat.experts import ExpertPool
from smat.fewshot import ce_loss, kd_loss, protonet_logits
from smat.l0mask import HardConcreteMask
from smat.metaopt import (TrainConfig, direct_weights, fixed_gates, init_state, make_teacher,
                          meta_step, merged_model, sparsity_violation, train)
from smat.optim import Adam, lagrange_update
from smat.params import ParamSet

from conftest import toy_episode


def _with_density(pool, log_alpha):
    masks = [HardConcreteMask(Tensor(np.full(m.size, log_alpha))) for m in pool.masks]
    return ExpertPool(pool.theta_pre, pool.theta_delta, masks, pool.lambdas, pool.tau)


def _logit_for_density(d):
    # prob_nonzero = sigmoid(la - beta * log(-gamma / zeta)); invert for la
    return np.log(d / (1 - d)) + (2 / 3) * np.log(0.1 / 1.1)


@pytest.mark.parametrize("density, expected", [(0.15, 0.05), (0.10, 0.0), (0.05, -0.05)])
def test_sparsity_violation(toy_state, density, expected):
    state, _ = toy_state
    pool = ExpertPool(state.pool.theta_pre, state.pool.theta_delta, state.pool.masks,
                      state.pool.lambdas, 0.9)
    v = sparsity_violation(_with_density(pool, _logit_for_density(density)))
    np.testing.assert_allclose(v, expected, atol=1e-12)


def test_lagrange_projection_and_reset():
    lam = lagrange_update(np.array([0.0, 2.0, 1.0]), np.array([0.1, -0.01, 0.0]), 1.0)
    np.testing.assert_allclose(lam, [0.1, 0.0, 0.0])
    lam = lagrange_update(np.array([1.0]), np.array([0.5]), 1.0, np.array([0.0]))
    np.testing.assert_allclose(lam, [1.0])


def test_tau_zero_keeps_lambda_zero(toy_params):
    cfg = TrainConfig(n_experts=2, tau=0.0, seed=0, router_heads=2, max_steps=6, batch_tasks=1)
    eps = [toy_episode(np.random.default_rng(i)) for i in range(6)]
    seen = []
    train(cfg, toy_params, lambda s, i: eps[s], on_step=lambda r: seen.append(r.metrics["lambdas"]))
    assert np.all(np.array(seen) == 0.0)


def test_dense_masks_raise_every_lambda(toy_params):
    cfg = TrainConfig(n_experts=3, tau=0.9, seed=0, router_heads=2, batch_tasks=1)
    state = init_state(toy_params, cfg)
    state = dataclasses.replace(state, pool=_with_density(state.pool, 8.0))
    res = meta_step(state, [toy_episode(np.random.default_rng(0))], cfg)
    assert np.all(np.array(res.metrics["lambdas"]) > 0.0)
    # lambdas were zero on entry, so the penalty contributed nothing yet
    assert res.metrics["lambdas_used"] == [0.0, 0.0, 0.0]


def test_reset_rule_over_a_run(toy_params):
    cfg = TrainConfig(n_experts=2, tau=0.7, seed=1, router_heads=2, max_steps=40,
                      batch_tasks=1, lr_mask=0.2)
    eps = [toy_episode(np.random.default_rng(i)) for i in range(40)]
    out = []
    train(cfg, toy_params, lambda s, i: eps[s], on_step=lambda r: out.append(r.metrics))
    for m in out:
        for v, lam in zip(m["violations"], m["lambdas"]):
            assert lam >= 0.0
            if v <= 0:
                assert lam == 0.0


def test_equivalence_with_plain_protonet_step(toy_params):
    cfg = TrainConfig(n_experts=1, tau=0.0, beta_w=1.0, seed=0, router_heads=2, batch_tasks=2)
    state = init_state(toy_params, cfg)
    batch = [toy_episode(np.random.default_rng(i)) for i in range(2)]
    ones = [np.ones(toy_params.total_dim)]
    res = meta_step(state, batch, cfg, gate_override=ones, alpha_override=np.array([1.0]))
    merged = merged_model(res.state, direct_weights(res.state, batch[0]), [Tensor(ones[0])])

    leaf = Tensor(toy_params.flatten_view(), requires_grad=True)
    with dc.Tape() as tape:
        net = ParamSet.unflatten(toy_params.specs, leaf)
        loss = (ce_loss(protonet_logits(net, batch[0]), batch[0].query_y)
                + ce_loss(protonet_logits(net, batch[1]), batch[1].query_y)) / 2
    (g,) = tape.gradient(loss, [leaf])
    ref = Adam(cfg.lr_main).step([leaf.data], [g.data])[0]
    np.testing.assert_allclose(merged.flatten_view(), ref, rtol=0, atol=1e-10)


def test_theta_pre_frozen_and_determinism(toy_params):
    cfg = TrainConfig(n_experts=3, tau=0.5, seed=2, router_heads=2, max_steps=8, batch_tasks=2)
    stream = lambda s, i: toy_episode(np.random.default_rng([s, i]))  # noqa: E731
    before = toy_params.flatten_view().copy()
    a = train(cfg, toy_params, stream)
    b = train(cfg, toy_params, stream)
    assert np.array_equal(a.state.pool.theta_pre.flatten_view(), before)
    assert a.rows == b.rows
    assert np.any(a.state.pool.theta_delta.flatten_view() != 0.0)


def test_zero_steps_gives_theta_pre(toy_params):
    cfg = TrainConfig(n_experts=2, max_steps=0, router_heads=2)
    res = train(cfg, toy_params, lambda s, i: None)
    ep = toy_episode(np.random.default_rng(0))
    theta = merged_model(res.state, direct_weights(res.state, ep), fixed_gates(res.state))
    assert np.array_equal(theta.flatten_view(), toy_params.flatten_view())
    assert res.rows == []


def test_metrics_header(toy_params):
    res = train(TrainConfig(n_experts=2, max_steps=1, router_heads=2, batch_tasks=1), toy_params,
                lambda s, i: toy_episode(np.random.default_rng(0)))
    assert res.header == ["step", "mean_ce", "mean_kd", "density_1", "density_2", "lambda_1",
                          "lambda_2", "mean_alpha_1", "mean_alpha_2", "val_id_acc", "val_ood_acc"]
    assert len(res.rows[0]) == len(res.header)


def test_teacher_zero_lr_is_identity(toy_params):
    ep = toy_episode(np.random.default_rng(0))
    t = make_teacher(toy_params, ep, 3, 0.0)
    assert np.array_equal(t.flatten_view(), toy_params.flatten_view())
    logits = protonet_logits(toy_params, ep).data
    assert kd_loss(Tensor(logits), protonet_logits(t, ep).data).item() == pytest.approx(0.0, abs=1e-12)


def test_teacher_single_step_matches_hand_step(toy_params):
    ep = toy_episode(np.random.default_rng(1))
    leaf = Tensor(toy_params.flatten_view(), requires_grad=True)
    with dc.Tape() as tape:
        loss = ce_loss(protonet_logits(ParamSet.unflatten(toy_params.specs, leaf), ep), ep.query_y)
    (g,) = tape.gradient(loss, [leaf])
    t = make_teacher(toy_params, ep, 1, 0.05)
    np.testing.assert_allclose(t.flatten_view(), leaf.data - 0.05 * g.data, atol=1e-14)


def test_teacher_descends_query_loss(toy_params):
    for seed in range(5):
        ep = toy_episode(np.random.default_rng(seed))
        t = make_teacher(toy_params, ep, 1, 0.1)
        before = ce_loss(protonet_logits(toy_params, ep), ep.query_y).item()
        after = ce_loss(protonet_logits(t, ep), ep.query_y).item()
        assert after <= before


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lr_main=0.0)
    with pytest.raises(ValueError):
        TrainConfig(k_teacher=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
