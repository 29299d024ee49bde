import dataclasses

import numpy as np
import pytest

from smat import diffcore as dc
from smat.adapt import (SelectionSearchConfig, exhaustive_selection, finetune_full, lr_search,
                        select_experts, support_loss)
from smat.diffcore import Tensor
from smat.experts import ExpertPool
from smat.fewshot import Episode, protonet_logits
from smat.l0mask import HardConcreteMask
from smat.metaopt import TrainConfig, direct_weights, fixed_gates, init_state, merged_model
from smat.params import ParamSet

from conftest import toy_episode


def _randomized(state, seed, delta_scale=0.5):
    rng = np.random.default_rng(seed)
    pool = state.pool
    d = pool.theta_pre.total_dim
    delta = ParamSet.unflatten(pool.specs, Tensor(rng.normal(0, delta_scale, d)))
    masks = [HardConcreteMask(Tensor(rng.normal(0, 2, d))) for _ in pool.masks]
    return dataclasses.replace(state, pool=ExpertPool(pool.theta_pre, delta, masks, pool.lambdas,
                                                      pool.tau))


def test_single_expert_greedy_keeps_better_bit(toy_params):
    cfg = TrainConfig(n_experts=1, router_heads=2)
    state = init_state(toy_params, cfg)
    ep = toy_episode(np.random.default_rng(0))
    leaf = Tensor(toy_params.flatten_view(), requires_grad=True)
    with dc.Tape() as tape:
        loss = support_loss(ParamSet.unflatten(toy_params.specs, leaf), ep, leave_one_out=False)
    (g,) = tape.gradient(loss, [leaf])
    delta = ParamSet.unflatten(toy_params.specs, Tensor(-0.05 * g.data))
    pool = ExpertPool(toy_params, delta, [HardConcreteMask(Tensor(np.full(leaf.size, 20.0)))],
                      np.zeros(1), 0.5)
    state = dataclasses.replace(state, pool=pool)
    w, trace = select_experts(state, ep, SelectionSearchConfig(rounds=1, accept_prob=1.0),
                              init_bits=np.array([1.0]))
    assert trace.losses[1] > trace.losses[0]
    np.testing.assert_array_equal(w.alpha.data, [1.0])
    assert trace.best_loss == trace.losses[0]


def test_best_is_running_minimum_and_no_backward(toy_state):
    state, _ = toy_state
    for seed in range(5):
        s = _randomized(state, seed)
        ep = toy_episode(np.random.default_rng(seed))
        before = dc.backward_count()
        _, trace = select_experts(s, ep, SelectionSearchConfig(rounds=3, accept_prob=0.9, seed=seed))
        assert dc.backward_count() == before
        assert trace.best_loss == min(trace.losses)
        assert trace.best_loss <= trace.losses[0]
        assert len(trace.losses) <= 3 * 3 + 1
        hit = [i for i, c in enumerate(trace.candidates) if np.array_equal(c, trace.best)]
        assert hit and trace.losses[hit[0]] == trace.best_loss


def test_greedy_accepted_losses_nonincreasing(toy_state):
    state, _ = toy_state
    s = _randomized(state, 7)
    _, trace = select_experts(s, toy_episode(np.random.default_rng(7)),
                              SelectionSearchConfig(rounds=4, accept_prob=1.0))
    acc = [l for l, a in zip(trace.losses, trace.accepted) if a]
    assert all(b <= a for a, b in zip(acc, acc[1:]))


def test_matches_exhaustive_on_most_seeds(toy_state):
    state, _ = toy_state
    hits = 0
    for seed in range(5):
        s = _randomized(state, 100 + seed)
        ep = toy_episode(np.random.default_rng(100 + seed))
        _, best = exhaustive_selection(s, ep)
        _, trace = select_experts(s, ep, SelectionSearchConfig(rounds=5, accept_prob=1.0, seed=seed))
        hits += trace.best_loss == pytest.approx(best, abs=1e-12)
    assert hits >= 4


def test_all_zero_selection_is_theta_pre(toy_state):
    state, _ = toy_state
    s = _randomized(state, 3)
    from smat.adapt import binary_weights

    theta = merged_model(s, binary_weights(np.zeros(3)), fixed_gates(s))
    assert theta.equals(s.pool.theta_pre)


def test_search_config_validation():
    with pytest.raises(ValueError):
        SelectionSearchConfig(rounds=0)
    with pytest.raises(ValueError):
        SelectionSearchConfig(accept_prob=0.0)


def test_finetune_zero_lr_and_zero_steps_match_unadapted(toy_state):
    state, _ = toy_state
    s = _randomized(state, 4)
    ep = toy_episode(np.random.default_rng(4))
    base = protonet_logits(merged_model(s, direct_weights(s, ep), fixed_gates(s)), ep).data
    np.testing.assert_array_equal(finetune_full(s, ep, 10, 0.0).query_logits.data, base)
    np.testing.assert_array_equal(finetune_full(s, ep, 0, 1e-2).query_logits.data, base)


def test_finetune_descends_support_loss_and_leaves_state(toy_state):
    state, _ = toy_state
    s = _randomized(state, 5)
    snapshot = s.clone()
    ep = toy_episode(np.random.default_rng(5), k_shot=3)
    res = finetune_full(s, ep, 50, 1e-2)
    assert res.support_losses[-1] <= res.support_losses[0]
    assert s.pool.theta_delta.equals(snapshot.pool.theta_delta)
    assert all(np.array_equal(s.router.arrays[k], snapshot.router.arrays[k]) for k in s.router.arrays)


def test_lr_search(toy_state):
    state, _ = toy_state
    s = _randomized(state, 6, delta_scale=0.0)
    # query set equal to the support set: support adaptation provably transfers
    eps = []
    for i in range(3):
        e = toy_episode(np.random.default_rng(50 + i), k_shot=4, spread=1.0)
        eps.append(Episode(e.support_x, e.support_y, e.support_x, e.support_y, e.n_way, domain="toy"))
    assert lr_search(s, eps, [3e-3], 5) == {"toy": 3e-3}
    assert lr_search(s, eps, [0.0, 3e-2], 30) == {"toy": 3e-2}
    assert lr_search(s, eps, [0.0, 3e-2], 30) == lr_search(s, eps, [3e-2, 0.0], 30)
    with pytest.raises(ValueError):
        lr_search(s, eps, [], 5)
