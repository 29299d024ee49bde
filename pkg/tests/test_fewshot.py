import numpy as np
import pytest

from smat import diffcore as dc
from smat.diffcore import Tensor
from smat.fewshot import (Episode, accuracy, ce_loss, combined_loss, episode_meta_loss, kd_loss,
                          logits_from_embeddings, protonet_logits, support_logits)
from smat.params import ParamSet, embed

from conftest import toy_episode


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_query_on_support_point():
    s = Tensor([[0.0], [1.0]])
    logits = logits_from_embeddings(s, np.array([0, 1]), Tensor([[0.0]]), 2)
    np.testing.assert_allclose(softmax(logits.data)[0], [0.7311, 0.2689], atol=1e-4)


def test_hand_evaluated_two_class_probability():
    s = Tensor([[0.0, 0.0], [1.0, 0.0]])
    logits = logits_from_embeddings(s, np.array([0, 1]), Tensor([[0.25, 0.0]]), 2)
    np.testing.assert_allclose(logits.data, [[-0.0625, -0.5625]], atol=1e-15)
    assert softmax(logits.data)[0, 0] == pytest.approx(1 / (1 + np.exp(-0.5)), abs=1e-12)
    assert softmax(logits.data)[0, 0] == pytest.approx(0.6225, abs=1e-4)


def test_identical_centroids_give_uniform():
    s = Tensor(np.ones((3, 2)))
    logits = logits_from_embeddings(s, np.array([0, 1, 2]), Tensor([[0.3, -2.0]]), 3)
    np.testing.assert_allclose(softmax(logits.data), np.full((1, 3), 1 / 3), atol=1e-12)


def test_cosine_metric_scale_invariant():
    rng = np.random.default_rng(0)
    s, q = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    y = np.array([0, 0, 1, 1])
    a = logits_from_embeddings(Tensor(s), y, Tensor(q), 2, "cosine").data
    b = logits_from_embeddings(Tensor(s), y, Tensor(5 * q), 2, "cosine").data
    np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(ValueError):
        logits_from_embeddings(Tensor(s), y, Tensor(q), 2, "l1")


def test_ce_uniform_and_limit():
    assert ce_loss(Tensor(np.zeros((2, 4))), [0, 3]).item() == pytest.approx(np.log(4), abs=1e-12)
    assert ce_loss(Tensor([[1e4, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)


def test_ce_matches_hand_log_softmax():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 5))
    y = rng.integers(0, 5, 6)
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert ce_loss(Tensor(z), y).item() == pytest.approx(-lp[np.arange(6), y].mean(), abs=1e-12)


def test_kd_zero_on_identical_and_teacher_detached():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 4))
    assert kd_loss(Tensor(z), z).item() == pytest.approx(0.0, abs=1e-14)
    s, t = Tensor(z, requires_grad=True), Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with dc.Tape() as tape:
        loss = kd_loss(s, t, 2.0)
    gs, gt = tape.gradient(loss, [s, t])
    assert np.all(gt.data == 0.0) and np.any(gs.data != 0.0)


def test_kd_matches_independent_kl():
    rng = np.random.default_rng(3)
    s, t = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    temp = 2.0
    ps, pt = softmax(s / temp), softmax(t / temp)
    ref = temp ** 2 * np.mean(np.sum(pt * (np.log(pt) - np.log(ps)), axis=1))
    assert kd_loss(Tensor(s), t, temp).item() == pytest.approx(ref, abs=1e-12)


def test_combined_loss_weights():
    rng = np.random.default_rng(4)
    s, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    y = np.array([0, 1, 2, 0])
    ce, kd = ce_loss(Tensor(s), y).item(), kd_loss(Tensor(s), t).item()
    assert combined_loss(Tensor(s), t, y, 1.0).item() == ce
    assert combined_loss(Tensor(s), s, y, 0.0).item() == pytest.approx(0.0, abs=1e-14)
    assert combined_loss(Tensor(s), t, y, 0.5).item() == pytest.approx(0.5 * ce + 0.5 * kd, abs=1e-12)


def test_episode_meta_loss_on_toy(toy_params):
    ep = toy_episode(np.random.default_rng(5))
    ce = ce_loss(protonet_logits(toy_params, ep), ep.query_y).item()
    assert episode_meta_loss(toy_params, toy_params, ep, 1.0).item() == ce
    assert episode_meta_loss(toy_params, toy_params, ep, 0.0).item() == pytest.approx(0.0, abs=1e-12)


def test_episode_validation():
    with pytest.raises(ValueError):
        Episode(np.zeros((2, 2)), np.array([0, 0]), np.zeros((1, 2)), np.array([0]), 2)


def test_leave_one_out_support_logits(toy_params):
    ep = toy_episode(np.random.default_rng(6), n_way=2, k_shot=3)
    e = embed(toy_params, ep.support_x).data
    got = support_logits(toy_params, ep, leave_one_out=True).data
    for j in range(len(e)):
        for c in range(2):
            idx = [i for i in range(len(e)) if ep.support_y[i] == c and i != j]
            cen = e[idx].mean(axis=0)
            assert got[j, c] == pytest.approx(-np.sum((e[j] - cen) ** 2), abs=1e-10)
    plain = support_logits(toy_params, ep, leave_one_out=False).data
    one_shot = toy_episode(np.random.default_rng(7), k_shot=1)
    np.testing.assert_array_equal(support_logits(toy_params, one_shot, leave_one_out=True).data,
                                  support_logits(toy_params, one_shot, leave_one_out=False).data)
    assert not np.allclose(got, plain)


def test_protonet_gradient_matches_fd(toy_params):
    ep = toy_episode(np.random.default_rng(8))
    err = dc.finite_difference_check(
        lambda ts: ce_loss(protonet_logits(ParamSet(toy_params.specs, ts), ep), ep.query_y),
        [v.data for v in toy_params.values])
    assert err < 1e-5


def test_accuracy():
    assert accuracy(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 0]) == 0.5
