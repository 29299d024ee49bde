import dataclasses
import json

import numpy as np
import pytest

from smat.params import Architecture
from smat.tasks import (MIN_OOD_DISTANCE, PretrainConfig, SuiteSpec, episode_from_dict,
                        episode_to_dict, get_suite, pretrain_backbone, protonet_accuracy,
                        sample_episode, suite_catalog, transform_distance, _warp)


@pytest.fixture(scope="module")
def suite():
    return get_suite("md-mini")


def test_catalog_shape(suite):
    assert len(suite.id_domains) == 4 and len(suite.ood_domains) == 3
    ids = {d.name for d in suite.id_domains}
    assert not ids & {d.name for d in suite.ood_domains}
    for o in suite.ood_domains:
        assert all(transform_distance(o, d) >= MIN_OOD_DISTANCE for d in suite.id_domains)


def test_catalog_regenerates_byte_identical(suite):
    assert suite_catalog()["md-mini"].to_json() == suite.to_json()
    assert SuiteSpec.from_dict(json.loads(suite.to_json())).to_json() == suite.to_json()


def test_episode_determinism(suite):
    a = sample_episode(suite, "train", "id", 3)
    b = sample_episode(suite, "train", "id", 3)
    assert np.array_equal(a.support_x, b.support_x) and np.array_equal(a.query_x, b.query_x)
    c = sample_episode(suite, "train", "id", 4)
    assert not np.array_equal(a.query_x, c.query_x)


def test_class_balance(suite):
    ep = sample_episode(suite, "test", "id", 0, n_way=5, k_shot=5)
    assert len(ep.support_y) == 25 and len(ep.query_y) == 5 * suite.q_query
    assert np.array_equal(np.bincount(ep.support_y), np.full(5, 5))
    assert set(ep.query_y) == set(range(5))


def test_one_shot_noise_free_support_is_center(suite):
    dom = dataclasses.replace(suite.id_domains[0], noise_scale=1e-12, nuisance_scale=0.0)
    spec = dataclasses.replace(suite, id_domains=(dom,) + suite.id_domains[1:])
    ep = sample_episode(spec, "test", "id", 0, domain=dom.name, k_shot=1)
    from smat.tasks import _centers, split_classes

    centers = _centers(dom.kind, dom.class_pool_size, dom.signal_dim, dom.center_seed)
    latent = np.zeros((len(centers), dom.input_dim))
    latent[:, :dom.signal_dim] = centers
    mapped = _warp(latent @ dom.A.T + np.array(dom.offset), dom.warp)
    avail = set(split_classes(spec, dom, "test").tolist())
    for x in ep.support_x:
        d = np.linalg.norm(mapped - x, axis=1)
        assert d.min() < 1e-9 and int(d.argmin()) in avail


def test_invalid_combinations(suite):
    with pytest.raises(ValueError):
        sample_episode(suite, "train", "ood", 0)
    with pytest.raises(ValueError):
        sample_episode(suite, "holdout", "id", 0)
    with pytest.raises(ValueError):
        dataclasses.replace(suite.id_domains[0], noise_scale=0.0)


def test_episode_json_round_trip(suite):
    ep = sample_episode(suite, "val", "ood", 2)
    back = episode_from_dict(json.loads(json.dumps(episode_to_dict(ep))))
    assert np.array_equal(back.support_x, ep.support_x) and back.is_ood and back.domain == ep.domain


def test_untrained_backbone_near_chance(suite):
    net = pretrain_backbone(suite, PretrainConfig(steps=0))
    acc = protonet_accuracy(net, suite, "test", "id", 200)
    assert abs(acc - 0.2) <= 0.1


def test_pretrained_backbone_is_useful_and_deterministic(suite):
    cfg = PretrainConfig()
    a = pretrain_backbone(suite, cfg)
    b = pretrain_backbone(suite, cfg)
    assert np.array_equal(a.flatten_view(), b.flatten_view())
    assert protonet_accuracy(a, suite, "test", "id", 200) >= 0.6


def test_inputs_finite_everywhere(suite):
    for split, which in (("train", "id"), ("val", "ood"), ("test", "ood")):
        for i in range(10):
            ep = sample_episode(suite, split, which, i)
            assert np.isfinite(ep.support_x).all() and np.isfinite(ep.query_x).all()
            assert set(ep.support_y) == set(range(ep.n_way))
