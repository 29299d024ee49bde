import numpy as np
import pytest

from smat.fewshot import Episode
from smat.metaopt import TrainConfig, init_state
from smat.params import Architecture, init_backbone

TOY_ARCH = Architecture(input_dim=4, hidden=6, depth=1, embed_dim=4)


def toy_episode(rng, n_way=3, k_shot=2, q=3, dim=4, spread=2.0, domain="toy"):
    centres = rng.normal(0, spread, (n_way, dim))
    sy = np.repeat(np.arange(n_way), k_shot)
    qy = np.repeat(np.arange(n_way), q)
    sx = centres[sy] + rng.normal(0, 0.5, (len(sy), dim))
    qx = centres[qy] + rng.normal(0, 0.5, (len(qy), dim))
    return Episode(sx, sy, qx, qy, n_way, domain=domain)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_params(rng):
    return init_backbone(TOY_ARCH, rng)


@pytest.fixture
def toy_state(toy_params):
    cfg = TrainConfig(n_experts=3, tau=0.5, seed=3, router_heads=2, max_steps=10)
    return init_state(toy_params, cfg), cfg


@pytest.fixture
def toy_eps(rng):
    return [toy_episode(rng) for _ in range(2)]


# acceptance report -------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
