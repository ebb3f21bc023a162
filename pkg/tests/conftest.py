import numpy as np
import pytest
import torch

from detailrefine import model as mdl
from detailrefine.synth import DataConfig, generate

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_cfg():
    """A 16x16 image, d=16, 2-block model: small enough for finite differences."""
    return mdl.ModelConfig(image_size=16, token_patch=4, model_dim=16, heads=2, blocks=2)


@pytest.fixture(scope="session")
def tiny_quads():
    cfg = DataConfig(image_size=16, min_frac=0.25, max_frac=0.5)
    return generate(6, 77, cfg)


@pytest.fixture(scope="session")
def desk_quads():
    return generate(12, 4242, DataConfig())


def random_params(cfg, seed, head_scale=0.1):
    """Initial parameters with a non-zero head so gradients reach every tensor."""
    params = mdl.init_params(cfg, seed)
    g = np.random.default_rng(seed + 99)
    params["head.weight"] = torch.from_numpy(g.uniform(-head_scale, head_scale, size=tuple(params["head.weight"].shape)))
    params["head.bias"] = torch.from_numpy(g.uniform(-head_scale, head_scale, size=tuple(params["head.bias"].shape)))
    return params


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number, name, passed, detail=""):
        lines[number] = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
