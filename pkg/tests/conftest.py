import sys

import numpy as np
import pytest
import torch
from hypothesis import settings

from compass.config import preset
from compass.pipeline import CompassModel

settings.register_profile("default", deadline=None)
settings.load_profile("default")
torch.set_num_threads(1)


def random_model(name="tiny", seed=0, gain=1.0, **overrides):
    """Untrained model; ``gain`` widens the latent distribution so coding sees large symbols."""
    torch.manual_seed(seed)
    model = CompassModel(preset(name, **overrides)).eval()
    with torch.no_grad():
        for codec in (model.bl, model.rc):
            codec.g_a.convs[-1].weight.mul_(gain)
            codec.g_a.convs[-1].bias.mul_(gain)
    return model


def random_dims(rng, K, lo=17, hi=97):
    """Top dims in [lo, hi] and K random non-integer downscale factors per axis."""
    dims = [(int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))]
    for _ in range(K):
        fh, fw = rng.uniform(1.1, 2.0, size=2)
        h, w = dims[0]
        dims.insert(0, (max(1, int(h / fh)), max(1, int(w / fw))))
    return dims


def random_pyramid(rng, K, lo=17, hi=97):
    dims = random_dims(rng, K, lo, hi)
    # smooth content plus noise, so predictions are neither trivial nor hopeless
    out = []
    for h, w in dims:
        yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
        base = np.stack([np.sin(3 * xx + c) * np.cos(2 * yy - c) for c in range(3)], axis=-1)
        out.append(np.clip(0.5 + 0.4 * base + 0.05 * rng.standard_normal((h, w, 3)), 0, 1))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
