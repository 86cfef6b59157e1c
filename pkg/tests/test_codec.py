import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from compass import codec
from compass.config import CodecConfig, preset

TINY = preset("tiny").bl


def zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


# --- padding plans ---------------------------------------------------------------


def test_pad_plan_examples():
    p = codec.pad_plan((768, 512), 4)
    assert p.flags == ((0, 0),) * 4 and p.out_dims == (48, 32)
    p = codec.pad_plan((5, 5), 1)
    assert p.flags == ((1, 1),) and p.out_dims == (3, 3)
    p = codec.pad_plan((5, 5), 2)
    assert p.flags == ((1, 1), (1, 1)) and p.out_dims == (2, 2)
    p = codec.pad_plan((65, 65), 4)
    assert [d[0] for d in p.dims] == [65, 33, 17, 9, 5]
    assert p.flags == ((1, 1),) * 4


@given(st.integers(1, 5000), st.integers(1, 5000), st.integers(1, 8))
def test_pad_plan_matches_iterated_ceil(h, w, stages):
    p = codec.pad_plan((h, w), stages)
    eh, ew = h, w
    for s in range(stages):
        assert p.flags[s] == (eh % 2, ew % 2)
        eh, ew = math.ceil(eh / 2), math.ceil(ew / 2)
    assert p.out_dims == (eh, ew)
    assert p.out_dims == (math.ceil(h / 2**stages), math.ceil(w / 2**stages))


def test_pad_plan_rejects_bad_input():
    with pytest.raises(ValueError):
        codec.pad_plan((0, 4), 2)
    with pytest.raises(ValueError):
        codec.pad_plan((4, 4), 0)


# --- shapes ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def paper_codec():
    torch.manual_seed(0)
    return codec.Codec(CodecConfig()).eval()


@pytest.mark.parametrize("size,latent", [(64, 4), (65, 5)])
def test_paper_channel_shapes(paper_codec, size, latent):
    with torch.no_grad():
        y = paper_codec.analysis(torch.rand(1, 3, size, size))
        assert y.shape == (1, 128, latent, latent)
        z = paper_codec.hyper_analysis(y)
        assert z.shape[1] == 192
        mu, sigma = paper_codec.hyper_synthesis(z, y.shape[-2:])
        assert mu.shape == sigma.shape == y.shape
        x = paper_codec.synthesis(y, (size, size))
    assert x.shape == (1, 3, size, size)
    if size == 64:
        assert z.shape == (1, 192, 1, 1)


def test_shape_round_trip_exhaustive():
    torch.manual_seed(1)
    c = codec.Codec(TINY).eval()
    with torch.no_grad():
        for h in range(1, 65):
            for w in range(1, 65):
                y = c.analysis(torch.zeros(1, 3, h, w))
                assert y.shape[-2:] == codec.latent_dims((h, w), TINY)
                assert c.synthesis(y, (h, w)).shape[-2:] == (h, w)


def test_lump_padding_shapes():
    cfg = preset("tiny", padding="lump").bl
    c = codec.Codec(cfg).eval()
    with torch.no_grad():
        y = c.analysis(torch.rand(1, 3, 65, 30))
        assert y.shape[-2:] == (8, 4)
        assert c.synthesis(y, (65, 30)).shape[-2:] == (65, 30)


def test_synthesis_rejects_inconsistent_latent():
    c = codec.Codec(TINY)
    with pytest.raises(ValueError):
        c.synthesis(torch.zeros(1, TINY.n, 3, 3), (64, 64))
    with pytest.raises(ValueError):
        c.analysis(torch.zeros(1, 1, 8, 8))


def test_zero_weights_zero_input():
    c = codec.Codec(TINY)
    zero_params(c)
    y = c.analysis(torch.zeros(1, 3, 16, 16))
    assert torch.count_nonzero(y) == 0
    mu, sigma = c.hyper_synthesis(torch.zeros(1, TINY.m, 1, 1), (1, 1))
    assert torch.count_nonzero(mu) == 0
    assert torch.all(sigma == codec.SIGMA_MIN)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sigma_floor_for_any_weights(seed):
    torch.manual_seed(seed)
    c = codec.Codec(TINY)
    with torch.no_grad():
        for p in c.h_s_tail.parameters():
            p.normal_(0, 10)
        _, sigma = c.hyper_synthesis(torch.randn(1, TINY.m, 2, 2) * 5, (7, 7))
    assert sigma.min() >= codec.SIGMA_MIN


def test_layerwise_padding_replicates_bottom_right():
    x = torch.arange(6.0).view(1, 1, 2, 3)
    out = codec.replicate_pad(x, 1, 1)
    assert out.shape == (1, 1, 3, 4)
    assert torch.equal(out[0, 0, 2], torch.tensor([3.0, 4, 5, 5]))
    assert torch.equal(out[0, 0, :, 3], torch.tensor([2.0, 5, 5]))


# --- quantization and noise ------------------------------------------------------


def test_rounding_examples():
    v = torch.tensor([2.4, -0.5, 0.5, 1.5, -2.5, -2.4, 0.0])
    assert codec.round_half_away(v).tolist() == [2, -1, 1, 2, -3, -2, 0]


def test_straight_through_gradient():
    v = torch.randn(50, requires_grad=True)
    codec.quantize_round(v).sum().backward()
    assert torch.equal(v.grad, torch.ones(50))


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
def test_straight_through_identity(values):
    v = torch.tensor(values, dtype=torch.float64, requires_grad=True)
    w = torch.linspace(-1, 1, len(values), dtype=torch.float64)
    (w * codec.quantize_round(v) ** 2).sum().backward()
    v_hat = codec.round_half_away(v.detach())
    torch.testing.assert_close(v.grad, 2 * w * v_hat)


def test_uniform_noise_bounds_and_mean():
    g = torch.Generator().manual_seed(0)
    v = torch.zeros(10**6, dtype=torch.float64)
    u = codec.add_uniform_noise(v, g) - v
    assert u.abs().max() <= 0.5
    assert abs(float(u.mean())) < 0.002
    a = codec.add_uniform_noise(v[:100], torch.Generator().manual_seed(4))
    b = codec.add_uniform_noise(v[:100], torch.Generator().manual_seed(4))
    assert torch.equal(a, b)


# --- rate ------------------------------------------------------------------------


def test_rate_bits_examples():
    one = torch.ones(1, dtype=torch.float64)
    bits, _ = codec.rate_bits(0 * one, 0 * one, one)
    assert abs(float(bits) + math.log2(norm.cdf(0.5) - norm.cdf(-0.5))) < 1e-12
    assert abs(float(bits) - 1.385) < 1e-3
    bits, _ = codec.rate_bits(3 * one, 3 * one, codec.SIGMA_MIN * one)
    assert float(bits) < 1e-9
    bits, _ = codec.rate_bits(1000 * one, 0 * one, one)
    assert float(bits) == 30.0


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(1e-3, 100))
def test_rate_bits_matches_scipy(v, mu, sigma):
    t = lambda x: torch.tensor([x], dtype=torch.float64)
    bits = float(codec.rate_bits(t(v), t(mu), t(sigma))[0])
    p = norm.sf((abs(v - mu) - 0.5) / sigma) - norm.sf((abs(v - mu) + 0.5) / sigma)
    want = -math.log2(max(p, codec.P_MIN))
    assert bits >= 0
    assert abs(bits - want) <= 1e-6 * max(1.0, want)


def test_rate_monotone_in_sigma():
    s = torch.logspace(-6, 3, 400, dtype=torch.float64)
    v = torch.full_like(s, 1.7)
    bits = codec.rate_bits(v, v, s)[1]
    assert torch.all(bits[1:] >= bits[:-1])


def test_factorized_prior_is_normalized():
    torch.manual_seed(0)
    prior = codec.FactorizedPrior(5, (3, 3))
    pmf = prior.pmf_table(200)
    np.testing.assert_allclose(pmf.sum(axis=1), 1.0, atol=1e-6)
    z = torch.arange(-3.0, 4.0).view(1, 1, 1, 7).expand(1, 5, 1, 7)
    np.testing.assert_allclose(prior.likelihood(z)[0, :, 0].detach().numpy(), pmf[:, 197:204], rtol=1e-5)


# --- gradients -------------------------------------------------------------------


def double_codec(seed=0):
    torch.manual_seed(seed)
    return codec.Codec(TINY).double()


def test_gradcheck_analysis_synthesis():
    c = double_codec()
    x = torch.rand(1, 3, 9, 7, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: c.synthesis(c.analysis(t), (9, 7)), (x,), rtol=1e-4, atol=1e-6)


def test_gradcheck_hyper_path():
    c = double_codec(1)
    y = torch.randn(1, TINY.n, 5, 3, dtype=torch.float64, requires_grad=True)

    def f(t):
        mu, sigma = c.hyper_synthesis(c.hyper_analysis(t), (5, 3))
        return mu, sigma

    assert torch.autograd.gradcheck(f, (y,), rtol=1e-4, atol=1e-6)


def test_gradcheck_rate_bits():
    torch.manual_seed(2)
    v = (torch.randn(20, dtype=torch.float64) * 2).requires_grad_()
    mu = torch.randn(20, dtype=torch.float64).requires_grad_()
    sigma = (torch.rand(20, dtype=torch.float64) + 0.3).requires_grad_()
    assert torch.autograd.gradcheck(lambda a, b, c_: codec.rate_bits(a, b, c_)[0], (v, mu, sigma), rtol=1e-4)


def test_lower_bound_gradient_rule():
    x = torch.tensor([0.5, -1.0, -1.0], requires_grad=True)
    out = codec.lower_bound(x, 0.0)
    (out * torch.tensor([1.0, 1.0, -1.0])).sum().backward()
    # below the bound only a gradient that pushes x upward survives
    assert x.grad.tolist() == [1.0, 0.0, -1.0]


def test_forward_train_keys_and_determinism():
    c = codec.Codec(TINY)
    x = torch.rand(2, 3, 20, 13)
    a = c.forward_train(x, generator=torch.Generator().manual_seed(3))
    b = c.forward_train(x, generator=torch.Generator().manual_seed(3))
    assert a["x_hat"].shape == x.shape
    assert torch.equal(a["bits"], b["bits"])
    torch.testing.assert_close(a["bits"], a["y_bits"] + a["z_bits"])
