import numpy as np
import pytest
import torch

from compass import bitstream
from compass.entropy import DecodeError
from compass.pipeline import (
    PSNR_CAP,
    decode,
    encode,
    layer_rd,
    psnr_from_mse,
    to_tensor,
    validate_dims,
)
from conftest import random_model, random_pyramid


@pytest.mark.parametrize("K", [0, 1, 2, 3])
@pytest.mark.parametrize("predictor", ["liff", "bicubic"])
def test_round_trip_bit_exact(K, predictor, rng):
    model = random_model(seed=K, gain=30.0, predictor=predictor)
    for _ in range(2):
        pyr = random_pyramid(rng, K)
        res = encode(pyr, model)
        dec = decode(res.stream, model)
        assert len(dec) == K + 1
        for a, b in zip(res.recons, dec):
            assert a.tobytes() == b.tobytes()
            assert a.min() >= 0 and a.max() <= 1


def test_k0_is_base_layer_only(rng):
    model = random_model(gain=10.0)
    pyr = random_pyramid(rng, 2)
    s = bitstream.unpack(encode(pyr, model).stream)
    s0 = bitstream.unpack(encode(pyr[:1], model).stream)
    assert s0.num_layers == 1 and s0.substreams[0] == s.substreams[0]


def test_prefix_decodes_identically(rng):
    model = random_model(seed=4, gain=20.0)
    pyr = random_pyramid(rng, 3)
    res = encode(pyr, model)
    full = decode(res.stream, model)
    for k in range(4):
        part = decode(bitstream.extract_prefix(res.stream, k), model)
        assert [p.tobytes() for p in part] == [f.tobytes() for f in full[: k + 1]]
        assert [p.tobytes() for p in decode(res.stream, model, up_to=k)] == [p.tobytes() for p in part]


def test_adding_a_layer_keeps_earlier_bytes(rng):
    model = random_model(seed=5, gain=20.0)
    pyr = random_pyramid(rng, 3)
    short = bitstream.unpack(encode(pyr[:3], model).stream)
    long = bitstream.unpack(encode(pyr, model).stream)
    assert long.substreams[:3] == short.substreams


def test_spec_chain_example():
    model = random_model(seed=6, gain=10.0)
    rng = np.random.default_rng(0)
    pyr = [rng.random((d, d, 3)) for d in (48, 96, 120)]
    res = encode(pyr, model)
    s = bitstream.unpack(res.stream)
    assert s.num_layers == 3 and s.dims == [(48, 48), (96, 96), (120, 120)]


def test_zero_residual_layer():
    """An EL whose target equals its prediction codes a residual that decodes to the RC's zero response."""
    model = random_model(seed=7)
    rng = np.random.default_rng(1)
    base = rng.random((20, 24, 3))
    res0 = encode([base], model)
    with torch.no_grad():
        pred = model.predict(to_tensor(res0.recons[0]), (33, 40))
        y = model.rc.analysis(torch.zeros_like(pred))
        zero_resp = model.rc.synthesis(torch.zeros_like(y), (33, 40))
    target = pred[0].permute(1, 2, 0).numpy()
    res = encode([base, target], model)
    want = (pred + zero_resp).clamp(0, 1)[0].permute(1, 2, 0).numpy()
    assert torch.count_nonzero(torch.round(y)) == 0
    np.testing.assert_array_equal(res.recons[1], want)


@pytest.mark.parametrize("gain", [1.0, 3.0])
def test_rate_estimate_brackets_payload(rng, gain):
    # far-tail latents (much larger gains) escape-code below the 30-bit clamp of the estimate
    model = random_model(seed=8, gain=gain)
    for K in range(4):
        res = encode(random_pyramid(rng, K), model)
        for est, bits in zip(res.estimate_bits, res.payload_bits):
            assert est <= bits <= 1.02 * est + 256


def test_dims_validation():
    with pytest.raises(ValueError):
        validate_dims([(10, 10), (9, 12)])
    with pytest.raises(ValueError):
        validate_dims([])
    model = random_model()
    with pytest.raises(ValueError):
        encode([np.zeros((10, 10, 3)), np.zeros((8, 12, 3))], model)


def test_decode_errors(rng):
    model = random_model(gain=10.0)
    res = encode(random_pyramid(rng, 1), model)
    with pytest.raises(bitstream.BitstreamError):
        decode(res.stream, model, up_to=2)
    bad = bytearray(res.stream)
    bad[-1] ^= 0xFF
    with pytest.raises(bitstream.BitstreamError):
        decode(bytes(bad), model)
    # a consistent header around a gutted payload is caught by the symbol decoder
    s = bitstream.unpack(res.stream)
    gutted = bitstream.pack([s.substreams[0][:5]], s.dims[:1])
    with pytest.raises((DecodeError, bitstream.BitstreamError)):
        decode(gutted, model)


def test_layer_rd_bookkeeping(rng):
    model = random_model(seed=9, gain=15.0)
    pyr = random_pyramid(rng, 2)
    res = encode(pyr, model)
    recs = layer_rd(res.stream, pyr, model=model)
    assert [r.acc_bits for r in recs] == list(np.cumsum(res.payload_bits))
    for r, (h, w) in zip(recs, [p.shape[:2] for p in pyr]):
        assert r.bpp == r.acc_bits / (h * w)
    same = layer_rd(res.stream, pyr, recons=res.recons)
    assert [r.psnr for r in same] == [r.psnr for r in recs]


def test_bpp_example_and_psnr_cap():
    # 98304 accumulated bytes over a 768 x 512 layer
    assert 98304 * 8 / (768 * 512) == 2.0
    assert psnr_from_mse(0.0) == PSNR_CAP
    assert psnr_from_mse(1e-30) == PSNR_CAP
    assert abs(psnr_from_mse(0.25) - 6.0206) < 1e-4
    img = np.random.default_rng(0).random((6, 7, 3))
    model = random_model()
    res = encode([img], model)
    rec = layer_rd(res.stream, [res.recons[0]], recons=res.recons)[0]
    assert rec.psnr == PSNR_CAP


def test_lump_padding_round_trip(rng):
    model = random_model(seed=10, gain=20.0, padding="lump")
    pyr = random_pyramid(rng, 2)
    res = encode(pyr, model)
    assert [d.tobytes() for d in decode(res.stream, model)] == [r.tobytes() for r in res.recons]
