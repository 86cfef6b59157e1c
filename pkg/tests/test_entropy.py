import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from compass import bitstream, entropy
from compass.entropy import TOTAL


def shared_gaussian_table(sigma, support=entropy.DEFAULT_SUPPORT):
    pmf = entropy.gaussian_pmf(np.zeros(1), np.array([sigma]), support)[0]
    return entropy.cdf_from_pmf(pmf, support)


def check_table_invariants(table):
    cum = np.atleast_2d(table.cum)
    assert (cum[:, 0] == 0).all()
    assert (cum[:, -1] == TOTAL).all()
    assert (np.diff(cum, axis=-1) >= 1).all()
    assert cum.shape[-1] == 2 * table.support + 3


def test_empty_stream_is_fixed_flush():
    table = shared_gaussian_table(2.0)
    data = entropy.encode_symbols(np.array([], dtype=np.int64), table)
    assert len(data) == 4
    assert entropy.decode_symbols(data, table, 0).size == 0


def test_floor_sigma_puts_mass_on_zero():
    table, centers = entropy.build_cdf(np.zeros(1), np.full(1, 1e-6))
    freqs = table.freqs()[0]
    zero = table.support
    assert freqs[zero] == TOTAL - (freqs.size - 1)
    assert (np.delete(freqs, zero) == 1).all()
    assert centers[0] == 0


@pytest.mark.parametrize("sigma", [1e-6, 0.05, 0.3, 1.0, 3.7, 20.0, 200.0])
def test_build_cdf_invariants(sigma):
    table, _ = entropy.build_cdf(np.array([0.0, 0.4, -7.6, 70.2]), np.full(4, sigma))
    check_table_invariants(table)


@pytest.mark.parametrize("sigma", [0.2, 0.9, 2.5, 11.0, 80.0])
def test_symmetric_table(sigma):
    freqs = entropy.build_cdf(np.zeros(1), np.array([sigma]))[0].freqs()[0]
    body = freqs[:-1]
    assert np.abs(body - body[::-1]).max() <= 1


def test_table_centred_on_rounded_mean():
    mu = np.array([2.5, -2.5, 0.49, -0.5, 3.2])
    _, centers = entropy.build_cdf(mu, np.ones(5))
    np.testing.assert_array_equal(centers, [3, -3, 0, -1, 3])


def test_quantize_pmf_deficit_goes_to_largest_slot():
    pmf = np.array([0.25, 0.5, 0.25])
    freq = entropy.quantize_pmf(pmf)
    # escape slot gets the minimum of 1, so the largest slot gives one back
    np.testing.assert_array_equal(freq, [16384, 32767, 16384, 1])


def test_round_trip_10k_random_symbols():
    rng = np.random.default_rng(0)
    mu = rng.normal(0, 10, 10_000)
    sigma = np.exp(rng.uniform(np.log(0.05), np.log(40), 10_000))
    table, centers = entropy.build_cdf(mu, sigma)
    values = entropy.round_half_away(mu + sigma * rng.standard_normal(10_000)).astype(np.int64)
    data = entropy.encode_symbols(values - centers, table)
    np.testing.assert_array_equal(entropy.decode_symbols(data, table, values.size) + centers, values)


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(-200, 200), max_size=40), st.floats(0.1, 30.0))
def test_round_trip_random_sequences(symbols, sigma):
    table = shared_gaussian_table(sigma)
    s = np.array(symbols, dtype=np.int64)
    data = entropy.encode_symbols(s, table)
    np.testing.assert_array_equal(entropy.decode_symbols(data, table, s.size), s)
    assert 8 * len(data) <= entropy.ideal_bits(s, table) * 1.02 + 32 * 8


def test_escape_coding_extremes():
    table = shared_gaussian_table(1.0)
    s = np.array([65, -65, 66, 1000, -123456, 2**30, -(2**30), 0, 64, -64])
    data = entropy.encode_symbols(s, table)
    np.testing.assert_array_equal(entropy.decode_symbols(data, table, s.size), s)
    with pytest.raises(ValueError):
        entropy.encode_symbols(np.array([2**40]), table)


def test_ideal_bits_matches_coded_length():
    rng = np.random.default_rng(3)
    table = shared_gaussian_table(4.0)
    s = np.rint(rng.normal(0, 4.0, 20_000)).astype(np.int64)
    coded = 8 * len(entropy.encode_symbols(s, table))
    ideal = entropy.ideal_bits(s, table)
    assert ideal <= coded <= ideal * 1.01 + 64


def test_shannon_efficiency_100k():
    sigma = 3.0
    rng = np.random.default_rng(1)
    pmf = entropy.gaussian_pmf(np.zeros(1), np.array([sigma]), 64)[0]
    h = -np.sum(pmf * np.log2(pmf))
    s = rng.choice(np.arange(-64, 65), size=100_000, p=pmf / pmf.sum())
    bits = 8 * len(entropy.encode_symbols(s, entropy.cdf_from_pmf(pmf, 64)))
    assert abs(bits / (s.size * h) - 1) < 0.02


def test_per_element_table_count_mismatch():
    table, _ = entropy.build_cdf(np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        entropy.encode_symbols(np.zeros(4, dtype=np.int64), table)
    with pytest.raises(ValueError):
        entropy.decode_symbols(b"\0" * 8, table, 2)


def test_truncated_stream_detected():
    rng = np.random.default_rng(5)
    table = shared_gaussian_table(20.0)
    s = rng.integers(-40, 40, 2000)
    data = entropy.encode_symbols(s, table)
    with pytest.raises(entropy.DecodeError):
        entropy.decode_symbols(data[: len(data) // 2], table, s.size)


def test_gaussian_pmf_matches_scipy():
    offsets = np.array([0.0, 0.3, -0.45])
    sig = np.array([0.7, 2.0, 5.0])
    got = entropy.gaussian_pmf(offsets, sig, 8)
    s = np.arange(-8, 9)
    want = norm.cdf((s[None] + 0.5 - offsets[:, None]) / sig[:, None]) - norm.cdf(
        (s[None] - 0.5 - offsets[:, None]) / sig[:, None]
    )
    np.testing.assert_allclose(got, want, atol=1e-12)


# --- container ------------------------------------------------------------------


def sample_stream(n=3, seed=0):
    rng = np.random.default_rng(seed)
    subs = [
        bitstream.pack_substream(rng.bytes(int(rng.integers(0, 30))), rng.bytes(int(rng.integers(0, 90))))
        for _ in range(n)
    ]
    dims = [(int(rng.integers(1, 500)), int(rng.integers(1, 500))) for _ in range(n)]
    return subs, dims


def test_pack_layout_is_big_endian():
    subs, dims = sample_stream(1)
    data = bitstream.pack(subs, [(300, 7)], quality=5)
    assert data[:4] == b"CMPS"
    assert data[4:7] == bytes([1, 1, 5])
    assert data[7:11] == bytes([0x01, 0x2C, 0x00, 0x07])
    assert int.from_bytes(data[11:15], "big") == len(subs[0])
    assert int.from_bytes(data[15:19], "big") == zlib.adler32(subs[0])
    assert data[bitstream.header_size(1):] == subs[0]


@pytest.mark.parametrize("n", [1, 2, 4])
def test_unpack_inverts_pack(n):
    subs, dims = sample_stream(n, seed=n)
    s = bitstream.unpack(bitstream.pack(subs, dims, quality=9))
    assert s.substreams == subs and s.dims == dims and s.quality == 9 and s.num_layers == n


def test_extract_prefix():
    subs, dims = sample_stream(3)
    full = bitstream.pack(subs, dims, 2)
    assert bitstream.extract_prefix(full, 2) == full
    p = bitstream.unpack(bitstream.extract_prefix(full, 0))
    assert p.substreams == subs[:1] and p.dims == dims[:1] and p.quality == 2
    with pytest.raises(bitstream.BitstreamError):
        bitstream.extract_prefix(full, 3)


def test_substream_split():
    sub = bitstream.pack_substream(b"zz", b"yyy")
    assert bitstream.split_substream(sub) == (b"zz", b"yyy")
    with pytest.raises(bitstream.BitstreamError):
        bitstream.split_substream(b"\0\0\0\x09ab")


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing", "flip"])
def test_corruption_rejected(mutate):
    subs, dims = sample_stream(2, seed=11)
    subs = [s + b"payload" for s in subs]
    data = bytearray(bitstream.pack(subs, dims))
    if mutate == "magic":
        data[0] ^= 1
    elif mutate == "version":
        data[4] = 9
    elif mutate == "truncate":
        data = data[:-3]
    elif mutate == "trailing":
        data += b"x"
    else:
        data[-2] ^= 0x40
    with pytest.raises(bitstream.BitstreamError):
        bitstream.unpack(bytes(data))


def test_pack_rejects_bad_meta():
    with pytest.raises(ValueError):
        bitstream.pack([b""], [(0, 4)])
    with pytest.raises(ValueError):
        bitstream.pack([b"", b""], [(4, 4)])
    with pytest.raises(ValueError):
        bitstream.pack([b""], [(4, 4)], quality=256)
