"""Layered encode/decode.

Layer 0 codes the smallest image with the base-layer codec. Every
enhancement layer predicts its image from the previous reconstruction
(shared LIFF or bicubic), codes the residual with the shared residual codec
and adds the decoded residual back. Reconstructions are clamped to [0, 1];
the encoder runs the decoder's arithmetic on its own quantized latents so
both sides produce identical images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import bitstream, entropy
from .codec import (
    HYPER_STAGES,
    Codec,
    factorized_bits,
    latent_dims,
    pad_plan,
    rate_bits,
    round_half_away,
)
from .config import ModelConfig
from .liff import LIFF
from .resample import bicubic_resize_tensor

PSNR_CAP = 100.0


class CompassModel(nn.Module):
    """Base-layer codec plus one LIFF and one residual codec shared by all ELs."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg if cfg is not None else ModelConfig()
        self.bl = Codec(self.cfg.bl)
        self.liff = LIFF(self.cfg.liff)
        self.rc = Codec(self.cfg.rc)

    @property
    def predictor(self) -> str:
        return self.cfg.predictor

    def predict(self, prev: torch.Tensor, dims: tuple[int, int]) -> torch.Tensor:
        if self.cfg.predictor == "bicubic":
            return bicubic_resize_tensor(prev, dims)
        return self.liff(prev, dims)


def validate_dims(dims) -> list[tuple[int, int]]:
    dims = [(int(h), int(w)) for h, w in dims]
    if not dims:
        raise ValueError("at least one layer required")
    for (h0, w0), (h1, w1) in zip(dims, dims[1:]):
        if h1 < h0 or w1 < w0:
            raise ValueError(f"layer dims must be nondecreasing, got {dims}")
    return dims


def to_tensor(img) -> torch.Tensor:
    """H x W x 3 array (or 3 x H x W / 1 x 3 x H x W tensor) -> 1 x 3 x H x W float32."""
    if isinstance(img, torch.Tensor):
        t = img.detach().to(torch.float32)
        if t.dim() == 3:
            t = t.unsqueeze(0)
        return t
    a = np.asarray(img, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).unsqueeze(0)


def to_image(t: torch.Tensor) -> np.ndarray:
    return t[0].permute(1, 2, 0).contiguous().numpy()


# --- single-layer coding -----------------------------------------------------------


def _z_tables(codec: Codec, z_shape, support: int) -> entropy.CdfTable:
    c, h, w = z_shape
    per_channel = entropy.cdf_from_pmf(codec.prior.pmf_table(support), support)
    return entropy.CdfTable(np.repeat(per_channel.cum, h * w, axis=0), support)


def _y_tables(mu: torch.Tensor, sigma: torch.Tensor, support: int):
    return entropy.build_cdf(mu.double().numpy(), sigma.double().numpy(), support)


@dataclass
class LayerCode:
    substream: bytes
    x_hat: torch.Tensor
    estimate_bits: float
    y_symbols: int
    z_symbols: int


@torch.no_grad()
def code_image(codec: Codec, x: torch.Tensor, support: int = entropy.DEFAULT_SUPPORT) -> LayerCode:
    dims = tuple(x.shape[-2:])
    y = codec.analysis(x)
    # + 0.0 folds -0.0 into 0.0 so the decoder's integer path matches exactly
    y_hat = round_half_away(y) + 0.0
    z_hat = round_half_away(codec.hyper_analysis(y)) + 0.0
    mu, sigma = codec.hyper_synthesis(z_hat, y.shape[-2:])

    z_int = z_hat[0].to(torch.int64).numpy().reshape(-1)
    z_enc = entropy.RangeEncoder()
    entropy.encode_into(z_enc, z_int, _z_tables(codec, z_hat.shape[1:], support))

    table, centers = _y_tables(mu[0], sigma[0], support)
    y_int = y_hat[0].to(torch.int64).numpy().reshape(-1)
    y_enc = entropy.RangeEncoder()
    entropy.encode_into(y_enc, y_int - centers, table)

    estimate = float(rate_bits(y_hat, mu, sigma)[0].double()) + float(factorized_bits(z_hat, codec.prior)[0].double())
    x_hat = codec.synthesis(y_hat, dims)
    sub = bitstream.pack_substream(z_enc.finish(), y_enc.finish())
    return LayerCode(sub, x_hat, estimate, y_int.size, z_int.size)


@torch.no_grad()
def decode_image(codec: Codec, sub: bytes, dims: tuple[int, int], support: int = entropy.DEFAULT_SUPPORT) -> torch.Tensor:
    z_bytes, y_bytes = bitstream.split_substream(sub)
    yh, yw = latent_dims(dims, codec.cfg)
    zh, zw = pad_plan((yh, yw), HYPER_STAGES).out_dims
    z_shape = (codec.cfg.m, zh, zw)
    z_count = int(np.prod(z_shape))
    z_int = entropy.decode_symbols(z_bytes, _z_tables(codec, z_shape, support), z_count)
    z_hat = torch.from_numpy(z_int.reshape(1, *z_shape)).to(torch.float32)
    mu, sigma = codec.hyper_synthesis(z_hat, (yh, yw))
    table, centers = _y_tables(mu[0], sigma[0], support)
    y_int = entropy.decode_symbols(y_bytes, table, len(centers)) + centers
    y_hat = torch.from_numpy(y_int.reshape(1, codec.cfg.n, yh, yw)).to(torch.float32)
    return codec.synthesis(y_hat, dims)


# --- layered coding ----------------------------------------------------------------------


@dataclass
class EncodeResult:
    stream: bytes
    recons: list[np.ndarray]
    estimate_bits: list[float]
    payload_bits: list[int]
    predictions: list[np.ndarray] = field(default_factory=list)


@torch.no_grad()
def encode(images, model: CompassModel, quality: int = 0) -> EncodeResult:
    """Code images I^0..I^K (smallest first) into one scalable stream."""
    model.eval()
    xs = [to_tensor(im) for im in images]
    dims = validate_dims([tuple(x.shape[-2:]) for x in xs])
    subs, recons, est, preds = [], [], [], []
    prev = None
    for k, x in enumerate(xs):
        if k == 0:
            code = code_image(model.bl, x)
            rec = code.x_hat.clamp(0.0, 1.0)
        else:
            pred = model.predict(prev, dims[k])
            code = code_image(model.rc, x - pred)
            rec = (pred + code.x_hat).clamp(0.0, 1.0)
            preds.append(to_image(pred))
        subs.append(code.substream)
        est.append(code.estimate_bits)
        recons.append(to_image(rec))
        prev = rec
    stream = bitstream.pack(subs, dims, quality)
    return EncodeResult(stream, recons, est, [8 * len(s) for s in subs], preds)


@torch.no_grad()
def decode(stream: bytes, model: CompassModel, up_to: int | None = None) -> list[np.ndarray]:
    """Reconstruct layers 0..up_to (default: all layers in the stream)."""
    model.eval()
    s = bitstream.unpack(stream)
    if up_to is None:
        up_to = s.num_layers - 1
    if not 0 <= up_to < s.num_layers:
        raise bitstream.BitstreamError(f"layer {up_to} requested but stream has {s.num_layers} layers")
    recons = []
    prev = None
    for k in range(up_to + 1):
        dims = s.dims[k]
        if k == 0:
            rec = decode_image(model.bl, s.substreams[0], dims).clamp(0.0, 1.0)
        else:
            pred = model.predict(prev, dims)
            rec = (pred + decode_image(model.rc, s.substreams[k], dims)).clamp(0.0, 1.0)
        recons.append(to_image(rec))
        prev = rec
    return recons


# --- rate/distortion bookkeeping -------------------------------------------------------


def mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def psnr_from_mse(m: float) -> float:
    if m <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(m))


@dataclass
class RDRecord:
    layer: int
    height: int
    width: int
    bits: int
    acc_bits: int
    bpp: float  # accumulated bits over this layer's pixel count
    mse: float
    psnr: float


def layer_rd(stream: bytes, originals, model: CompassModel | None = None, recons=None) -> list[RDRecord]:
    """Per-layer bits (substream sizes), accumulated bits, bpp and distortion."""
    s = bitstream.unpack(stream)
    if recons is None:
        if model is None:
            raise ValueError("either a model or reconstructions are required")
        recons = decode(stream, model)
    if len(originals) < len(recons):
        raise ValueError("one original per decoded layer required")
    records = []
    acc = 0
    for k, (rec, orig) in enumerate(zip(recons, originals)):
        bits = 8 * len(s.substreams[k])
        acc += bits
        h, w = s.dims[k]
        m = mse(rec, orig)
        records.append(RDRecord(k, h, w, bits, acc, acc / (h * w), m, psnr_from_mse(m)))
    return records
