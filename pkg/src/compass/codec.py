"""Mean-scale hyperprior image codec with convolutional-layer-wise padding.

The same network class serves as the base-layer image compressor and the
shared enhancement-layer residual compressor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CodecConfig

SIGMA_MIN = 1e-6
P_MIN = 2.0 ** -30
ENCODER_STAGES = 4
HYPER_STAGES = 2


@dataclass(frozen=True)
class PadPlan:
    """Per-stage replicate padding for a stack of stride-2 convolutions.

    ``dims[s]`` is the input size of stage ``s`` before padding and
    ``dims[-1]`` the final latent size; ``flags[s]`` is (pad_h, pad_w).
    """

    flags: tuple[tuple[int, int], ...]
    dims: tuple[tuple[int, int], ...]

    @property
    def out_dims(self) -> tuple[int, int]:
        return self.dims[-1]


def pad_plan(dims: tuple[int, int], stages: int) -> PadPlan:
    h, w = int(dims[0]), int(dims[1])
    if h < 1 or w < 1:
        raise ValueError(f"dimensions must be positive, got {dims!r}")
    if stages < 1:
        raise ValueError("stages must be >= 1")
    flags = []
    sizes = [(h, w)]
    for _ in range(stages):
        ph, pw = h % 2, w % 2
        flags.append((ph, pw))
        h, w = (h + ph) // 2, (w + pw) // 2
        sizes.append((h, w))
    return PadPlan(tuple(flags), tuple(sizes))


def lump_dims(dims: tuple[int, int], multiple: int) -> tuple[int, int]:
    """Input size after padding once, up front, to a multiple of ``multiple``."""
    return tuple(-(-int(d) // multiple) * multiple for d in dims)


def latent_dims(dims: tuple[int, int], cfg: CodecConfig) -> tuple[int, int]:
    if cfg.padding == "lump":
        dims = lump_dims(dims, cfg.lump_multiple)
    return pad_plan(dims, ENCODER_STAGES).out_dims


def replicate_pad(x: torch.Tensor, ph: int, pw: int) -> torch.Tensor:
    # bottom/right only
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph), mode="replicate")


# --- quantization --------------------------------------------------------------


def round_half_away(v: torch.Tensor) -> torch.Tensor:
    return torch.sign(v) * torch.floor(torch.abs(v) + 0.5)


def quantize_round(v: torch.Tensor) -> torch.Tensor:
    """Round half away from zero; the backward pass is the identity."""
    return v + (round_half_away(v) - v).detach()


def add_uniform_noise(v: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    u = torch.rand(v.shape, generator=generator, dtype=v.dtype, device=v.device) - 0.5
    return v + u


# --- rate ------------------------------------------------------------------------


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * (1.0 / math.sqrt(2.0)))


def gaussian_likelihood(v: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Probability mass of the unit bin around ``v`` under N(mu, sigma^2)."""
    d = torch.abs(v - mu)
    upper = _std_normal_cdf((0.5 - d) / sigma)
    lower = _std_normal_cdf((-0.5 - d) / sigma)
    return upper - lower


def bits_from_likelihood(p: torch.Tensor) -> torch.Tensor:
    return -torch.log2(torch.clamp(p, min=P_MIN))


def rate_bits(v: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor):
    """Total bits and the per-element bit map of ``v`` under the Gaussian model."""
    bitmap = bits_from_likelihood(gaussian_likelihood(v, mu, sigma))
    return bitmap.sum(), bitmap


class _LowerBound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp(x, min=bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        # let gradients through below the bound only if they push x upward
        pass_through = (x >= ctx.bound) | (grad < 0)
        return grad * pass_through.to(grad.dtype), None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


# --- layers ----------------------------------------------------------------------


class GDN(nn.Module):
    """Generalized divisive normalization (inverse=True gives IGDN)."""

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = 1e-6, gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_min = beta_min
        self.pedestal = 2.0 ** -18
        self.beta = nn.Parameter(torch.sqrt(torch.ones(channels) + self.pedestal))
        self.gamma = nn.Parameter(torch.sqrt(gamma_init * torch.eye(channels) + self.pedestal))

    def forward(self, x):
        c = x.shape[1]
        beta = lower_bound(self.beta, (self.beta_min + self.pedestal) ** 0.5) ** 2 - self.pedestal
        gamma = lower_bound(self.gamma, self.pedestal ** 0.5) ** 2 - self.pedestal
        norm = F.conv2d(x * x, gamma.view(c, c, 1, 1), beta)
        norm = torch.sqrt(norm)
        return x * norm if self.inverse else x / norm


def _conv(cin, cout, k=5, stride=2):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _deconv(cin, cout, k=5, stride=2):
    return nn.ConvTranspose2d(cin, cout, k, stride=stride, padding=k // 2, output_padding=stride - 1)


class StridedStack(nn.Module):
    """Stride-2 convolutions with optional per-stage replicate padding."""

    def __init__(self, convs, acts, layerwise: bool):
        super().__init__()
        self.convs = nn.ModuleList(convs)
        self.acts = nn.ModuleList(acts)
        self.layerwise = layerwise

    def forward(self, x):
        plan = pad_plan(x.shape[-2:], len(self.convs))
        for s, (conv, act) in enumerate(zip(self.convs, self.acts)):
            if self.layerwise:
                x = replicate_pad(x, *plan.flags[s])
            x = act(conv(x))
        return x


class UpStack(nn.Module):
    """Transposed convolutions that crop each output to the mirrored plan."""

    def __init__(self, deconvs, acts, layerwise: bool):
        super().__init__()
        self.deconvs = nn.ModuleList(deconvs)
        self.acts = nn.ModuleList(acts)
        self.layerwise = layerwise

    def forward(self, x, target: tuple[int, int]):
        plan = pad_plan(target, len(self.deconvs))
        if self.layerwise and tuple(x.shape[-2:]) != plan.out_dims:
            raise ValueError(f"latent dims {tuple(x.shape[-2:])} inconsistent with target {tuple(target)}")
        n = len(self.deconvs)
        for s, (deconv, act) in enumerate(zip(self.deconvs, self.acts)):
            x = act(deconv(x))
            if self.layerwise:
                h, w = plan.dims[n - 1 - s]
                x = x[..., :h, :w]
        return x


class FactorizedPrior(nn.Module):
    """Learned non-parametric per-channel density for the hyper latent.

    The cumulative is a monotone per-channel network; the bin mass of an
    integer v is ``c(v + 1/2) - c(v - 1/2)``.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, v: torch.Tensor) -> torch.Tensor:
        # v: (channels, 1, n)
        logits = v
        for i in range(len(self.matrices)):
            logits = torch.matmul(F.softplus(self.matrices[i]), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def likelihood(self, z: torch.Tensor) -> torch.Tensor:
        b, c, h, w = z.shape
        v = z.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return p.reshape(c, b, h, w).permute(1, 0, 2, 3)

    def pmf_table(self, support: int) -> np.ndarray:
        """Per-channel bin masses for integers in [-support, support], float64."""
        s = torch.arange(-support, support + 1, dtype=self.biases[0].dtype)
        v = s.view(1, 1, -1).expand(self.channels, 1, -1)
        with torch.no_grad():
            lower = self.logits_cumulative(v - 0.5)
            upper = self.logits_cumulative(v + 0.5)
            sign = -torch.sign(lower + upper)
            p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return p[:, 0, :].double().numpy()


def factorized_bits(z: torch.Tensor, prior: FactorizedPrior):
    bitmap = bits_from_likelihood(prior.likelihood(z))
    return bitmap.sum(), bitmap


# --- codec -----------------------------------------------------------------------


class Codec(nn.Module):
    """Analysis/synthesis transforms, hyper transforms and the z prior."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        n, m, mid = cfg.n, cfg.m, cfg.width
        layerwise = cfg.padding == "layerwise"
        self.g_a = StridedStack(
            [_conv(3, mid), _conv(mid, mid), _conv(mid, mid), _conv(mid, n)],
            [GDN(mid), GDN(mid), GDN(mid), nn.Identity()],
            layerwise,
        )
        self.g_s = UpStack(
            [_deconv(n, mid), _deconv(mid, mid), _deconv(mid, mid), _deconv(mid, 3)],
            [GDN(mid, inverse=True), GDN(mid, inverse=True), GDN(mid, inverse=True), nn.Identity()],
            layerwise,
        )
        self.h_a_head = nn.Conv2d(n, n, 3, padding=1)
        self.h_a = StridedStack(
            [_conv(n, n), _conv(n, m)],
            [nn.LeakyReLU(inplace=True), nn.Identity()],
            True,
        )
        self.h_s = UpStack(
            [_deconv(m, n), _deconv(n, n)],
            [nn.LeakyReLU(inplace=True), nn.LeakyReLU(inplace=True)],
            True,
        )
        self.h_s_tail = nn.Conv2d(n, 2 * n, 3, padding=1)
        with torch.no_grad():
            # scales start well above the floor
            self.h_s_tail.bias[n:].fill_(1.0)
            first, last = self.g_a.convs[0], self.g_s.deconvs[-1]
            first.weight.mul_(cfg.init_gain)
            first.bias.mul_(cfg.init_gain)
            last.weight.div_(cfg.init_gain)
            last.bias.div_(cfg.init_gain)
        self.prior = FactorizedPrior(m, cfg.prior_filters)

    # transforms -------------------------------------------------------------

    def analysis(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != 3:
            raise ValueError(f"expected 3 input channels, got {x.shape[1]}")
        if self.cfg.padding == "lump":
            th, tw = lump_dims(x.shape[-2:], self.cfg.lump_multiple)
            x = replicate_pad(x, th - x.shape[-2], tw - x.shape[-1])
        return self.g_a(x)

    def synthesis(self, y_hat: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
        target = (int(target[0]), int(target[1]))
        expected = latent_dims(target, self.cfg)
        if tuple(y_hat.shape[-2:]) != expected:
            raise ValueError(f"latent dims {tuple(y_hat.shape[-2:])} do not match target {target} (expected {expected})")
        if self.cfg.padding == "lump":
            padded = lump_dims(target, self.cfg.lump_multiple)
            x = self.g_s(y_hat, padded)
            return x[..., : target[0], : target[1]]
        return self.g_s(y_hat, target)

    def hyper_analysis(self, y: torch.Tensor) -> torch.Tensor:
        return self.h_a(F.leaky_relu(self.h_a_head(y)))

    def hyper_synthesis(self, z_hat: torch.Tensor, y_dims: tuple[int, int]):
        """Return (mu, sigma), each shaped like y."""
        p = self.h_s_tail(self.h_s(z_hat, y_dims))
        mu, s = p.chunk(2, dim=1)
        return mu, lower_bound(s, SIGMA_MIN)

    # composite passes -------------------------------------------------------

    def forward_train(self, x, latent: str = "rounded", generator=None):
        """Differentiable pass: noisy latents for the rate, ``latent`` for the decode."""
        y = self.analysis(x)
        z = self.hyper_analysis(y)
        z_tilde = add_uniform_noise(z, generator)
        mu, sigma = self.hyper_synthesis(z_tilde, y.shape[-2:])
        y_tilde = add_uniform_noise(y, generator)
        y_bits, _ = rate_bits(y_tilde, mu, sigma)
        z_bits, _ = factorized_bits(z_tilde, self.prior)
        y_dec = quantize_round(y) if latent == "rounded" else y_tilde
        x_hat = self.synthesis(y_dec, x.shape[-2:])
        return {"x_hat": x_hat, "y_bits": y_bits, "z_bits": z_bits, "bits": y_bits + z_bits}
