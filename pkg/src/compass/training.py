"""Combined rate-distortion training.

Rates are bits per pixel of the layer being coded, computed on noisy
latents. Distortions are MSE on the 0..255 scale, computed on reconstructions
decoded from rounded latents with straight-through gradients. The base layer
is frozen in every enhancement-layer stage and contributes no loss terms.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint
from .codec import add_uniform_noise, factorized_bits, quantize_round, rate_bits, round_half_away
from .config import LATENT_MODES
from .pipeline import CompassModel
from .resample import bicubic_resize

log = logging.getLogger(__name__)

STAGES = ("bl", "pretrain-liff", "pretrain-rc", "joint")
PIXEL_SCALE = 255.0**2


@dataclass
class TrainConfig:
    stage: str = "joint"
    lmbda: float = 0.01
    K: int = 1
    scale_min: float = 1.2
    scale_max: float = 2.0
    crop: int = 128
    batch: int = 8
    lr: float = 1e-4
    clip_norm: float = 1.0  # max global gradient norm; 0 disables
    plateau_patience: int = 10  # in units of `plateau_window` steps; 0 disables
    plateau_window: int = 50
    steps: int = 1000
    latent: str = "rounded"
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lmbda <= 0:
            raise ValueError("lambda must be positive")
        if self.latent not in LATENT_MODES:
            raise ValueError(f"latent must be one of {LATENT_MODES}")
        if self.K < 0 or (self.stage != "bl" and self.K < 1):
            raise ValueError("enhancement-layer stages need K >= 1")
        if not 1.0 <= self.scale_min <= self.scale_max:
            raise ValueError("need 1 <= scale_min <= scale_max")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --- data ----------------------------------------------------------------------------


def pyramid_dims(top: tuple[int, int], factors: Sequence[float]) -> list[tuple[int, int]]:
    """Dims of layers 0..K given the largest layer and per-adjacent-layer factors."""
    dims = [tuple(int(d) for d in top)]
    for f in reversed(list(factors)):
        h, w = dims[0]
        dims.insert(0, (max(1, int(round(h / f))), max(1, int(round(w / f)))))
    return dims


def sample_pyramid(image: np.ndarray, K: int, rng: np.random.Generator, crop: int | None = None,
                   scale_range=(1.2, 2.0), factors=None) -> list[np.ndarray]:
    """Random crop as I^K, bicubic-downscaled copies as I^0..I^{K-1}."""
    h, w = image.shape[:2]
    ch = min(h, crop) if crop else h
    cw = min(w, crop) if crop else w
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    largest = np.asarray(image[top : top + ch, left : left + cw], dtype=np.float64)
    if factors is None:
        factors = rng.uniform(scale_range[0], scale_range[1], size=K)
    dims = pyramid_dims((ch, cw), factors)
    out = [np.clip(bicubic_resize(largest, d), 0.0, 1.0) for d in dims[:-1]]
    out.append(largest)
    return out


def stack_layers(pyramids: list[list[np.ndarray]]) -> list[torch.Tensor]:
    """Batch a list of same-shaped pyramids into per-layer (B, 3, H, W) tensors."""
    layers = []
    for k in range(len(pyramids[0])):
        arr = np.stack([p[k] for p in pyramids]).astype(np.float32)
        layers.append(torch.from_numpy(arr.transpose(0, 3, 1, 2).copy()))
    return layers


class PyramidSampler:
    """Deterministic batches: batch ``step`` depends only on (seed, step)."""

    def __init__(self, images: list[np.ndarray], cfg: TrainConfig, K: int | None = None):
        if not images:
            raise ValueError("no training images")
        self.images = images
        self.cfg = cfg
        self.K = cfg.K if K is None else K
        self.crop = min([cfg.crop] + [min(im.shape[:2]) for im in images])

    def __call__(self, step: int) -> list[torch.Tensor]:
        rng = np.random.default_rng([self.cfg.seed, step])
        factors = rng.uniform(self.cfg.scale_min, self.cfg.scale_max, size=self.K)
        picks = rng.integers(0, len(self.images), size=self.cfg.batch)
        pyrs = [sample_pyramid(self.images[i], self.K, rng, self.crop, factors=factors) for i in picks]
        return stack_layers(pyrs)


class FixedPyramids:
    """Always returns the same batch (overfitting runs, evaluation)."""

    def __init__(self, pyramids: list[list[np.ndarray]]):
        self.layers = stack_layers(pyramids)

    def __call__(self, step: int) -> list[torch.Tensor]:
        return self.layers


def load_image_folder(folder) -> list[np.ndarray]:
    from .evalkit import list_images, read_image

    paths = list_images(folder)
    if not paths:
        raise FileNotFoundError(f"no images found in {folder}")
    return [read_image(p) for p in paths]


# --- losses ------------------------------------------------------------------------


@dataclass
class RDLoss:
    loss: torch.Tensor
    rates: list[torch.Tensor]
    dists: list[torch.Tensor]
    recons: list[torch.Tensor]


def noise_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, step, 7]).generate_state(1)[0]))


@torch.no_grad()
def base_layer_recon(model: CompassModel, x0: torch.Tensor) -> torch.Tensor:
    """The frozen BL's inference reconstruction (rounded latents, clamped)."""
    y_hat = round_half_away(model.bl.analysis(x0)) + 0.0
    return model.bl.synthesis(y_hat, x0.shape[-2:]).clamp(0.0, 1.0)


def clamp_unit(x: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] in the forward pass only.

    A plain clamp has zero gradient outside the range, so a layer whose
    output drifts out of [0, 1] everywhere can never recover.
    """
    return x + (x.clamp(0.0, 1.0) - x).detach()


def clamped_distortion(rec: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """``PIXEL_SCALE * MSE(clamp(rec), x)`` with the gradient of the unclamped MSE.

    The value matches what the decoder reconstructs. The gradient keeps
    pulling out-of-range pixels back in proportion to their overshoot, which
    neither a plain nor a straight-through clamp does when the target sits
    at 0 or 1.
    """
    full = torch.mean((rec - x) ** 2)
    clamped = torch.mean((rec.clamp(0.0, 1.0) - x) ** 2)
    return PIXEL_SCALE * (full + (clamped - full).detach())


def rate_term(codec, y: torch.Tensor, generator=None) -> torch.Tensor:
    """Bits of noisy y given the noisy-z hyperprior, plus bits of noisy z."""
    z_tilde = add_uniform_noise(codec.hyper_analysis(y), generator)
    mu, sigma = codec.hyper_synthesis(z_tilde, y.shape[-2:])
    y_tilde = add_uniform_noise(y, generator)
    return rate_bits(y_tilde, mu, sigma)[0] + factorized_bits(z_tilde, codec.prior)[0]


def combined_rd_loss(pyramid: list[torch.Tensor], model: CompassModel, lmbda: float,
                     latent: str = "rounded", generator=None) -> RDLoss:
    """Sum over enhancement layers of rate + lambda * distortion."""
    prev = base_layer_recon(model, pyramid[0])
    rates, dists, recons = [], [], [prev]
    loss = pyramid[0].new_zeros(())
    for x in pyramid[1:]:
        b, _, h, w = x.shape
        pred = model.predict(prev, (h, w))
        y = model.rc.analysis(x - pred)
        if latent == "rounded":
            r = rate_term(model.rc, y, generator) / (b * h * w)
            y_dec = quantize_round(y)
        else:
            # ablation: the decoder sees the same noisy latent the rate is measured on
            z_tilde = add_uniform_noise(model.rc.hyper_analysis(y), generator)
            mu, sigma = model.rc.hyper_synthesis(z_tilde, y.shape[-2:])
            y_dec = add_uniform_noise(y, generator)
            r = (rate_bits(y_dec, mu, sigma)[0] + factorized_bits(z_tilde, model.rc.prior)[0]) / (b * h * w)
        raw = pred + model.rc.synthesis(y_dec, (h, w))
        d = clamped_distortion(raw, x)
        rec = clamp_unit(raw)
        loss = loss + r + lmbda * d
        rates.append(r)
        dists.append(d)
        recons.append(rec)
        prev = rec
    return RDLoss(loss, rates, dists, recons)


def prediction_loss(pyramid: list[torch.Tensor], model: CompassModel) -> RDLoss:
    """LIFF pretraining objective: prediction MSE with the residual codec frozen."""
    prev = base_layer_recon(model, pyramid[0])
    dists, recons = [], [prev]
    loss = pyramid[0].new_zeros(())
    for x in pyramid[1:]:
        h, w = x.shape[-2:]
        pred = model.predict(prev, (h, w))
        d = PIXEL_SCALE * torch.mean((pred - x) ** 2)
        loss = loss + d
        dists.append(d)
        with torch.no_grad():
            y_hat = round_half_away(model.rc.analysis(x - pred)) + 0.0
            prev = (pred + model.rc.synthesis(y_hat, (h, w))).clamp(0.0, 1.0)
        recons.append(prev)
    return RDLoss(loss, [], dists, recons)


def base_layer_loss(pyramid: list[torch.Tensor], model: CompassModel, lmbda: float, generator=None) -> RDLoss:
    x = pyramid[0]
    b, _, h, w = x.shape
    out = model.bl.forward_train(x, "rounded", generator)
    r = out["bits"] / (b * h * w)
    d = clamped_distortion(out["x_hat"], x)
    return RDLoss(r + lmbda * d, [r], [d], [out["x_hat"]])


# --- training loop ----------------------------------------------------------------


def trainable_modules(model: CompassModel, stage: str):
    if stage == "bl":
        return [model.bl]
    if stage == "pretrain-liff":
        return [model.liff]
    if stage == "pretrain-rc":
        return [model.rc]
    return [model.liff, model.rc]


class Trainer:
    def __init__(self, model: CompassModel, cfg: TrainConfig, data: Callable[[int], list[torch.Tensor]]):
        self.model = model
        self.cfg = cfg
        self.data = data
        self.step_count = 0
        live = trainable_modules(model, cfg.stage)
        if model.predictor == "bicubic" and model.liff in live:
            live.remove(model.liff)
        for p in model.parameters():
            p.requires_grad_(False)
        self.names = []
        params = []
        for name, p in model.named_parameters():
            if any(p is q for m in live for q in m.parameters()):
                p.requires_grad_(True)
                self.names.append(name)
                params.append(p)
        if not params:
            raise ValueError(f"nothing to train in stage {cfg.stage!r} with predictor {model.predictor!r}")
        self.params = params
        self.optimizer = torch.optim.Adam(params, lr=cfg.lr)
        self.best = float("inf")
        self.bad_windows = 0
        self.window = []
        self.history: list[dict] = []

    def loss_at(self, step: int) -> RDLoss:
        batch = self.data(step)
        gen = noise_generator(self.cfg.seed, step)
        if self.cfg.stage == "bl":
            return base_layer_loss(batch, self.model, self.cfg.lmbda, gen)
        if self.cfg.stage == "pretrain-liff":
            return prediction_loss(batch, self.model)
        return combined_rd_loss(batch, self.model, self.cfg.lmbda, self.cfg.latent, gen)

    def step(self) -> dict:
        self.model.train()
        out = self.loss_at(self.step_count)
        self.optimizer.zero_grad(set_to_none=True)
        out.loss.backward()
        if self.cfg.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.params, self.cfg.clip_norm)
        self.optimizer.step()
        record = {"step": self.step_count, "L": float(out.loss.detach())}
        for k, r in enumerate(out.rates, start=1):
            record[f"R{k}"] = float(r.detach())
        for k, d in enumerate(out.dists, start=1):
            record[f"D{k}"] = float(d.detach())
        self.history.append(record)
        self.step_count += 1
        self._plateau(record["L"])
        return record

    def _plateau(self, loss: float) -> None:
        if self.cfg.plateau_patience <= 0:
            return
        self.window.append(loss)
        if len(self.window) < self.cfg.plateau_window:
            return
        mean = float(np.mean(self.window))
        self.window = []
        if mean < self.best:
            self.best = mean
            self.bad_windows = 0
            return
        self.bad_windows += 1
        if self.bad_windows > self.cfg.plateau_patience:
            for g in self.optimizer.param_groups:
                g["lr"] *= 0.5
            self.bad_windows = 0
            log.info("step %d: lr halved to %g", self.step_count, self.optimizer.param_groups[0]["lr"])

    def run(self, steps: int | None = None, log_path=None) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            rec = self.step()
            if self.cfg.log_every and rec["step"] % self.cfg.log_every == 0:
                log.debug("step %(step)d L=%(L).5f", rec)
        if log_path is not None:
            write_log(log_path, self.history)
        return self.history

    # persistence ----------------------------------------------------------------

    def optimizer_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, p in zip(self.names, self.params):
            st = self.optimizer.state.get(p)
            if st:
                out[f"optim/{name}/exp_avg"] = st["exp_avg"]
                out[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
        return out

    def save(self, path) -> None:
        extra = {
            "lr": self.optimizer.param_groups[0]["lr"],
            "best": self.best if np.isfinite(self.best) else None,
            "bad_windows": self.bad_windows,
            "window": self.window,
            "adam_step": self.step_count,
        }
        checkpoint.save_model(path, self.model, asdict(self.cfg), self.cfg.seed, self.step_count,
                              extra, self.optimizer_tensors())

    def restore(self, tensors: dict, meta: dict) -> None:
        """Resume optimizer state and step counter from a checkpoint."""
        self.step_count = int(meta["step"])
        extra = meta.get("extra", {})
        for g in self.optimizer.param_groups:
            g["lr"] = extra.get("lr", self.cfg.lr)
        self.best = extra.get("best") if extra.get("best") is not None else float("inf")
        self.bad_windows = extra.get("bad_windows", 0)
        self.window = list(extra.get("window", []))
        for name, p in zip(self.names, self.params):
            key = f"optim/{name}/exp_avg"
            if key in tensors:
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(extra.get("adam_step", self.step_count))),
                    "exp_avg": torch.from_numpy(tensors[key]).reshape(p.shape).clone(),
                    "exp_avg_sq": torch.from_numpy(tensors[f"optim/{name}/exp_avg_sq"]).reshape(p.shape).clone(),
                }


def write_log(path, history: list[dict]) -> None:
    keys = []
    for rec in history:
        for k in rec:
            if k not in keys:
                keys.append(k)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(history)
    tmp.replace(path)


def train_stage(data, cfg: TrainConfig, model: CompassModel, out_path=None, log_path=None,
                bl_ready: bool = True, resume=None) -> Trainer:
    """Run one training stage.

    ``data`` is an image folder, a list of H x W x 3 arrays, or a callable
    mapping step -> batch. Enhancement-layer stages require a trained BL
    (``bl_ready``).
    """
    if cfg.stage != "bl" and not bl_ready:
        raise ValueError(f"stage {cfg.stage!r} needs a trained base-layer checkpoint")
    if isinstance(data, (str, Path)):
        data = load_image_folder(data)
    if not callable(data):
        data = PyramidSampler(list(data), cfg, K=0 if cfg.stage == "bl" else cfg.K)
    torch.manual_seed(cfg.seed)
    trainer = Trainer(model, cfg, data)
    if resume is not None:
        trainer.restore(*resume)
    trainer.run(log_path=log_path)
    if out_path is not None:
        trainer.save(out_path)
    return trainer
