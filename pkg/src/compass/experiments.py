"""Desk-scale training experiments shared by the scripts and the acceptance suite.

``overfit_smoke`` overfits one two-layer pyramid; ``ablation`` trains the
LIFF predictor and the bicubic predictor under identical seeds and step
budgets and compares them by the combined loss of the real codec and
by BD-rate.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import preset
from .evalkit import RateCurve, bd_rate
from .pipeline import CompassModel, encode, layer_rd
from .resample import bicubic_resize
from .training import (
    FixedPyramids,
    PyramidSampler,
    TrainConfig,
    Trainer,
    combined_rd_loss,
    noise_generator,
)

log = logging.getLogger(__name__)


def square_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Centre square crop, bicubic-resized to ``size`` x ``size`` on [0, 1]."""
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = np.asarray(img[top : top + s, left : left + s, :3], dtype=np.float64)
    return np.clip(bicubic_resize(crop, (size, size)), 0.0, 1.0)


def two_layer_pyramid(top: np.ndarray, factor: float = 2.0) -> list[np.ndarray]:
    h, w = top.shape[:2]
    small = np.clip(bicubic_resize(top, (round(h / factor), round(w / factor))), 0.0, 1.0)
    return [small, np.asarray(top, dtype=np.float64)]


def _train(model, cfg: TrainConfig, data, steps: int, decay_at: float = 1.0, decay: float = 0.1) -> Trainer:
    """Run ``steps`` steps, multiplying the lr by ``decay`` after a ``decay_at`` fraction of them."""
    tr = Trainer(model, cfg, data)
    for i in range(steps):
        if i == int(decay_at * steps):
            for g in tr.optimizer.param_groups:
                g["lr"] *= decay
        tr.step()
    return tr


def coded_point(model: CompassModel, pyramid) -> tuple[float, float, float]:
    """(accumulated bpp, PSNR) of the last layer and PSNR of the BL, from a real encode."""
    res = encode(pyramid, model)
    recs = layer_rd(res.stream, pyramid, recons=res.recons)
    return recs[-1].bpp, recs[-1].psnr, recs[0].psnr


# --- overfitting smoke run -------------------------------------------------------------


@dataclass
class SmokeResult:
    history: list[dict]
    bpp: float
    psnr: float
    bl_psnr: float
    seconds: dict[str, float]

    @property
    def loss_first(self) -> float:
        return self.history[0]["L"]

    @property
    def loss_last(self) -> float:
        return self.history[-1]["L"]

    @property
    def reduction(self) -> float:
        return 1.0 - self.loss_last / self.loss_first


def overfit_smoke(pyramid: list[np.ndarray], lmbda: float = 0.01, steps: int = 200, bl_steps: int = 600,
                  liff_steps: int = 300, preset_name: str = "desk", seed: int = 0) -> SmokeResult:
    """Stage the model on one pyramid, then measure ``steps`` joint steps.

    The BL and the LIFF pretraining stages come first, as every enhancement
    stage needs a trained BL; ``history`` covers only the joint stage.
    """
    torch.manual_seed(seed)
    model = CompassModel(preset(preset_name))
    data = FixedPyramids([pyramid])
    base = dict(lmbda=lmbda, K=1, plateau_patience=0, seed=seed)
    seconds = {}
    t = time.perf_counter()
    _train(model, TrainConfig(stage="bl", lr=1e-3, **{**base, "K": 0}), data, bl_steps)
    seconds["bl"] = time.perf_counter() - t
    t = time.perf_counter()
    _train(model, TrainConfig(stage="pretrain-liff", lr=3e-3, **base), data, liff_steps)
    seconds["pretrain-liff"] = time.perf_counter() - t
    t = time.perf_counter()
    tr = _train(model, TrainConfig(stage="joint", lr=1e-3, **base), data, steps)
    seconds["joint"] = time.perf_counter() - t
    model.eval()
    bpp, psnr, bl_psnr = coded_point(model, pyramid)
    return SmokeResult(tr.history, bpp, psnr, bl_psnr, seconds)


# --- predictor ablation ----------------------------------------------------------------


@dataclass
class AblationResult:
    lambdas: list[float]
    liff_loss: list[float]  # coded loss, see ``coded_loss``
    bicubic_loss: list[float]
    liff_curve: RateCurve
    bicubic_curve: RateCurve
    liff_surrogate: list[float] = field(default_factory=list)  # training-style loss, see ``surrogate_loss``
    bicubic_surrogate: list[float] = field(default_factory=list)
    seconds: dict[str, float] = field(default_factory=dict)

    @property
    def liff_better_everywhere(self) -> bool:
        return all(a < b for a, b in zip(self.liff_loss, self.bicubic_loss))

    @property
    def bd_rate(self) -> float:
        """BD-rate of LIFF against the bicubic anchor; negative favours LIFF."""
        return bd_rate(self.bicubic_curve, self.liff_curve)


def coded_loss(model: CompassModel, pyramids: list[list[np.ndarray]], lmbda: float) -> tuple[float, tuple[float, float]]:
    """Combined loss of the real codec, averaged over pyramids.

    Per pyramid: sum over ELs of payload bits per layer pixel plus
    lambda * 255^2 * MSE of the decoded layer. Also returns the mean
    (accumulated bpp, PSNR) of the last layer.
    """
    model.eval()
    losses, points = [], []
    for pyr in pyramids:
        res = encode(pyr, model)
        recs = layer_rd(res.stream, pyr, recons=res.recons)
        losses.append(sum(r.bits / (r.height * r.width) + lmbda * 255.0**2 * r.mse for r in recs[1:]))
        points.append((recs[-1].bpp, recs[-1].psnr))
    bpp, psnr = np.mean(points, axis=0)
    return float(np.mean(losses)), (float(bpp), float(psnr))


def surrogate_loss(model: CompassModel, pyramids: list[list[np.ndarray]], lmbda: float) -> float:
    """Training loss (noisy-latent rate estimate) on whole pyramids with a fixed noise draw."""
    model.eval()
    with torch.no_grad():
        out = combined_rd_loss(FixedPyramids(pyramids)(0), model, lmbda, generator=noise_generator(123, 0))
    return float(out.loss)


def ablation(images: list[np.ndarray], lambdas=(0.0035, 0.0067, 0.013, 0.025), steps: int = 2000,
             bl_steps: int = 3000, liff_steps: int = 1000, pre_lmbda: float = 0.01, factor: float = 2.0,
             crop: int = 64, batch: int = 4, pre_batch: int = 8, lr: float = 1e-3, decay_at: float = 0.75,
             preset_name: str = "desk", seed: int = 0) -> AblationResult:
    """LIFF vs bicubic prediction under identical seeds and step budgets.

    The BL, and then the LIFF on prediction error, are trained once and
    shared by every lambda; neither depends on lambda, and the bicubic
    predictor has nothing to pretrain. Each arm then trains the enhancement
    layer jointly for ``steps`` steps from the same RC weights, with the lr
    cut tenfold after ``decay_at`` of them; only the predictor differs.
    Arms are scored on the whole images (downscaled by ``factor`` for the BL).
    """
    pyramids = [two_layer_pyramid(im, factor) for im in images]
    base = dict(K=1, crop=crop, batch=batch, lr=lr, scale_min=factor, scale_max=factor,
                plateau_patience=0, seed=seed)
    seconds = {}

    torch.manual_seed(seed)
    shared = CompassModel(preset(preset_name))
    t = time.perf_counter()
    bl_cfg = TrainConfig(stage="bl", lmbda=pre_lmbda, **{**base, "K": 0, "batch": pre_batch})
    _train(shared, bl_cfg, PyramidSampler(images, bl_cfg), bl_steps)
    seconds["bl"] = time.perf_counter() - t
    t = time.perf_counter()
    liff_cfg = TrainConfig(stage="pretrain-liff", lmbda=pre_lmbda, **{**base, "batch": pre_batch})
    _train(shared, liff_cfg, PyramidSampler(images, liff_cfg), liff_steps)
    seconds["pretrain-liff"] = time.perf_counter() - t
    bl_state = copy.deepcopy(shared.bl.state_dict())
    liff_state = copy.deepcopy(shared.liff.state_dict())

    out = {p: {"loss": [], "point": [], "surrogate": []} for p in ("liff", "bicubic")}
    for lmbda in lambdas:
        cfg = TrainConfig(stage="joint", lmbda=lmbda, **base)
        data = PyramidSampler(images, cfg)
        for predictor in ("liff", "bicubic"):
            torch.manual_seed(seed)
            model = CompassModel(preset(preset_name, predictor=predictor))
            model.bl.load_state_dict(bl_state)
            model.liff.load_state_dict(liff_state)
            t = time.perf_counter()
            _train(model, cfg, data, steps, decay_at)
            seconds[f"{predictor}@{lmbda:g}"] = time.perf_counter() - t
            loss, point = coded_loss(model, pyramids, lmbda)
            rec = out[predictor]
            rec["loss"].append(loss)
            rec["point"].append(point)
            rec["surrogate"].append(surrogate_loss(model, pyramids, lmbda))
            log.info("lambda %g %s: coded L %.4f (%.4f bpp, %.2f dB), surrogate L %.4f", lmbda, predictor,
                     loss, *point, rec["surrogate"][-1])

    def curve(name):
        bpp, psnr = zip(*out[name]["point"])
        return RateCurve(bpp, psnr)

    return AblationResult(list(lambdas), out["liff"]["loss"], out["bicubic"]["loss"], curve("liff"),
                          curve("bicubic"), out["liff"]["surrogate"], out["bicubic"]["surrogate"], seconds)
