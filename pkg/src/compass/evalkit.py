"""Evaluation: PSNR/bpp bookkeeping, Bjontegaard delta rate, reports."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import atomic_write
from .pipeline import PSNR_CAP, CompassModel, encode, layer_rd, mse, psnr_from_mse
from .resample import bicubic_resize  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")
REPORT_COLUMNS = ("image", "lambda", "layer", "bits", "acc_bits", "bpp", "mse", "psnr")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images on [0, 1]; identical images give the cap."""
    return psnr_from_mse(mse(a, b))


# --- BD-rate -----------------------------------------------------------------------


@dataclass
class RateCurve:
    bpp: np.ndarray
    psnr: np.ndarray

    def __post_init__(self):
        bpp = np.asarray(self.bpp, dtype=np.float64)
        q = np.asarray(self.psnr, dtype=np.float64)
        if bpp.shape != q.shape or bpp.ndim != 1:
            raise ValueError("bpp and psnr must be 1-D and equally long")
        if bpp.size < 4:
            raise ValueError("a rate curve needs at least 4 points")
        if (bpp <= 0).any():
            raise ValueError("bpp must be positive")
        order = np.argsort(bpp)
        bpp, q = bpp[order], q[order]
        if (np.diff(bpp) <= 0).any():
            raise ValueError("bpp values must be distinct")
        self.bpp, self.psnr = bpp, q


def _fit(curve: RateCurve) -> np.ndarray:
    return np.polyfit(curve.psnr, np.log2(curve.bpp), 3)


def bd_rate(anchor: RateCurve, test: RateCurve) -> float:
    """Average rate difference (percent) at equal PSNR; negative means ``test`` is cheaper.

    Cubic fits of log2(bpp) against PSNR are integrated over the shared
    PSNR interval.
    """
    lo = max(anchor.psnr.min(), test.psnr.min())
    hi = min(anchor.psnr.max(), test.psnr.max())
    if not hi > lo:
        raise ValueError("rate curves have no overlapping PSNR range")
    pa = np.polyint(_fit(anchor))
    pt = np.polyint(_fit(test))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    it = np.polyval(pt, hi) - np.polyval(pt, lo)
    delta = (it - ia) / (hi - lo)
    return float((2.0**delta - 1.0) * 100.0)


# --- images ----------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """PNG or binary PPM as an H x W x 3 float64 array on [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format=fmt)
    atomic_write(path, buf.getvalue())


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"{folder} is not a directory")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# --- layer configs ---------------------------------------------------------------------


def layer_dims(top: tuple[int, int], scales) -> list[tuple[int, int]]:
    """Dims of layers 0..K for an input of size ``top`` taken as the largest layer.

    ``scales`` are EL-k factors relative to the BL, strictly increasing and
    > 1 (e.g. ``[2.0, 3.2]``); the BL is ``top / scales[-1]``.
    """
    scales = [float(s) for s in scales]
    prev = 1.0
    for s in scales:
        if s <= prev:
            raise ValueError(f"scales must be strictly increasing and > 1, got {scales}")
        prev = s
    if not scales:
        return [tuple(int(d) for d in top)]
    h, w = top
    s_top = scales[-1]
    dims = [(max(1, round(h / s_top)), max(1, round(w / s_top)))]
    for s in scales[:-1]:
        dims.append((max(1, round(h * s / s_top)), max(1, round(w * s / s_top))))
    dims.append((int(h), int(w)))
    return dims


def build_pyramid(img: np.ndarray, scales) -> list[np.ndarray]:
    dims = layer_dims(img.shape[:2], scales)
    return [np.clip(bicubic_resize(img, d), 0.0, 1.0) for d in dims[:-1]] + [np.asarray(img, dtype=np.float64)]


# --- evaluation --------------------------------------------------------------------


def evaluate(dataset_dir, registry: dict[int, CompassModel], scales, qualities=None) -> list[dict]:
    """Encode every image at every quality index; one row per (image, quality, layer).

    Bits are exact substream sizes; ``bpp`` is accumulated bits over the
    layer's pixel count.
    """
    paths = list_images(dataset_dir)
    if not paths:
        raise FileNotFoundError(f"no images in {dataset_dir}")
    qualities = sorted(registry) if qualities is None else list(qualities)
    rows = []
    for path in paths:
        try:
            img = read_image(path)
        except (OSError, ValueError) as e:
            log.warning("skipping %s: %s", path, e)
            continue
        pyramid = build_pyramid(img, scales)
        for q in qualities:
            model = registry[q]
            res = encode(pyramid, model, quality=q)
            for rec in layer_rd(res.stream, pyramid, recons=res.recons):
                rows.append({
                    "image": path.name, "lambda": q, "layer": rec.layer, "bits": rec.bits,
                    "acc_bits": rec.acc_bits, "bpp": rec.bpp, "mse": rec.mse, "psnr": rec.psnr,
                })
    if not rows:
        raise FileNotFoundError(f"no readable images in {dataset_dir}")
    return rows


def aggregate(rows: list[dict], layer: int | None = None) -> list[dict]:
    """Mean bpp and PSNR over images, per (quality, layer)."""
    groups: dict[tuple[int, int], list[dict]] = {}
    for r in rows:
        if layer is not None and int(r["layer"]) != layer:
            continue
        groups.setdefault((int(r["lambda"]), int(r["layer"])), []).append(r)
    out = []
    for (q, k), rs in sorted(groups.items()):
        out.append({
            "lambda": q, "layer": k, "images": len(rs),
            "bpp": float(np.mean([float(r["bpp"]) for r in rs])),
            "psnr": float(np.mean([float(r["psnr"]) for r in rs])),
        })
    return out


def final_layer_curve(rows: list[dict]) -> RateCurve:
    last = max(int(r["layer"]) for r in rows)
    pts = aggregate(rows, last)
    return RateCurve([p["bpp"] for p in pts], [p["psnr"] for p in pts])


def write_report(path, rows: list[dict], columns=REPORT_COLUMNS) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    atomic_write(path, buf.getvalue().encode())


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_curves(path, curves: dict[str, RateCurve], title: str = "final layer") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in curves.items():
        ax.plot(c.bpp, c.psnr, marker="o", label=name)
    ax.set_xlabel("accumulated bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, bbox_inches="tight")
    plt.close(fig)
    atomic_write(path, buf.getvalue())


__all__ = [
    "PSNR_CAP", "RateCurve", "aggregate", "bd_rate", "bicubic_resize", "build_pyramid", "evaluate",
    "final_layer_curve", "layer_dims", "list_images", "plot_curves", "psnr", "read_image", "read_report",
    "to_uint8", "write_image", "write_report",
]
