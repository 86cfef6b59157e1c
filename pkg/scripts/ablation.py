"""Train desk-size LIFF and bicubic-predictor models on five sample images and compare them.

    python scripts/ablation.py [--steps 2000] [--lambdas 0.0035,0.0067,0.013,0.025] [--plot rd.png]
"""

import argparse
import logging

import torch
from skimage import data

from compass.evalkit import plot_curves
from compass.experiments import ablation, square_resize

IMAGES = ["astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry"]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=2000, help="enhancement-layer steps per arm")
    p.add_argument("--bl-steps", type=int, default=3000)
    p.add_argument("--lambdas", default="0.0035,0.0067,0.013,0.025")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", help="write a rate-PSNR plot here")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    images = [square_resize(getattr(data, n)() / 255.0, args.size) for n in IMAGES]
    lambdas = [float(v) for v in args.lambdas.split(",")]
    res = ablation(images, lambdas=lambdas, steps=args.steps, bl_steps=args.bl_steps, seed=args.seed)
    print("lambda    LIFF L    bicubic L")
    for lm, a, b in zip(res.lambdas, res.liff_loss, res.bicubic_loss):
        print(f"{lm:<9g} {a:<9.4f} {b:.4f}")
    print(f"LIFF better at every lambda: {res.liff_better_everywhere}")
    print(f"BD-rate of LIFF vs bicubic: {res.bd_rate:+.2f}%")
    if args.plot:
        plot_curves(args.plot, {"liff": res.liff_curve, "bicubic": res.bicubic_curve})


if __name__ == "__main__":
    main()
