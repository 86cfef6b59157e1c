"""Overfit a desk-size model on one two-layer pyramid and report the loss drop.

    python scripts/smoke.py [--steps 200] [--lmbda 0.01] [--image astronaut]
"""

import argparse
import logging

import torch
from skimage import data

from compass.experiments import overfit_smoke, square_resize, two_layer_pyramid


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--image", default="astronaut", help="skimage.data sample name")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--bl-steps", type=int, default=600)
    p.add_argument("--liff-steps", type=int, default=300)
    p.add_argument("--lmbda", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    img = square_resize(getattr(data, args.image)() / 255.0, 256)[64:192, 64:192]
    res = overfit_smoke(two_layer_pyramid(img), lmbda=args.lmbda, steps=args.steps, bl_steps=args.bl_steps,
                        liff_steps=args.liff_steps, seed=args.seed)
    for rec in res.history[:: max(1, len(res.history) // 10)]:
        print(f"step {rec['step']:4d}  L {rec['L']:.4f}")
    print(f"loss {res.loss_first:.4f} -> {res.loss_last:.4f} ({100 * res.reduction:.1f}% lower)")
    print(f"coded: {res.bpp:.3f} bpp, {res.psnr:.2f} dB (BL {res.bl_psnr:.2f} dB)")
    print("seconds: " + ", ".join(f"{k} {v:.0f}" for k, v in res.seconds.items()))


if __name__ == "__main__":
    main()
