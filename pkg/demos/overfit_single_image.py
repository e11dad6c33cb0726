"""Overfit the small regressor to one synthetic render.

This is the quickest way to see that gradients flow from the image loss,
through the renderer and the 3D model, back into the network. The loss curve
is printed every 50 steps and the final reconstruction is saved next to the
target for a visual comparison.

    python demos/overfit_single_image.py --steps 500 --out demo_output/overfit
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from facerecon import io
from facerecon.coefficients import CoefficientVector
from facerecon.losses import LossWeights, RandomProjectionEmbedding
from facerecon.morphable_model import synthesize_toy_model
from facerecon.network import NetworkConfig, build_network, predict_coefficients
from facerecon.pipeline import SceneConfig, reconstruct
from facerecon.training import TrainConfig, TrainingSample, overfit_single_image


def target_sample(model, scene):
    rng = np.random.default_rng(1)
    c = CoefficientVector.zeros()
    c.id[:] = torch.as_tensor(rng.normal(scale=0.5, size=80))
    c.tex[:] = torch.as_tensor(rng.normal(scale=0.5, size=80))
    c.rotation[1] = 0.15
    with torch.no_grad():
        rec = reconstruct(model, c, scene)
    mask = rec.render.mask.numpy()
    image = rec.render.image.numpy() + 0.3 * (1 - mask[..., None])  # grey backdrop
    return TrainingSample(image, rec.landmarks_2d.numpy(), mask)


def main():
    parser = argparse.ArgumentParser(description="Overfit one image")
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--out", default="demo_output/overfit")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = synthesize_toy_model(seed=0, n_vertices=300)
    scene = SceneConfig.scaled(32)
    sample = target_sample(model, scene)
    net = build_network(NetworkConfig.tiny(), seed=0)
    history = overfit_single_image(TrainConfig(), sample, args.steps, model, scene, net=net,
                                   weights=LossWeights(), embed=RandomProjectionEmbedding())
    for step in list(range(0, args.steps, 50)) + [args.steps - 1]:
        h = history[step]
        print(f"step {step:4d}  total {h['total']:.4f}  photometric {h['pho']:.4f}  landmarks {h['lmk']:.4f}")
    print(f"loss fell by {100 * (1 - history[-1]['total'] / history[0]['total']):.1f}%")

    net.eval()
    with torch.no_grad():
        rec = reconstruct(model, predict_coefficients(net, sample.image).to(torch.float64), scene)
    io.write_png(out / "target.png", sample.image)
    io.write_png(out / "fitted.png", rec.render.image.numpy())


if __name__ == "__main__":
    main()
