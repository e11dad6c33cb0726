"""Compare activation heatmaps with and without the attention modules.

Two tiny regressors are built from the same seed, one full and one with both
attention modules switched off. After a short overfit on a synthetic face,
their per-stage heatmaps are written side by side so the effect of the
attention gates on where the network looks can be inspected.

    python demos/attention_maps.py --out demo_output/attention
"""

import argparse
from pathlib import Path

import numpy as np

from facerecon import io
from facerecon.morphable_model import synthesize_toy_model
from facerecon.network import NetworkConfig, build_network, feature_activation_maps
from facerecon.pipeline import SceneConfig
from facerecon.training import TrainConfig, overfit_single_image
from overfit_single_image import target_sample  # same directory

STAGES = (1, 2, 3, 4, "fused")


def main():
    parser = argparse.ArgumentParser(description="Attention heatmaps")
    parser.add_argument("--steps", type=int, default=100)
    parser.add_argument("--out", default="demo_output/attention")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = synthesize_toy_model(seed=0, n_vertices=300)
    scene = SceneConfig.scaled(64)
    sample = target_sample(model, scene)
    image, mask = sample.image, sample.skin_mask

    variants = {"full": {}, "plain": {"hsca": (False,) * 4, "pafb": False}}
    for name, overrides in variants.items():
        net = build_network(NetworkConfig.tiny(input_size=64, **overrides), seed=0)
        history = overfit_single_image(TrainConfig(), sample, args.steps, model, scene, net=net)
        print(f"{name:>5}: loss {history[0]['total']:.4f} -> {history[-1]['total']:.4f}")
        for stage in STAGES:
            heat = feature_activation_maps(net, image, stage)
            inside = heat[mask > 0].mean() if mask.any() else float("nan")
            print(f"       stage {stage}: mean heat on face {inside:.2f}, off face {heat[mask == 0].mean():.2f}")
            io.write_png(out / f"{name}_stage{stage}.png", np.stack([heat] * 3, -1))
    io.write_png(out / "input.png", image)


if __name__ == "__main__":
    main()
