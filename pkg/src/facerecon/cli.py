"""Command-line entry points.

Errors are reported as one line on stderr,
``facerecon: error code=<n> kind=<kind> message="..."``, with exit codes
2 (configuration), 3 (data) and 4 (numeric failure).
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .camera import DepthError
from .coefficients import CoefficientVector
from .config import ConfigError, load_run_config
from .evaluation import evaluate_alignment, evaluate_reconstruction
from .morphable_model import load_model, save_model, synthesize_toy_model
from .network import feature_activation_maps, load_checkpoint, predict_coefficients
from .pipeline import SceneConfig, reconstruct
from .training import ingest_dataset, train

OUTPUT_ROOT_ENV = "FACERECON_OUTPUT_ROOT"
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, "usage", message)


def _out(path):
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_DATA, "data", f"{what} not found: {p}")
    return p


def _load_net(checkpoint, model_path=None):
    net, meta = load_checkpoint(_existing(checkpoint, "checkpoint"))
    net.eval()
    scene = SceneConfig.from_dict(meta.get("scene", {}))
    model_path = model_path or meta.get("model_path")
    if not model_path:
        raise CliError(EXIT_CONFIG, "config", "checkpoint names no morphable model; pass --model")
    model = load_model(_existing(model_path, "morphable model"))
    return net, model, scene


def _read_input_image(path, size):
    image = io.read_png(_existing(path, "image"))
    if image.shape[:2] != (size, size):
        raise CliError(EXIT_DATA, "data", f"image is {image.shape[1]}x{image.shape[0]}, network expects {size}x{size}")
    return image


def _write_render(out_dir, rec):
    io.write_png(out_dir / "render.png", rec.render.image.detach().numpy())
    io.write_png(out_dir / "mask.png", rec.render.mask.detach().numpy())


def cmd_synth_model(args):
    model = synthesize_toy_model(seed=args.seed, n_vertices=args.vertices)
    out = _out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    print(out)


def cmd_train(args):
    cfg = load_run_config(_existing(args.config, "config"))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    model_path = args.model or cfg.paths.get("model")
    if not model_path:
        raise CliError(EXIT_CONFIG, "config", "no morphable model: set paths.model or pass --model")
    cfg.paths["model"] = str(Path(model_path).resolve())
    model = load_model(_existing(model_path, "morphable model"))
    dataset = ingest_dataset(_existing(args.data, "manifest"), image_size=cfg.network.input_size)
    samples = list(dataset)
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved.json")
    logging.info("%d samples, %d skipped", len(samples), dataset.skipped)
    if not samples:
        raise CliError(EXIT_DATA, "data", "no usable training samples")
    ckpts = train(cfg.train, samples, model, cfg.camera, cfg.network, out, cfg.loss,
                  max_steps=args.max_steps, meta={"model_path": cfg.paths["model"]})
    for c in ckpts:
        print(c)


def cmd_reconstruct(args):
    net, model, scene = _load_net(args.checkpoint, args.model)
    image = _read_input_image(args.image, net.config.input_size)
    with torch.no_grad():
        coeffs = predict_coefficients(net, image).to(torch.float64)
        rec = reconstruct(model, coeffs, scene)
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "coefficients.json").write_text(json.dumps(coeffs.to_json(), indent=2))
    (out / "camera.json").write_text(json.dumps(scene.to_dict(), indent=2))
    io.write_obj(out / "mesh.obj", rec.vertices.numpy(), model.triangles, colors=rec.texture.clamp(0, 1).numpy())
    _write_render(out, rec)
    print(out)


def cmd_render(args):
    model = load_model(_existing(args.model, "morphable model"))
    try:
        coeffs = CoefficientVector.from_json(json.loads(_existing(args.coeffs, "coefficients").read_text()))
    except (ValueError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_DATA, "data", f"bad coefficient file: {exc}") from exc
    scene = SceneConfig()
    if args.camera:
        try:
            scene = SceneConfig.from_dict(json.loads(_existing(args.camera, "camera").read_text()))
        except (ValueError, TypeError) as exc:
            raise CliError(EXIT_CONFIG, "config", f"bad camera file: {exc}") from exc
    with torch.no_grad():
        rec = reconstruct(model, coeffs, scene)
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_render(out, rec)
    print(out)


def _landmark_predictor(net, model, scene):
    def predict(path):
        image = _read_input_image(path, net.config.input_size)
        with torch.no_grad():
            c = predict_coefficients(net, image).to(torch.float64)
            return reconstruct(model, c, scene).landmarks_2d.numpy()
    return predict


def _vertex_predictor(net, model):
    from .morphable_model import decode_shape

    def predict(path):
        image = _read_input_image(path, net.config.input_size)
        with torch.no_grad():
            c = predict_coefficients(net, image)
            return decode_shape(model, c.id.double(), c.exp.double()).numpy()
    return predict


def cmd_eval_alignment(args):
    predictor = None
    if args.checkpoint:
        predictor = _landmark_predictor(*_load_net(args.checkpoint, args.model))
    report = evaluate_alignment(_existing(args.manifest, "manifest"), predictor, seed=args.seed)
    out = _out(args.out)
    report.write(out, "alignment")
    print(json.dumps(report.to_json()))


def cmd_eval_recon(args):
    predictor, nose_tip = None, None
    if args.checkpoint:
        net, model, _ = _load_net(args.checkpoint, args.model)
        predictor = _vertex_predictor(net, model)
        nose_tip = model.nose_tip_index
    report = evaluate_reconstruction(_existing(args.manifest, "manifest"), radius=args.radius,
                                     predictor=predictor, pred_nose_tip=nose_tip)
    report.write(_out(args.out), "reconstruction")
    print(json.dumps(report.to_json()))


def _overlay(image, heat):
    colour = np.stack([np.ones_like(heat), heat, np.zeros_like(heat)], -1) * heat[..., None]
    return 0.5 * image + 0.5 * colour


def cmd_visualize(args):
    net, _ = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    net.eval()
    image = _read_input_image(args.image, net.config.input_size)
    stages = ["1", "2", "3", "4", "fused"] if args.stage == "all" else [args.stage]
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for st in stages:
        try:
            heat = feature_activation_maps(net, image, st if st == "fused" else int(st))
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, "config", str(exc)) from exc
        io.write_png(out / f"cam_stage{st}.png", heat)
        io.write_png(out / f"cam_stage{st}_overlay.png", _overlay(image, heat))
        print(out / f"cam_stage{st}.png")


def build_parser():
    p = _Parser(prog="facerecon", description="Single-image 3D face reconstruction toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-model", help="write a synthetic morphable model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--vertices", type=int, default=500)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_model)

    s = sub.add_parser("train", help="train the regressor")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="JSON-lines manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--model", help="morphable model (overrides paths.model)")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="regress coefficients for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("render", help="render coefficients without the network")
    s.add_argument("--model", required=True)
    s.add_argument("--coeffs", required=True)
    s.add_argument("--camera")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval-alignment", help="landmark NME per yaw bucket")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--model")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval_alignment)

    s = sub.add_parser("eval-recon", help="point-to-plane RMSE per scenario")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--model")
    s.add_argument("--radius", type=float, default=95.0)
    s.set_defaults(func=cmd_eval_recon)

    s = sub.add_parser("visualize", help="activation heatmaps per stage")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--stage", default="all", help="1-4, fused or all")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_visualize)
    return p


def _fail(code, kind, message):
    message = " ".join(str(message).split()).replace('"', "'")
    print(f'facerecon: error code={code} kind={kind} message="{message}"', file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except io.FormatError as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (DepthError, FloatingPointError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except ValueError as exc:
        return _fail(EXIT_DATA, "data", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
