"""Data ingestion, augmentation and the Adam training loop."""

import csv
import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import io
from .losses import TERMS, LossWeights, RandomProjectionEmbedding
from .network import build_network, image_to_batch, save_checkpoint
from .pipeline import SceneConfig, batch_losses

log = logging.getLogger(__name__)

CSV_FIELDS = ("step", "epoch") + TERMS + ("total",)


@dataclass
class TrainingSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    landmarks: np.ndarray  # (68, 2) pixels
    skin_mask: np.ndarray = None  # (H, W) binary


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_step_epochs: int = 10
    epochs: int = 20
    seed: int = 0
    augment: bool = True
    shift_probability: float = 0.5
    max_shift: float = 10.0  # pixels
    max_rotation: float = 15.0  # degrees
    freeze_batchnorm: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.lr_step_epochs < 1:
            raise ValueError("batch_size and lr_step_epochs must be positive, epochs non-negative")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr must be positive and lr_decay in (0, 1]")
        if not 0 <= self.shift_probability <= 1 or self.max_shift < 0 or self.max_rotation < 0:
            raise ValueError("augmentation ranges must be non-negative")

    def learning_rate(self, epoch):
        return self.lr * self.lr_decay ** (epoch // self.lr_step_epochs)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys: {', '.join(sorted(unknown))}")
        return cls(**d)


class ManifestDataset:
    """Samples listed in a JSON-lines manifest.

    Each record holds ``image`` and ``landmarks`` paths and optionally
    ``mask``; relative paths resolve against the manifest's directory. Records
    whose files are missing or unreadable are skipped and counted in
    :attr:`skipped`.
    """

    def __init__(self, path, image_size=None):
        self.path = Path(path)
        self.image_size = image_size
        self.records = []
        self.skipped = 0
        root = self.path.parent
        try:
            lines = self.path.read_text().splitlines()
        except OSError as exc:
            raise io.FormatError(f"{path}: cannot read manifest ({exc})") from exc
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise io.FormatError(f"{path}:{lineno}: invalid JSON") from exc
            if not isinstance(rec, dict) or "image" not in rec or "landmarks" not in rec:
                raise io.FormatError(f"{path}:{lineno}: record needs 'image' and 'landmarks'")
            resolved = {k: str(root / v) if k in ("image", "landmarks", "mask") else v for k, v in rec.items()}
            self.records.append(resolved)

    def load(self, rec):
        """Load one record, or return None (and count it) if its files are unusable."""
        try:
            landmarks = io.read_landmarks(rec["landmarks"])
            image = io.read_png(rec["image"])
            mask = io.read_mask(rec["mask"]) if rec.get("mask") else None
        except io.FormatError as exc:
            log.info("skipping %s: %s", rec.get("image"), exc)
            self.skipped += 1
            return None
        if self.image_size is not None and image.shape[:2] != (self.image_size, self.image_size):
            log.info("skipping %s: size %s", rec["image"], image.shape[:2])
            self.skipped += 1
            return None
        return TrainingSample(image=image, landmarks=landmarks, skin_mask=mask)

    def __iter__(self):
        for rec in self.records:
            s = self.load(rec)
            if s is not None:
                yield s


def ingest_dataset(path, image_size=None):
    return ManifestDataset(path, image_size)


def _affine_indices(shape, shift_x, angle_deg):
    """Matrix/offset mapping output (row, col) indices to input indices."""
    h, w = shape
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    # forward map in (x, y): p' = R (p - ctr) + ctr + (shift, 0)
    inv_xy = np.array([[c, s], [-s, c]])
    ctr = np.array([w / 2.0, h / 2.0])
    perm = np.array([[0, 1], [1, 0]])
    inv = perm @ inv_xy @ perm
    ctr_yx, shift_yx = ctr[::-1], np.array([0.0, shift_x])
    offset = inv @ (0.5 - ctr_yx - shift_yx) + ctr_yx - 0.5
    return inv, offset


def transform_landmarks(points, shape, shift_x, angle_deg):
    h, w = shape
    th = math.radians(angle_deg)
    r = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    ctr = np.array([w / 2.0, h / 2.0])
    return (np.asarray(points) - ctr) @ r.T + ctr + np.array([shift_x, 0.0])


def apply_transform(sample, shift_x, angle_deg):
    """Rotate about the image centre, then shift horizontally; same map for all fields.

    Returns None when a transformed landmark leaves the image.
    """
    h, w = sample.image.shape[:2]
    lms = transform_landmarks(sample.landmarks, (h, w), shift_x, angle_deg)
    if np.any(lms < 0) or np.any(lms[:, 0] > w) or np.any(lms[:, 1] > h):
        return None
    if shift_x == 0 and angle_deg == 0:
        return TrainingSample(sample.image.copy(), lms, None if sample.skin_mask is None else sample.skin_mask.copy())
    inv, offset = _affine_indices((h, w), shift_x, angle_deg)
    image = np.stack([ndimage.affine_transform(sample.image[..., k], inv, offset, order=1, mode="nearest")
                      for k in range(sample.image.shape[2])], -1)
    mask = None
    if sample.skin_mask is not None:
        mask = ndimage.affine_transform(sample.skin_mask, inv, offset, order=0, mode="constant", cval=0.0)
    return TrainingSample(np.clip(image, 0.0, 1.0), lms, mask)


class Augmenter:
    """Random horizontal shift (with probability ``shift_probability``) plus rotation."""

    def __init__(self, config):
        self.config = config
        self.skipped = 0

    def __call__(self, sample, rng):
        cfg = self.config
        shift = rng.uniform(-cfg.max_shift, cfg.max_shift) if rng.random() < cfg.shift_probability else 0.0
        angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
        out = apply_transform(sample, shift, angle)
        if out is None:
            self.skipped += 1
        return out


def augment(sample, rng, config=TrainConfig()):
    return Augmenter(config)(sample, rng)


def _freeze_batchnorm(net):
    for m in net.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.eval()


class LossLog:
    """Per-step loss CSV writer."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(CSV_FIELDS)

    def write(self, step, epoch, breakdown):
        vals = breakdown.as_floats()
        self.writer.writerow([step, epoch] + [repr(vals[k]) for k in TERMS + ("total",)])
        self.fh.flush()

    def close(self):
        self.fh.close()


def make_optimizer(net, config):
    """Adam with a step decay of ``lr_decay`` every ``lr_step_epochs`` epochs."""
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_step_epochs, gamma=config.lr_decay)
    return opt, sched


def train(config, samples, model, scene=SceneConfig(), net_config=None, out_dir=".",
          weights=LossWeights(), embed=None, net=None, max_steps=None, meta=None):
    """Adam training on a list of samples; one checkpoint per epoch plus ``losses.csv``.

    Returns the list of checkpoint paths.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("training set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if net is None:
        net = build_network(net_config, seed=config.seed)
    embed = embed or RandomProjectionEmbedding(seed=config.seed)
    opt, sched = make_optimizer(net, config)
    augmenter = Augmenter(config)
    logger = LossLog(out_dir / "losses.csv")
    checkpoints = []
    step = 0
    try:
        for epoch in range(config.epochs):
            net.train()
            if config.freeze_batchnorm:
                _freeze_batchnorm(net)
            order = rng.permutation(len(samples))
            for start in range(0, len(order), config.batch_size):
                batch = [samples[i] for i in order[start:start + config.batch_size]]
                if config.augment:
                    batch = [s for s in (augmenter(b, rng) for b in batch) if s is not None]
                if len(batch) < (1 if config.freeze_batchnorm else 2):
                    continue
                x = image_to_batch(np.stack([s.image for s in batch]))
                raw = net(x)
                breakdown = batch_losses(model, raw, batch, scene, weights, embed)
                if not torch.isfinite(breakdown.total):
                    raise FloatingPointError(f"non-finite loss at step {step}")
                opt.zero_grad()
                breakdown.total.backward()
                opt.step()
                logger.write(step, epoch, breakdown)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            with warnings.catch_warnings():
                # an epoch whose batches were all skipped still advances the schedule
                warnings.filterwarnings("ignore", "Detected call of `lr_scheduler.step", UserWarning)
                sched.step()
            path = out_dir / f"checkpoint_epoch{epoch:03d}.npz"
            save_checkpoint(net, path, meta={"epoch": epoch, "step": step, "scene": scene.to_dict(),
                                             "loss_weights": weights.to_dict(), **(meta or {})})
            checkpoints.append(path)
            log.info("epoch %d done, %d steps, %d augmentations skipped", epoch, step, augmenter.skipped)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        logger.close()
    return checkpoints


def overfit_single_image(config, sample, steps, model, scene=SceneConfig(), net_config=None,
                         weights=LossWeights(), embed=None, net=None):
    """Fit the network to one sample without augmentation; returns per-step loss dicts.

    Batch-norm statistics stay frozen because a single image gives no batch
    statistics for the pooled fusion branch.
    """
    torch.manual_seed(config.seed)
    if net is None:
        net = build_network(net_config, seed=config.seed)
    embed = embed or RandomProjectionEmbedding(seed=config.seed)
    net.eval()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    x = image_to_batch(sample.image, next(net.parameters()).dtype)
    history = []
    for _ in range(steps):
        raw = net(x)
        breakdown = batch_losses(model, raw, [sample], scene, weights, embed)
        opt.zero_grad()
        breakdown.total.backward()
        opt.step()
        history.append(breakdown.as_floats())
    return history
