"""Bottleneck residual regressor with hybrid spatial-channel attention and
progressive attention fusion between stages."""

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io
from .coefficients import N_COEFFS, split_coefficients


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture switches. ``hsca`` enables the attention module per stage."""

    stage_channels: tuple = (256, 512, 1024, 2048)
    blocks: tuple = (3, 4, 6, 3)
    stem_channels: int = 64
    bottleneck_ratio: int = 4
    attention_reduction: int = 4
    hsca: tuple = (True, True, True, True)
    pafb: bool = True
    input_size: int = 224
    head_init_std: float = 1e-3

    def __post_init__(self):
        for name in ("stage_channels", "blocks", "hsca"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.stage_channels) != 4 or len(self.blocks) != 4 or len(self.hsca) != 4:
            raise ValueError("stage_channels, blocks and hsca need one entry per stage (4)")
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if b != 2 * a:
                raise ValueError("stage channels must double from stage to stage")
        if self.input_size % 32:
            raise ValueError("input_size must be a multiple of 32")
        if min(self.blocks) < 1 or self.stem_channels < 1 or self.attention_reduction < 1:
            raise ValueError("block counts, stem width and reduction ratio must be positive")
        object.__setattr__(self, "hsca", tuple(bool(x) for x in self.hsca))

    @classmethod
    def tiny(cls, **overrides):
        """Desk-scale configuration used by tests and demos.

        Narrower bottleneck and attention reductions than the full network keep
        at least a few hidden units in every attention branch; with a single
        unit a ReLU is often dead for a given input.
        """
        kw = dict(stage_channels=(8, 16, 32, 64), blocks=(1, 1, 1, 1), stem_channels=8, input_size=32,
                  bottleneck_ratio=2, attention_reduction=1)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network keys: {', '.join(sorted(unknown))}")
        return cls(**d)


class HSCA(nn.Module):
    """Spatial gating from row/column pooled descriptors, then channel gating.

    Rows (pooled over width) and columns (pooled over height) go through a
    shared 1x1 reduction, then separate 1x1 expansions and sigmoids; their
    outer product reweights the map. The channel gate is a squeeze-excitation
    pair of 1x1 convolutions applied to the spatially reweighted map.
    """

    def __init__(self, channels, reduction=4):
        super().__init__()
        mid = max(channels // reduction, 1)
        self.spatial_reduce = nn.Conv2d(channels, mid, 1)
        self.spatial_h = nn.Conv2d(mid, channels, 1)
        self.spatial_w = nn.Conv2d(mid, channels, 1)
        self.channel_reduce = nn.Conv2d(channels, mid, 1)
        self.channel_expand = nn.Conv2d(mid, channels, 1)

    def gates(self, x):
        h, w = x.shape[2:]
        rows = x.mean(dim=3, keepdim=True)  # (B, C, H, 1)
        cols = x.mean(dim=2, keepdim=True).transpose(2, 3)  # (B, C, W, 1)
        y = F.relu(self.spatial_reduce(torch.cat([rows, cols], dim=2)))
        yh, yw = torch.split(y, [h, w], dim=2)
        gate_h = torch.sigmoid(self.spatial_h(yh))
        gate_w = torch.sigmoid(self.spatial_w(yw)).transpose(2, 3)
        spatial = x * gate_h * gate_w
        desc = spatial.mean(dim=(2, 3), keepdim=True)
        gate_c = torch.sigmoid(self.channel_expand(F.relu(self.channel_reduce(desc))))
        return spatial, gate_h, gate_w, gate_c

    def forward(self, x):
        spatial, _, _, gate_c = self.gates(x)
        return spatial * gate_c


class PAFB(nn.Module):
    """Fuse a high-resolution map (C, H, W) into the next stage's map (2C, H/2, W/2).

    The high-resolution input is brought to the low-resolution shape by a
    strided 1x1 convolution. Global (pooled) and local (per-pixel) 1x1 branches
    over the concatenation produce logits whose sigmoid weighs the two inputs
    against each other.
    """

    def __init__(self, channels, reduction=4):
        super().__init__()
        out = 2 * channels
        mid = max(out // reduction, 1)
        self.down = nn.Conv2d(channels, out, 1, stride=2)
        self.global_att = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(2 * out, mid, 1),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, out, 1),
        )
        self.local_att = nn.Sequential(
            nn.Conv2d(2 * out, mid, 1),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, out, 1),
        )

    def weights(self, high, low):
        down = self.down(high)
        if down.shape != low.shape:
            raise ValueError(f"PAFB shape mismatch: downsampled {tuple(down.shape)} vs low {tuple(low.shape)}")
        combined = torch.cat([low, down], dim=1)
        refined = self.local_att(combined) + self.global_att(combined)
        w1 = torch.sigmoid(refined)
        return down, w1, 1.0 - w1

    def forward(self, high, low):
        down, w1, w2 = self.weights(high, low)
        return w1 * down + w2 * low


class Bottleneck(nn.Module):
    def __init__(self, cin, cout, stride, ratio, use_hsca, reduction):
        super().__init__()
        mid = max(cout // ratio, 1)
        self.conv1 = nn.Conv2d(cin, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.hsca = HSCA(mid, reduction) if use_hsca else None
        self.conv3 = nn.Conv2d(mid, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        if self.hsca is not None:
            y = self.hsca(y)
        y = self.bn3(self.conv3(y))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(y + skip)


class FaceRegressor(nn.Module):
    """Image (B, 3, S, S) in [0, 1] -> (B, 257) coefficients."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or NetworkConfig()
        self.stem = nn.Sequential(
            nn.Conv2d(3, config.stem_channels, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(config.stem_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        cin = config.stem_channels
        for k, (cout, n) in enumerate(zip(config.stage_channels, config.blocks)):
            blocks = []
            for b in range(n):
                stride = 2 if (k > 0 and b == 0) else 1
                blocks.append(Bottleneck(cin, cout, stride, config.bottleneck_ratio,
                                         config.hsca[k], config.attention_reduction))
                cin = cout
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        if config.pafb:
            self.fusion = nn.ModuleList(PAFB(c, config.attention_reduction) for c in config.stage_channels[:3])
        else:
            self.fusion = None
        self.head = nn.Linear(config.stage_channels[-1], N_COEFFS)
        nn.init.normal_(self.head.weight, std=config.head_init_std)
        nn.init.zeros_(self.head.bias)

    def _check_input(self, x):
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"expected input of shape (B, 3, {s}, {s}), got {tuple(x.shape)}")

    def stage_features(self, x):
        """The four stage outputs at 1/4, 1/8, 1/16 and 1/32 resolution."""
        self._check_input(x)
        feats = []
        y = self.stem(x)
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        return feats

    def fuse(self, feats):
        if self.fusion is None:
            return feats[-1]
        fused = feats[0]
        for block, low in zip(self.fusion, feats[1:]):
            fused = block(fused, low)
        return fused

    def forward(self, x):
        fused = self.fuse(self.stage_features(x))
        return self.head(fused.mean(dim=(2, 3)))


def image_to_batch(image, dtype=torch.float32):
    """(H, W, 3) or (B, H, W, 3) array in [0, 1] -> (B, 3, H, W) tensor."""
    x = image if torch.is_tensor(image) else torch.as_tensor(np.asarray(image, dtype=np.float64))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2).to(dtype).contiguous()


def predict_coefficients(net, image):
    """Run the regressor on one H×W×3 image and split its output."""
    param = next(net.parameters())
    out = net(image_to_batch(image, param.dtype))
    return split_coefficients(out[0])


@torch.no_grad()
def feature_activation_maps(net, image, stage):
    """Activation heatmap of one stage (1-4, or ``"fused"``), resized to the input.

    Channels are weighted by their global-average activation, summed,
    bilinearly upsampled and min-max normalised to [0, 1].
    """
    param = next(net.parameters())
    x = image_to_batch(image, param.dtype)
    feats = net.stage_features(x)
    if stage == "fused":
        fmap = net.fuse(feats)
    else:
        stage = int(stage)
        if not 1 <= stage <= 4:
            raise ValueError(f"stage must be 1-4 or 'fused', got {stage}")
        fmap = feats[stage - 1]
    weights = fmap.mean(dim=(2, 3), keepdim=True)
    cam = (weights * fmap).sum(dim=1, keepdim=True)
    cam = F.interpolate(cam, size=x.shape[2:], mode="bilinear", align_corners=False)[0, 0]
    lo, hi = cam.min(), cam.max()
    cam = (cam - lo) / (hi - lo) if hi > lo else torch.zeros_like(cam)
    return cam.double().numpy()


def build_network(config, seed=0):
    torch.manual_seed(seed)
    return FaceRegressor(config)


def save_checkpoint(net, path, meta=None):
    """Store parameters and buffers with the architecture in the header."""
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    header = {"network": net.config.to_dict(), **(meta or {})}
    io.save_arrays(path, arrays, kind="checkpoint", meta=header)


def load_checkpoint(path, expected_config=None):
    """Rebuild a network from a checkpoint; refuse one whose architecture differs
    from ``expected_config``. Returns ``(net, meta)``."""
    arrays, meta = io.load_arrays(path, kind="checkpoint")
    try:
        config = NetworkConfig.from_dict(meta["network"])
    except (KeyError, TypeError, ValueError) as exc:
        raise io.FormatError(f"{path}: bad architecture header ({exc})") from exc
    if expected_config is not None and config != expected_config:
        raise io.FormatError(f"{path}: checkpoint architecture {config} does not match {expected_config}")
    net = FaceRegressor(config)
    if arrays.get("head.weight", np.zeros(0, np.float32)).dtype == np.float64:
        net.double()
    state = net.state_dict()
    if set(state) != set(arrays):
        raise io.FormatError(f"{path}: parameter names do not match the architecture")
    loaded = {}
    for k, v in state.items():
        a = torch.as_tensor(arrays[k])
        if a.shape != v.shape:
            raise io.FormatError(f"{path}: {k} has shape {tuple(a.shape)}, expected {tuple(v.shape)}")
        loaded[k] = a.to(v.dtype)
    net.load_state_dict(loaded)
    return net, meta
