"""Training objective: photometric, perceptual, landmark, coefficient prior and
reflectance terms combined with fixed balance weights."""

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

INNER_MOUTH = tuple(range(60, 68))
TERMS = ("pho", "per", "lmk", "reg3dmm", "refl")


@dataclass(frozen=True)
class LossWeights:
    pho: float = 1.9
    per: float = 0.2
    lmk: float = 1.6e-3
    reg3dmm: float = 3e-4
    refl: float = 4.5
    alpha: float = 1.0
    beta: float = 0.8
    gamma: float = 1.7e-2
    inner_mouth_weight: float = 20.0
    inner_mouth: tuple = INNER_MOUTH

    def __post_init__(self):
        object.__setattr__(self, "inner_mouth", tuple(int(i) for i in self.inner_mouth))
        for f in dataclasses.fields(self):
            if f.name != "inner_mouth" and getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def landmark_weights(self, n=68):
        w = np.ones(n)
        w[list(self.inner_mouth)] = self.inner_mouth_weight
        return torch.as_tensor(w)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["inner_mouth"] = list(self.inner_mouth)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class LossBreakdown:
    """Unweighted terms and their weighted total."""

    pho: torch.Tensor
    per: torch.Tensor
    lmk: torch.Tensor
    reg3dmm: torch.Tensor
    refl: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {name: float(getattr(self, name).detach()) for name in TERMS + ("total",)}


class ZeroCoverageWarning(RuntimeWarning):
    pass


def photometric_loss(image, rendered, render_mask, skin_mask=None):
    """Skin-weighted mean over rendered pixels of the per-pixel RGB Euclidean distance.

    Returns 0 (and emits :class:`ZeroCoverageWarning`) when no weighted pixel
    is covered.
    """
    weight = render_mask if skin_mask is None else render_mask * skin_mask
    denom = weight.sum()
    dist = torch.linalg.vector_norm(image - rendered, dim=-1)
    if float(denom) == 0.0:
        warnings.warn("photometric loss over an empty region", ZeroCoverageWarning, stacklevel=2)
        return (dist * weight).sum()
    return (dist * weight).sum() / denom


def perceptual_loss(emb_image, emb_rendered, eps=1e-12):
    """One minus cosine similarity of two embedding vectors."""
    num = (emb_image * emb_rendered).sum(-1)
    den = torch.linalg.vector_norm(emb_image, dim=-1) * torch.linalg.vector_norm(emb_rendered, dim=-1)
    return 1.0 - num / den.clamp_min(eps)


class RandomProjectionEmbedding:
    """Stand-in identity embedding: fixed Gaussian projection of a downsampled image.

    Any callable mapping an (H, W, 3) tensor to a vector can be used in its
    place.
    """

    def __init__(self, dim=64, size=8, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.size = size
        self.matrix = torch.randn(3 * size * size, dim, generator=g, dtype=torch.float64) / np.sqrt(dim)

    def __call__(self, image):
        x = image.permute(2, 0, 1).unsqueeze(0)
        x = F.adaptive_avg_pool2d(x, self.size).reshape(-1) - 0.5
        return x @ self.matrix.to(x.dtype)


def landmark_loss(pred, target, weights):
    """Weighted mean squared landmark distance ``1/N * sum w_n |p_n - p'_n|^2``."""
    sq = ((pred - target) ** 2).sum(-1)
    weights = torch.as_tensor(weights).to(sq.dtype)
    return (weights * sq).sum(-1) / sq.shape[-1]


def coefficient_regularization(alpha, beta, gamma, weights=LossWeights()):
    return (weights.alpha * (alpha ** 2).sum(-1) + weights.beta * (beta ** 2).sum(-1)
            + weights.gamma * (gamma ** 2).sum(-1))


def reflectance_loss(texture, mask):
    """Masked squared deviation of per-vertex albedo from its masked mean.

    ``texture`` is (N, 3), ``mask`` (N,). Raises ``ValueError`` on an empty mask.
    """
    m = torch.tensor(np.asarray(mask)).to(texture.dtype)
    total = m.sum()
    if float(total) == 0.0:
        raise ValueError("reflectance loss needs a non-empty vertex mask")
    mean = (m[:, None] * texture).sum(0) / total
    return ((m[:, None] * (texture - mean)) ** 2).sum() / total


def total_loss(pho, per, lmk, reg3dmm, refl, weights=LossWeights()):
    terms = dict(pho=pho, per=per, lmk=lmk, reg3dmm=reg3dmm, refl=refl)
    total = sum(getattr(weights, name) * terms[name] for name in TERMS)
    return LossBreakdown(total=total, **terms)
