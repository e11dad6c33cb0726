"""The 257-value regression target and its named slices."""

import math
from dataclasses import dataclass, fields

import numpy as np
import torch

LAYOUT = (("id", 80), ("exp", 64), ("tex", 80), ("rotation", 3), ("translation", 3), ("light", 27))
OFFSETS = tuple(np.cumsum([n for _, n in LAYOUT]).tolist())  # 80, 144, 224, 227, 230, 257
N_COEFFS = OFFSETS[-1]


@dataclass
class CoefficientVector:
    """Slices of a (..., 257) coefficient tensor. Rotation is in radians."""

    id: torch.Tensor
    exp: torch.Tensor
    tex: torch.Tensor
    rotation: torch.Tensor
    translation: torch.Tensor
    light: torch.Tensor

    def concat(self):
        return concat_coefficients(self)

    def to(self, dtype):
        return CoefficientVector(*(getattr(self, name).to(dtype) for name, _ in LAYOUT))

    @classmethod
    def zeros(cls, dtype=torch.float64, batch=()):
        return split_coefficients(torch.zeros(*batch, N_COEFFS, dtype=dtype))

    def to_json(self):
        """Plain-dict form; rotation also given in degrees for readers."""
        d = {f.name: self._list(getattr(self, f.name)) for f in fields(self)}
        d["rotation_degrees"] = [math.degrees(x) for x in d["rotation"]]
        return d

    @classmethod
    def from_json(cls, d):
        missing = [name for name, _ in LAYOUT if name not in d]
        if missing:
            raise ValueError(f"coefficient record lacks {', '.join(missing)}")
        parts = []
        for name, n in LAYOUT:
            v = torch.as_tensor(np.asarray(d[name], dtype=np.float64))
            if v.shape != (n,):
                raise ValueError(f"{name} must have {n} values, got {tuple(v.shape)}")
            parts.append(v)
        return cls(*parts)

    @staticmethod
    def _list(t):
        return [float(x) for x in t.detach().cpu().reshape(-1).tolist()]


def split_coefficients(v):
    """Split a (..., 257) tensor into a :class:`CoefficientVector` (views, no copy)."""
    if not torch.is_tensor(v):
        v = torch.as_tensor(np.asarray(v, dtype=np.float64))
    if v.ndim == 0 or v.shape[-1] != N_COEFFS:
        raise ValueError(f"coefficient vector must have {N_COEFFS} entries, got shape {tuple(v.shape)}")
    parts = torch.split(v, [n for _, n in LAYOUT], dim=-1)
    return CoefficientVector(*parts)


def concat_coefficients(c):
    parts = [getattr(c, name) for name, _ in LAYOUT]
    for (name, n), p in zip(LAYOUT, parts):
        if p.shape[-1] != n:
            raise ValueError(f"{name} must have {n} entries, got {p.shape[-1]}")
    return torch.cat(parts, dim=-1)
