"""Vertex normals and second-order spherical-harmonics shading.

Lighting coefficients are 27 values in channel-major order: the nine SH
weights for red, then green, then blue. Basis order within a channel is
``Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22``.
"""

import math

import numpy as np
import torch

N_SH = 9
N_LIGHT = 27

SH_C0 = 0.5 * math.sqrt(1.0 / math.pi)
SH_C1 = math.sqrt(3.0 / (4.0 * math.pi))
SH_C2 = 0.5 * math.sqrt(15.0 / math.pi)
SH_C3 = 0.25 * math.sqrt(5.0 / math.pi)
SH_C4 = 0.25 * math.sqrt(15.0 / math.pi)


def _tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def compute_vertex_normals(vertices, triangles):
    """Area-weighted unit vertex normals for (..., N, 3) vertices.

    The unnormalised cross product of two triangle edges has length twice the
    area, so summing it per vertex gives the area weighting directly;
    degenerate triangles contribute zero. Vertices with no non-degenerate
    incident triangle get a zero normal.
    """
    v = _tensor(vertices)
    tri = torch.tensor(np.asarray(triangles), dtype=torch.int64)
    v0, v1, v2 = v[..., tri[:, 0], :], v[..., tri[:, 1], :], v[..., tri[:, 2], :]
    fn = torch.cross(v1 - v0, v2 - v0, dim=-1)
    acc = torch.zeros_like(v)
    for k in range(3):
        acc = acc.index_add(-2, tri[:, k], fn)
    norm = acc.norm(dim=-1, keepdim=True)
    return acc / torch.where(norm > 0, norm, torch.ones_like(norm))


def sh_basis(normals):
    """Real SH basis values of bands 0-2, shape (..., 9)."""
    n = _tensor(normals)
    x, y, z = n.unbind(-1)
    return torch.stack([
        torch.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ], -1)


def irradiance(normals, light):
    """Per-vertex, per-channel SH irradiance (..., N, 3)."""
    light = _tensor(light)
    if light.shape[-1] != N_LIGHT:
        raise ValueError(f"lighting needs {N_LIGHT} coefficients, got {light.shape[-1]}")
    basis = sh_basis(normals).to(light.dtype)  # (..., N, 9)
    gamma = light.reshape(*light.shape[:-1], 3, N_SH)  # (..., 3, 9)
    return basis @ gamma.transpose(-1, -2)


def shade_texture(texture, normals, light):
    """Hadamard product of albedo with its channel's SH irradiance."""
    texture = _tensor(texture)
    return texture * irradiance(normals, light).to(texture.dtype)
