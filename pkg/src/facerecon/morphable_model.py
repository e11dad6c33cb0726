"""Linear morphable face model: storage, decoding and a synthetic stand-in generator.

Vertex layout follows the camera frame used throughout the package: x to the
right, y downwards, and the face looking towards -z (the camera sits on the
-z side). Flattened 3N vectors interleave coordinates per vertex
(``x0, y0, z0, x1, ...``).
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import ConvexHull

from . import io

N_ID = 80
N_EXP = 64
N_TEX = 80
N_LANDMARKS = 68


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Mean shape/texture plus identity, expression and texture bases.

    Arrays are stored as read-only numpy arrays; use :meth:`tensor` to get a
    cached torch view in a given dtype.
    """

    mean_shape: np.ndarray  # (3N,) millimetres
    mean_texture: np.ndarray  # (3N,) RGB in [0, 1]
    basis_id: np.ndarray  # (3N, 80)
    basis_exp: np.ndarray  # (3N, 64)
    basis_tex: np.ndarray  # (3N, 80)
    triangles: np.ndarray  # (F, 3)
    landmark_indices: np.ndarray  # (68,)
    nose_tip_index: int
    region_mask: np.ndarray = None  # (N,) vertices kept for reconstruction; all ones by default
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        fix = lambda name, dtype: object.__setattr__(self, name, np.array(getattr(self, name), dtype=dtype))
        for name in ("mean_shape", "mean_texture", "basis_id", "basis_exp", "basis_tex"):
            fix(name, np.float64)
        fix("triangles", np.int64)
        fix("landmark_indices", np.int64)
        object.__setattr__(self, "nose_tip_index", int(self.nose_tip_index))
        if self.region_mask is None:
            object.__setattr__(self, "region_mask", np.ones(self.mean_shape.size // 3, dtype=np.uint8))
        fix("region_mask", np.uint8)
        self._validate()
        for name in ("mean_shape", "mean_texture", "basis_id", "basis_exp", "basis_tex",
                     "triangles", "landmark_indices", "region_mask"):
            getattr(self, name).setflags(write=False)

    def _validate(self):
        if self.mean_shape.ndim != 1 or self.mean_shape.size % 3:
            raise ValueError(f"mean_shape must be a flat 3N vector, got shape {self.mean_shape.shape}")
        n3 = self.mean_shape.size
        n = n3 // 3
        if self.mean_texture.shape != (n3,):
            raise ValueError(f"mean_texture has shape {self.mean_texture.shape}, expected ({n3},)")
        for name, k in (("basis_id", N_ID), ("basis_exp", N_EXP), ("basis_tex", N_TEX)):
            shape = getattr(self, name).shape
            if shape != (n3, k):
                raise ValueError(f"{name} has shape {shape}, expected ({n3}, {k})")
        if self.mean_texture.size and (self.mean_texture.min() < 0 or self.mean_texture.max() > 1):
            raise ValueError("mean_texture entries must lie in [0, 1]")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError(f"triangles must be (F, 3), got {self.triangles.shape}")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError(f"triangle indices must lie in [0, {n})")
        if self.landmark_indices.shape != (N_LANDMARKS,):
            raise ValueError(f"expected {N_LANDMARKS} landmark indices, got {self.landmark_indices.shape}")
        if self.landmark_indices.min() < 0 or self.landmark_indices.max() >= n:
            raise ValueError(f"landmark indices must lie in [0, {n})")
        if not 0 <= self.nose_tip_index < n:
            raise ValueError(f"nose_tip_index {self.nose_tip_index} outside [0, {n})")
        if self.region_mask.shape != (n,):
            raise ValueError(f"region_mask has shape {self.region_mask.shape}, expected ({n},)")

    @property
    def n_vertices(self):
        return self.mean_shape.size // 3

    def tensor(self, name, dtype=torch.float64):
        key = (name, dtype)
        if key not in self._cache:
            self._cache[key] = torch.tensor(getattr(self, name)).to(dtype)
        return self._cache[key]


def _as_coeffs(x, k, what):
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 0 or x.shape[-1] != k:
        raise ValueError(f"{what} coefficients must have length {k}, got shape {tuple(x.shape)}")
    return x


def decode_shape(model, alpha, beta):
    """Vertices ``S = S_mean + A_id @ alpha + A_exp @ beta`` reshaped to (..., N, 3).

    Accepts arrays or tensors with optional leading batch dimensions; the
    result is a tensor in the dtype of ``alpha``.
    """
    alpha = _as_coeffs(alpha, N_ID, "identity")
    beta = _as_coeffs(beta, N_EXP, "expression").to(alpha.dtype)
    dt = alpha.dtype
    flat = model.tensor("mean_shape", dt) + alpha @ model.tensor("basis_id", dt).T \
        + beta @ model.tensor("basis_exp", dt).T
    return flat.reshape(*flat.shape[:-1], -1, 3)


def decode_texture(model, gamma):
    """Per-vertex albedo ``T_mean + A_tex @ gamma`` as (..., N, 3). Not clamped."""
    gamma = _as_coeffs(gamma, N_TEX, "texture")
    dt = gamma.dtype
    flat = model.tensor("mean_texture", dt) + gamma @ model.tensor("basis_tex", dt).T
    return flat.reshape(*flat.shape[:-1], -1, 3)


def select_landmarks(vertices, model):
    """Gather the 68 landmark vertices from (..., N, 3) vertices."""
    if vertices.shape[-2] != model.n_vertices:
        raise ValueError(f"vertex array has {vertices.shape[-2]} rows, model has {model.n_vertices}")
    idx = model.landmark_indices
    if torch.is_tensor(vertices):
        return vertices[..., model.tensor("landmark_indices", torch.int64), :]
    return np.asarray(vertices)[..., idx, :]


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _smooth_fields(rng, dirs, n_cols, n_feat=24, freq=1.5):
    """Random smooth vector fields on the sphere, one flattened 3N column each."""
    w = rng.normal(scale=freq, size=(3, n_feat))
    b = rng.uniform(0, 2 * np.pi, size=n_feat)
    phi = np.cos(dirs @ w + b)  # (N, n_feat)
    g = rng.normal(size=(n_cols, n_feat, 3))
    return np.einsum("nk,ckd->ndc", phi, g).reshape(-1, n_cols)


def _scaled_orthogonal(cols, sigmas):
    n3, k = cols.shape
    if n3 >= k:
        q, _ = np.linalg.qr(cols)
    else:
        q = cols / np.linalg.norm(cols, axis=0, keepdims=True)
    # unit coefficient -> per-coordinate RMS displacement of sigma_j
    return q * (sigmas * np.sqrt(n3))[None, :]


def synthesize_toy_model(seed=0, n_vertices=500):
    """Deterministic synthetic morphable model on a deformed sphere.

    The mesh is the convex hull of a Fibonacci point set, so it is closed and
    genus 0 for any ``n_vertices >= 4``. Triangles are wound so normals point
    outwards. Basis columns are mutually orthogonal (when ``3N`` is at least the
    column count) with decaying per-column scale, so a unit coefficient moves
    vertices by a few millimetres.
    """
    if n_vertices < 4:
        raise ValueError("need at least 4 vertices")
    rng = np.random.default_rng(seed)
    dirs = _fibonacci_sphere(n_vertices)
    tris = ConvexHull(dirs).simplices.astype(np.int64)
    c = dirs[tris].mean(axis=1)
    nrm = np.cross(dirs[tris[:, 1]] - dirs[tris[:, 0]], dirs[tris[:, 2]] - dirs[tris[:, 0]])
    flip = np.einsum("ij,ij->i", nrm, c) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    forward = np.array([0.0, 0.0, -1.0])
    radii = np.array([75.0, 95.0, 85.0])
    bumps = _smooth_fields(rng, dirs, 1, n_feat=12, freq=1.0).reshape(-1, 3)[:, 0]
    bumps = bumps / (np.abs(bumps).max() + 1e-12)
    cosang = dirs @ forward
    nose = 22.0 * np.exp(-(1.0 - cosang) / 0.03)
    pts = dirs * radii * (1.0 + 0.04 * bumps)[:, None] + (nose[:, None] * forward)
    mean_shape = pts.reshape(-1)

    base_rgb = np.array([0.78, 0.58, 0.48])
    tex_var = _smooth_fields(rng, dirs, 1, n_feat=12).reshape(-1, 3)
    tex_var = tex_var / (np.abs(tex_var).max() + 1e-12)
    mean_texture = np.clip(base_rgb + 0.02 * tex_var, 0.0, 1.0).reshape(-1)

    j = lambda k: np.arange(k, dtype=np.float64)
    basis_id = _scaled_orthogonal(_smooth_fields(rng, dirs, N_ID), 4.0 / (1.0 + j(N_ID) / 8.0))
    front = np.clip(cosang, 0.0, 1.0)
    exp_cols = _smooth_fields(rng, dirs, N_EXP, freq=2.5) * np.repeat(front, 3)[:, None]
    basis_exp = _scaled_orthogonal(exp_cols, 2.5 / (1.0 + j(N_EXP) / 8.0))
    basis_tex = _scaled_orthogonal(_smooth_fields(rng, dirs, N_TEX), 0.04 / (1.0 + j(N_TEX) / 8.0))

    front_idx = np.flatnonzero(cosang > 0.0)
    replace = front_idx.size < N_LANDMARKS
    landmarks = rng.choice(front_idx, size=N_LANDMARKS, replace=replace)
    nose_tip = int(np.argmax(pts @ forward))
    return MorphableModel(mean_shape=mean_shape, mean_texture=mean_texture, basis_id=basis_id,
                          basis_exp=basis_exp, basis_tex=basis_tex, triangles=tris,
                          landmark_indices=landmarks, nose_tip_index=nose_tip)


_FIELDS = ("mean_shape", "mean_texture", "basis_id", "basis_exp", "basis_tex",
           "triangles", "landmark_indices", "region_mask")


def save_model(model, path):
    arrays = {name: getattr(model, name) for name in _FIELDS}
    arrays["nose_tip_index"] = np.array(model.nose_tip_index, dtype=np.int64)
    io.save_arrays(path, arrays, kind="morphable_model")


def load_model(path):
    arrays, _ = io.load_arrays(path, kind="morphable_model")
    missing = [k for k in _FIELDS + ("nose_tip_index",) if k not in arrays]
    if missing:
        raise io.FormatError(f"{path}: model container lacks {', '.join(missing)}")
    kw = {k: arrays[k] for k in _FIELDS}
    return MorphableModel(nose_tip_index=int(arrays["nose_tip_index"]), **kw)
