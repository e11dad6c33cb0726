"""Rigid pose and pinhole projection.

Rotations use intrinsic x-y-z Euler angles (pitch, then yaw, then roll):
``R = Rx(pitch) @ Ry(yaw) @ Rz(roll)``. The camera sits at the origin looking
down +z; image u grows with x and v grows with y.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch


class DepthError(ValueError):
    """Raised when transformed vertices are not in front of the camera."""


@dataclass(frozen=True)
class Pose:
    euler_angles: tuple  # radians (pitch, yaw, roll)
    translation: tuple  # millimetres

    def __post_init__(self):
        a = np.asarray(self.euler_angles, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if a.shape != (3,) or t.shape != (3,):
            raise ValueError("pose needs 3 Euler angles and a 3-vector translation")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(t))):
            raise ValueError("pose values must be finite")

    def as_degrees(self):
        return {"euler_degrees": [math.degrees(float(x)) for x in self.euler_angles],
                "translation": [float(x) for x in self.translation]}


@dataclass(frozen=True)
class CameraModel:
    focal_length: float = 1015.0
    image_size: tuple = (224, 224)  # (H, W)
    principal_point: tuple = None  # (cx, cy); image centre when omitted

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError("focal_length must be positive")
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "image_size", (int(h), int(w)))
        if self.principal_point is None:
            object.__setattr__(self, "principal_point", (w / 2.0, h / 2.0))
        else:
            object.__setattr__(self, "principal_point", tuple(float(x) for x in self.principal_point))

    @classmethod
    def scaled(cls, size, reference_focal=1015.0, reference_size=224):
        """Camera for a square ``size`` image with the field of view of the reference setup."""
        return cls(focal_length=reference_focal * size / reference_size, image_size=(size, size))


def _tensor(x, dtype=None):
    if torch.is_tensor(x):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype or torch.float64)


def euler_to_rotation(angles):
    """Rotation matrices (..., 3, 3) from (..., 3) Euler angles; differentiable."""
    a = _tensor(angles)
    cx, cy, cz = torch.cos(a).unbind(-1)
    sx, sy, sz = torch.sin(a).unbind(-1)
    one, zero = torch.ones_like(cx), torch.zeros_like(cx)
    rx = torch.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1)
    ry = torch.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1)
    rz = torch.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1)
    shape = a.shape[:-1] + (3, 3)
    return rx.reshape(shape) @ ry.reshape(shape) @ rz.reshape(shape)


def rotation_to_euler(r):
    """Inverse of :func:`euler_to_rotation` for numpy matrices (yaw in [-pi/2, pi/2])."""
    r = np.asarray(r, dtype=np.float64)
    yaw = math.asin(max(-1.0, min(1.0, r[0, 2])))
    pitch = math.atan2(-r[1, 2], r[2, 2])
    roll = math.atan2(-r[0, 1], r[0, 0])
    return np.array([pitch, yaw, roll])


def rigid_transform(vertices, angles, translation):
    """Apply ``R @ v + t`` to (..., N, 3) vertices."""
    v = _tensor(vertices)
    r = euler_to_rotation(_tensor(angles, v.dtype))
    t = _tensor(translation, v.dtype)
    return v @ r.transpose(-1, -2) + t.unsqueeze(-2)


def project(points_cam, camera):
    """Pinhole projection of camera-space points. Returns ``(uv, depth)``."""
    z = points_cam[..., 2]
    bad = int((z <= 0).sum())
    if bad:
        raise DepthError(f"{bad} vertices have non-positive depth")
    cx, cy = camera.principal_point
    f = camera.focal_length
    u = f * points_cam[..., 0] / z + cx
    v = f * points_cam[..., 1] / z + cy
    return torch.stack([u, v], -1), z


def unproject(uv, depth, camera):
    """Back-project pixel coordinates at the given depth into camera space."""
    uv = _tensor(uv)
    z = _tensor(depth, uv.dtype)
    cx, cy = camera.principal_point
    x = (uv[..., 0] - cx) * z / camera.focal_length
    y = (uv[..., 1] - cy) * z / camera.focal_length
    return torch.stack([x, y, z], -1)


def transform_and_project(vertices, pose, camera):
    """Rigidly transform model vertices by ``pose`` and project them.

    ``pose`` may be a :class:`Pose` or an ``(angles, translation)`` pair of
    tensors (kept differentiable). Returns ``(points_2d, depth)``.
    """
    if isinstance(pose, Pose):
        angles, translation = pose.euler_angles, pose.translation
    else:
        angles, translation = pose
    return project(rigid_transform(vertices, angles, translation), camera)


def project_landmarks(model, coefficients, camera, reference_depth=0.0):
    """Decode shape, gather the 68 landmarks and project them to pixels.

    ``coefficients`` is a :class:`~facerecon.coefficients.CoefficientVector`;
    ``reference_depth`` is added to the z translation (see
    :func:`facerecon.pipeline.pose_translation`).
    """
    from .morphable_model import decode_shape, select_landmarks

    verts = decode_shape(model, coefficients.id, coefficients.exp)
    lms = select_landmarks(verts, model)
    t = coefficients.translation + _reference_offset(coefficients.translation, reference_depth)
    uv, _ = transform_and_project(lms, (coefficients.rotation, t), camera)
    return uv


def _reference_offset(translation, reference_depth):
    off = torch.zeros(3, dtype=translation.dtype)
    off[2] = reference_depth
    return off
