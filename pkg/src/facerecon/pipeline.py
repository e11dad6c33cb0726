"""Coefficient vector -> shaded, rendered face, and the full training loss for one image."""

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from . import losses as L
from .camera import CameraModel, project, rigid_transform
from .coefficients import CoefficientVector, split_coefficients
from .illumination import SH_C0, N_SH, compute_vertex_normals, shade_texture
from .morphable_model import decode_shape, decode_texture
from .renderer import render_projected


@dataclass(frozen=True)
class SceneConfig:
    """Camera plus the fixed offsets applied to raw pose and lighting outputs.

    ``reference_depth`` (mm) is added to the z translation so that a zero
    translation puts the face in front of the camera; ``ambient`` is added to
    the band-0 irradiance of every channel so that zero lighting coefficients
    give uniform grey light instead of a black face.
    """

    focal_length: float = 1015.0
    image_size: int = 224
    reference_depth: float = 1000.0
    ambient: float = 0.8

    @property
    def camera(self):
        return CameraModel(focal_length=self.focal_length, image_size=(self.image_size, self.image_size))

    @classmethod
    def scaled(cls, image_size, **kw):
        """Same field of view as the 224-pixel default at another resolution."""
        return cls(focal_length=1015.0 * image_size / 224.0, image_size=image_size, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown camera keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class Reconstruction:
    vertices: torch.Tensor  # model frame (N, 3)
    camera_vertices: torch.Tensor
    texture: torch.Tensor  # albedo (N, 3)
    colors: torch.Tensor  # shaded (N, 3)
    points_2d: torch.Tensor
    landmarks_2d: torch.Tensor  # (68, 2)
    render: object  # RenderOutput


def pose_translation(coeffs, scene):
    offset = torch.zeros(3, dtype=coeffs.translation.dtype)
    offset[2] = scene.reference_depth
    return coeffs.translation + offset


def effective_light(light, ambient):
    offset = torch.zeros(light.shape[-1], dtype=light.dtype)
    offset[::N_SH] = ambient / SH_C0
    return light + offset


def reconstruct(model, coeffs, scene):
    """Decode, pose, shade and render one coefficient vector (unbatched)."""
    if not isinstance(coeffs, CoefficientVector):
        coeffs = split_coefficients(coeffs)
    verts = decode_shape(model, coeffs.id, coeffs.exp)
    tex = decode_texture(model, coeffs.tex)
    cam_verts = rigid_transform(verts, coeffs.rotation, pose_translation(coeffs, scene))
    normals = compute_vertex_normals(cam_verts, model.triangles)
    colors = shade_texture(tex, normals, effective_light(coeffs.light, scene.ambient))
    camera = scene.camera
    uv, z = project(cam_verts, camera)
    out = render_projected(uv, z, model.triangles, colors, camera.image_size, cull_backfaces=True)
    out.vertices = verts
    lms = uv[model.tensor("landmark_indices", torch.int64)]
    return Reconstruction(vertices=verts, camera_vertices=cam_verts, texture=tex, colors=colors,
                          points_2d=uv, landmarks_2d=lms, render=out)


def sample_losses(model, coeffs, image, landmarks, skin_mask, scene, weights, embed):
    """Loss breakdown of one coefficient vector against one training sample."""
    if not isinstance(coeffs, CoefficientVector):
        coeffs = split_coefficients(coeffs)
    rec = reconstruct(model, coeffs, scene)
    dtype = rec.render.image.dtype
    image = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image).to(dtype)
    mask = rec.render.mask
    skin = None if skin_mask is None else torch.as_tensor(np.asarray(skin_mask)).to(dtype)
    pho = L.photometric_loss(image, rec.render.image, mask, skin)
    composite = mask[..., None] * rec.render.image + (1.0 - mask[..., None]) * image
    per = L.perceptual_loss(embed(image), embed(composite))
    lmk = L.landmark_loss(rec.landmarks_2d, torch.as_tensor(np.asarray(landmarks)).to(dtype),
                          weights.landmark_weights(len(model.landmark_indices)))
    reg = L.coefficient_regularization(coeffs.id, coeffs.exp, coeffs.tex, weights)
    refl = L.reflectance_loss(rec.texture, model.region_mask)
    return L.total_loss(pho, per, lmk, reg, refl, weights), rec


def batch_losses(model, raw, samples, scene, weights, embed):
    """Mean loss breakdown over a batch of network outputs (B, 257)."""
    parts = [sample_losses(model, split_coefficients(raw[b].double()), s.image, s.landmarks,
                           s.skin_mask, scene, weights, embed)[0]
             for b, s in enumerate(samples)]
    n = len(parts)
    mean = {name: sum(getattr(p, name) for p in parts) / n for name in L.TERMS + ("total",)}
    return L.LossBreakdown(**mean)
