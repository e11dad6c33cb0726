"""Reference differentiable rasterizer for per-vertex coloured triangle meshes.

Visibility (which triangle covers which pixel) is resolved without gradients
by a z-buffered scanline pass in numpy. Barycentric weights of the covered
pixels are then re-evaluated in torch from the projected vertex positions, so
the rendered colours are differentiable with respect to vertex positions
(interior pixels only; silhouettes carry no position gradient), per-vertex
colours, and everything upstream of them.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .camera import Pose, project, rigid_transform

SENTINEL = -1


@dataclass
class Fragments:
    triangle: np.ndarray  # (H, W) int64, SENTINEL where empty
    barycentric: np.ndarray  # (H, W, 3) perspective-correct weights
    depth: np.ndarray  # (H, W), +inf where empty


@dataclass
class RenderOutput:
    image: torch.Tensor  # (H, W, 3) in [0, 1]
    mask: torch.Tensor  # (H, W) 1 where covered
    depth: torch.Tensor  # (H, W) camera depth, 0 where empty
    frag_triangle: np.ndarray
    frag_barycentric: torch.Tensor
    points_2d: torch.Tensor = None
    vertices: torch.Tensor = None
    colors: torch.Tensor = None


def _numpy(x):
    return x.detach().cpu().numpy().astype(np.float64) if torch.is_tensor(x) else np.asarray(x, dtype=np.float64)


def _top_left(a, b, opposite):
    """True when edge a->b is a top or left edge of its triangle (v axis points down)."""
    e = b - a
    n = np.array([-e[1], e[0]])
    if np.dot(n, opposite - a) < 0:
        n = -n
    return n[0] > 0 or (n[0] == 0 and n[1] > 0)


def rasterize(points_2d, depth, triangles, image_size, cull_backfaces=False):
    """Z-buffered coverage of projected triangles at pixel centres ``(i + 0.5, j + 0.5)``.

    Pixels exactly on a shared edge go to the triangle for which that edge is a
    top or left edge. Depth ties keep the lower triangle id. With
    ``cull_backfaces`` only triangles with negative signed screen area (normal
    facing the camera under the package's winding convention) are drawn.
    """
    h, w = image_size
    pts = _numpy(points_2d).reshape(-1, 2)
    z = _numpy(depth).reshape(-1)
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    tri_buf = np.full((h, w), SENTINEL, dtype=np.int64)
    bary_buf = np.zeros((h, w, 3))
    z_buf = np.full((h, w), np.inf)
    for t, (i0, i1, i2) in enumerate(tris):
        p0, p1, p2 = pts[i0], pts[i1], pts[i2]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if area == 0 or not np.isfinite(area) or (cull_backfaces and area > 0):
            continue
        lo = np.minimum(np.minimum(p0, p1), p2)
        hi = np.maximum(np.maximum(p0, p1), p2)
        x0, x1 = max(int(np.ceil(lo[0] - 0.5)), 0), min(int(np.floor(hi[0] - 0.5)), w - 1)
        y0, y1 = max(int(np.ceil(lo[1] - 0.5)), 0), min(int(np.floor(hi[1] - 0.5)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        lam = []
        inside = np.ones(px.shape, dtype=bool)
        for a, b, c in ((p1, p2, p0), (p2, p0, p1), (p0, p1, p2)):
            e = ((b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])) / area
            inside &= (e > 0) | ((e == 0) & _top_left(a, b, c))
            lam.append(e)
        if not inside.any():
            continue
        lam = np.stack(lam, -1)
        inv_z = lam[..., 0] / z[i0] + lam[..., 1] / z[i1] + lam[..., 2] / z[i2]
        with np.errstate(divide="ignore"):
            zz = 1.0 / inv_z
        sub = z_buf[y0:y1 + 1, x0:x1 + 1]
        win = inside & (zz < sub)
        if not win.any():
            continue
        sub[win] = zz[win]
        tri_buf[y0:y1 + 1, x0:x1 + 1][win] = t
        persp = lam / np.array([z[i0], z[i1], z[i2]]) * zz[..., None]
        bary_buf[y0:y1 + 1, x0:x1 + 1][win] = persp[win]
    return Fragments(triangle=tri_buf, barycentric=bary_buf, depth=z_buf)


def interpolate_barycentric(points_2d, depth, triangles, frag_triangle):
    """Differentiable perspective-correct barycentrics and depth for covered pixels.

    Returns ``(pix_index, bary, z)`` where ``pix_index`` are flat indices of
    covered pixels, ``bary`` is (P, 3) and ``z`` is (P,).
    """
    h, w = frag_triangle.shape
    flat = frag_triangle.reshape(-1)
    pix = np.flatnonzero(flat != SENTINEL)
    tri = torch.as_tensor(np.asarray(triangles, dtype=np.int64)[flat[pix]])
    pix_t = torch.as_tensor(pix)
    px = (pix_t % w).to(points_2d.dtype) + 0.5
    py = torch.div(pix_t, w, rounding_mode="floor").to(points_2d.dtype) + 0.5
    p = points_2d[tri]  # (P, 3, 2)
    zv = depth[tri]  # (P, 3)
    p0, p1, p2 = p[:, 0], p[:, 1], p[:, 2]
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])

    def edge(a, b):
        return ((b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (b[:, 1] - a[:, 1]) * (px - a[:, 0])) / area

    lam = torch.stack([edge(p1, p2), edge(p2, p0), edge(p0, p1)], -1)
    w_persp = lam / zv
    z = 1.0 / w_persp.sum(-1)
    return pix, w_persp * z[:, None], z


def render_projected(points_2d, depth, triangles, colors, image_size, cull_backfaces=True):
    """Rasterize already-projected geometry and interpolate per-vertex colours."""
    h, w = image_size
    frags = rasterize(points_2d, depth, triangles, image_size, cull_backfaces=cull_backfaces)
    pix, bary, z = interpolate_barycentric(points_2d, depth, triangles, frags.triangle)
    dtype = colors.dtype
    tri_idx = torch.as_tensor(np.asarray(triangles, dtype=np.int64)[frags.triangle.reshape(-1)[pix]])
    rgb = (bary.to(dtype)[:, :, None] * colors[tri_idx]).sum(1).clamp(0.0, 1.0)
    pix_t = torch.as_tensor(pix)
    image = torch.zeros(h * w, 3, dtype=dtype).index_put((pix_t,), rgb).reshape(h, w, 3)
    bary_img = torch.zeros(h * w, 3, dtype=bary.dtype).index_put((pix_t,), bary).reshape(h, w, 3)
    depth_img = torch.zeros(h * w, dtype=z.dtype).index_put((pix_t,), z).reshape(h, w)
    mask = torch.as_tensor(frags.triangle != SENTINEL, dtype=dtype)
    return RenderOutput(image=image, mask=mask, depth=depth_img, frag_triangle=frags.triangle,
                        frag_barycentric=bary_img, points_2d=points_2d, colors=colors)


def render(vertices, triangles, colors, pose, camera, cull_backfaces=True):
    """Render model-space vertices with per-vertex (already shaded) colours.

    ``pose`` is a :class:`~facerecon.camera.Pose` or an ``(angles, translation)``
    pair of tensors.
    """
    if isinstance(pose, Pose):
        angles = torch.as_tensor(pose.euler_angles, dtype=vertices.dtype)
        translation = torch.as_tensor(pose.translation, dtype=vertices.dtype)
    else:
        angles, translation = pose
    cam = rigid_transform(vertices, angles, translation)
    uv, z = project(cam, camera)
    out = render_projected(uv, z, triangles, colors, camera.image_size, cull_backfaces)
    out.vertices = vertices
    return out


def render_backward(output, grad_image, wrt=None):
    """Pull an image-space gradient back to the render inputs.

    By default returns ``(d vertices, d colors)``; pass ``wrt`` to get
    gradients for any upstream tensors (texture or lighting coefficients, pose
    parameters, ...). Inputs that do not influence the image get zeros.
    """
    if wrt is None:
        wrt = [t for t in (output.vertices, output.colors) if t is not None]
    wrt = list(wrt)
    live = [t for t in wrt if t.requires_grad]
    grads = {}
    if live and output.image.requires_grad:
        found = torch.autograd.grad(output.image, live, grad_outputs=grad_image,
                                    retain_graph=True, allow_unused=True)
        grads = {id(t): g for t, g in zip(live, found)}
    return tuple(torch.zeros_like(t) if grads.get(id(t)) is None else grads[id(t)] for t in wrt)
