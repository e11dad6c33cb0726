"""File formats: keyed array containers, OBJ meshes, PNG images and landmark text files."""

import json
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image

CONTAINER_VERSION = 1
_HEADER_KEY = "__header__"


class FormatError(ValueError):
    """Raised when a file on disk does not match the expected layout."""


def _little_endian(a):
    a = np.asarray(a)
    if a.dtype.kind in "iufb" and a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return a


def save_arrays(path, arrays, kind, meta=None):
    """Write named arrays plus a versioned JSON header into one ``.npz`` file.

    Args:
        path: destination file.
        arrays: mapping of name to array. Names must not start with ``__``.
        kind: short string identifying the payload (``"morphable_model"``,
            ``"checkpoint"``, ...). Checked again on load.
        meta: optional JSON-serialisable dict stored in the header.
    """
    header = {"format": "facerecon-container", "version": CONTAINER_VERSION,
              "kind": kind, "meta": meta or {}}
    payload = {}
    for name, value in arrays.items():
        if name.startswith("__"):
            raise ValueError(f"reserved array name {name!r}")
        payload[name] = _little_endian(value)
    payload[_HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path, kind):
    """Inverse of :func:`save_arrays`. Returns ``(arrays, meta)``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            if _HEADER_KEY not in data.files:
                raise FormatError(f"{path}: missing container header")
            header = json.loads(bytes(data[_HEADER_KEY]).decode())
            arrays = {k: data[k] for k in data.files if k != _HEADER_KEY}
    except (OSError, zipfile.BadZipFile, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: not a readable container ({exc})") from exc
    if header.get("format") != "facerecon-container":
        raise FormatError(f"{path}: unknown container format")
    if header.get("version") != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {header.get('version')}")
    if header.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
    return arrays, header.get("meta", {})


def write_obj(path, vertices, triangles, colors=None, uvs=None):
    """Write an ASCII OBJ file. Faces are 1-based; per-vertex colours use the ``v x y z r g b`` extension."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    lines = []
    colors = None if colors is None else np.asarray(colors, dtype=np.float64)
    for i, v in enumerate(vertices.tolist()):
        extra = "" if colors is None else " " + " ".join(repr(x) for x in colors[i].tolist())
        lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}{extra}")
    if uvs is not None:
        for uv in np.asarray(uvs, dtype=np.float64).tolist():
            lines.append(f"vt {uv[0]!r} {uv[1]!r}")
        for f in triangles + 1:
            lines.append(f"f {f[0]}/{f[0]} {f[1]}/{f[1]} {f[2]}/{f[2]}")
    else:
        for f in triangles + 1:
            lines.append(f"f {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Read vertices and triangular faces from an OBJ file.

    Polygons with more than three corners are fan-triangulated. Returns
    ``(vertices, triangles)`` with 0-based indices.
    """
    vertices, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: malformed record {line!r}") from exc
    if not vertices:
        raise FormatError(f"{path}: no vertices")
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise FormatError(f"{path}: face index out of range")
    return v, f


def write_png(path, image):
    """Save an H×W×3 (or H×W) float image in [0, 1] as 8-bit PNG."""
    a = np.asarray(image, dtype=np.float64)
    a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(a).save(path, format="PNG")


def read_png(path):
    """Load an image as float64 H×W×3 in [0, 1]."""
    try:
        with Image.open(path) as im:
            a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc
    return a


def read_mask(path):
    """Load a binary mask image (any non-zero pixel counts as inside)."""
    try:
        with Image.open(path) as im:
            a = np.asarray(im.convert("L"))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read mask ({exc})") from exc
    return (a > 0).astype(np.float64)


def read_landmarks(path, count=68):
    """Read ``count`` lines of ``x y`` pixel coordinates."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read landmarks ({exc})") from exc
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if len(rows) != count or any(len(r) != 2 for r in rows):
        raise FormatError(f"{path}: expected {count} lines of 'x y'")
    try:
        pts = np.array([[float(r[0]), float(r[1])] for r in rows])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric landmark") from exc
    if not np.all(np.isfinite(pts)):
        raise FormatError(f"{path}: non-finite landmark")
    return pts


def write_landmarks(path, points):
    Path(path).write_text("".join(f"{float(x)!r} {float(y)!r}\n" for x, y in np.asarray(points, dtype=np.float64)))
