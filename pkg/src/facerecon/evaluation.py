"""Landmark NME with yaw buckets, and ICP-aligned point-to-plane reconstruction error."""

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

YAW_EDGES = (0.0, 30.0, 60.0, 90.0)
BUCKET_LABELS = ("[0,30)", "[30,60)", "[60,90]")


def bbox_size(points):
    """(h, w) of the tight axis-aligned box around 2D points."""
    p = np.asarray(points, dtype=np.float64)
    w, h = p.max(axis=0) - p.min(axis=0)
    return h, w


def nme(pred, gt, bbox_h=None, bbox_w=None):
    """Mean landmark distance over sqrt(h * w), in percent.

    The box defaults to the tight box around ``gt``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"landmark shapes differ: {pred.shape} vs {gt.shape}")
    if bbox_h is None or bbox_w is None:
        bbox_h, bbox_w = bbox_size(gt)
    d = math.sqrt(bbox_h * bbox_w)
    if d <= 0:
        raise ValueError("degenerate bounding box")
    return 100.0 * np.linalg.norm(pred - gt, axis=1).mean() / d


def yaw_bucket(yaw_deg):
    """Bucket index 0-2 for |yaw|, or None outside [0, 90]."""
    a = abs(float(yaw_deg))
    if a < 30.0:
        return 0
    if a < 60.0:
        return 1
    if a <= 90.0:
        return 2
    return None


def bucket_by_yaw(yaws, seed=0, balance=True):
    """Indices per yaw bucket, optionally subsampled to equal size.

    Balancing draws, without replacement and with a fixed seed, as many
    samples from every non-empty bucket as the smallest non-empty one holds.
    """
    groups = [[], [], []]
    for i, y in enumerate(yaws):
        b = yaw_bucket(y)
        if b is not None:
            groups[b].append(i)
    groups = [np.asarray(g, dtype=np.int64) for g in groups]
    if balance:
        sizes = [len(g) for g in groups if len(g)]
        if sizes:
            n = min(sizes)
            rng = np.random.default_rng(seed)
            groups = [np.sort(rng.choice(g, size=n, replace=False)) if len(g) else g for g in groups]
    return groups


def umeyama(src, dst, with_scale=True):
    """Least-squares similarity ``dst ~ s * R @ src + t`` for paired (N, 3) points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    r = u @ sign @ vt
    var_s = (xs ** 2).sum() / len(src)
    s = float(np.trace(np.diag(d) @ sign) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - s * r @ mu_s
    return s, r, t


@dataclass
class IcpResult:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    errors: list = field(default_factory=list)  # RMS nearest-neighbour distance per iterate

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


_DEGENERATE_SCALE = 1e-2


def _spread(points):
    return np.sqrt(((points - points.mean(0)) ** 2).sum(1).mean())


def _principal_starts(src, dst):
    """Rotations aligning the principal axes of ``src`` with those of ``dst``.

    Axis signs are ambiguous, so all four proper (det = +1) sign choices are
    returned.
    """
    def axes(p):
        _, _, vt = np.linalg.svd(p - p.mean(0), full_matrices=False)
        return vt.T  # columns sorted by decreasing variance

    a_src, a_dst = axes(src), axes(dst)
    starts = []
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        r = a_dst @ np.diag(signs) @ a_src.T
        if np.linalg.det(r) < 0:
            r = a_dst @ np.diag(signs) @ np.diag([1, 1, -1]) @ a_src.T
        starts.append(r)
    return starts


def _icp_from(src, dst, tree, s, r, allow_scale, max_iter, tol):
    t = dst.mean(0) - s * src.mean(0) @ r.T
    dist, nn = tree.query(s * src @ r.T + t)
    errors = [float(np.sqrt(np.mean(dist ** 2)))]
    for _ in range(max_iter):
        if errors[-1] == 0.0:
            break
        s_new, r_new, t_new = umeyama(src, dst[nn], with_scale=allow_scale)
        dist, nn_new = tree.query(s_new * src @ r_new.T + t_new)
        err = float(np.sqrt(np.mean(dist ** 2)))
        if err > errors[-1]:
            break  # numerical noise only; keep the previous iterate
        s, r, t, nn = s_new, r_new, t_new, nn_new
        improvement = (errors[-1] - err) / errors[-1]
        errors.append(err)
        if improvement < tol:
            break
    return IcpResult(scale=s, rotation=r, translation=t, errors=errors)


def icp_align(source, target, allow_scale=True, max_iter=100, tol=1e-6, principal_axes=True):
    """Align ``source`` points onto ``target`` points by similarity ICP.

    Each run starts from centroid alignment, then alternates nearest-neighbour
    matching with a closed-form similarity fit of the original source points.
    It stops after ``max_iter`` updates or when the relative RMS improvement
    drops below ``tol``. Runs start from unit scale and, when ``allow_scale``,
    also from the ratio of RMS spreads; besides the identity rotation,
    ``principal_axes`` adds starts that align the clouds' principal axes.

    The run with the lowest final RMS wins, except that runs whose scale
    collapsed toward zero only win when every run collapsed. Point counts may
    differ, but the source should not extend far beyond the target: crop both
    sides first, otherwise shrinking the source onto the target becomes the
    best fit.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    tree = cKDTree(dst)
    scales = [1.0]
    if allow_scale and _spread(src) > 0:
        ratio = _spread(dst) / _spread(src)
        if ratio != 1.0:
            scales.append(ratio)
    rotations = [np.eye(3)]
    if principal_axes and len(src) >= 3 and len(dst) >= 3:
        rotations += _principal_starts(src, dst)
    best, best_key = None, (True, np.inf)
    for s in scales:
        for r in rotations:
            res = _icp_from(src, dst, tree, s, r, allow_scale, max_iter, tol)
            key = (res.scale < _DEGENERATE_SCALE, res.errors[-1])
            if best is None or key < best_key:
                best, best_key = res, key
            if best_key == (False, 0.0):
                break
        if best_key == (False, 0.0):
            break
    if allow_scale and best.scale < _DEGENERATE_SCALE:
        warnings.warn(f"ICP scale collapsed to {best.scale:.3g}; crop the source to the target's extent",
                      RuntimeWarning, stacklevel=2)
    return best


def crop_to_radius(vertices, triangles, centre_index, radius=95.0):
    """Keep vertices within ``radius`` of vertex ``centre_index``; drop faces that lose a corner.

    Returns ``(vertices, triangles, kept_indices)`` with faces re-indexed.
    """
    v = np.asarray(vertices, dtype=np.float64)
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    keep = np.linalg.norm(v - v[centre_index], axis=1) <= radius
    remap = np.full(len(v), -1, dtype=np.int64)
    kept = np.flatnonzero(keep)
    remap[kept] = np.arange(len(kept))
    tri_keep = keep[tri].all(axis=1)
    return v[kept], remap[tri[tri_keep]], kept


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p, row-wise for (M, 3) arrays.

    Region-based case analysis over the Voronoi regions of the vertices,
    edges and face. Degenerate triangles fall back to their edges.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    put((d6 >= 0) & (d5 <= d6), c)
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab)
        w_ac = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w_bc[:, None] * (c - b))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        face = a + v[:, None] * ab + w[:, None] * ac
    put(np.isfinite(face).all(1), face)
    rest = ~done | ~np.isfinite(out).all(1)
    if rest.any():
        # degenerate triangles: best of the three edges
        best = None
        for x, y in ((a, b), (b, c), (c, a)):
            e = y[rest] - x[rest]
            ee = (e * e).sum(1)
            tt = np.where(ee > 0, ((p[rest] - x[rest]) * e).sum(1) / np.where(ee > 0, ee, 1), 0.0)
            q = x[rest] + np.clip(tt, 0, 1)[:, None] * e
            if best is None:
                best = q
            else:
                closer = ((p[rest] - q) ** 2).sum(1) < ((p[rest] - best) ** 2).sum(1)
                best[closer] = q[closer]
        out[rest] = best
    return out


def point_to_surface_distances(points, vertices, triangles, chunk=4096):
    """Distance from each point to the nearest triangle of a mesh.

    Candidate triangles come from a k-d tree over triangle centroids: once a
    distance bound ``d`` is known, only triangles whose centroid lies within
    ``d + max_circumradius`` can be closer, so the search is exact.
    """
    pts = np.asarray(points, dtype=np.float64)
    v = np.asarray(vertices, dtype=np.float64)
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(tri) == 0:
        raise ValueError("target mesh has no triangles")
    a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    cent = (a + b + c) / 3.0
    rad = np.sqrt(np.maximum.reduce([((x - cent) ** 2).sum(1) for x in (a, b, c)]))
    rmax = float(rad.max())
    tree = cKDTree(cent)
    result = np.empty(len(pts))
    k = min(4, len(tri))
    for start in range(0, len(pts), chunk):
        p = pts[start:start + chunk]
        _, near = tree.query(p, k=k)
        near = np.asarray(near).reshape(len(p), k)
        rows = np.repeat(np.arange(len(p)), k)
        cols = near.reshape(-1)
        q = closest_points_on_triangles(p[rows], a[cols], b[cols], c[cols])
        bound = np.full(len(p), np.inf)
        np.minimum.at(bound, rows, np.linalg.norm(p[rows] - q, axis=1))
        cand = tree.query_ball_point(p, bound + rmax + 1e-9)
        counts = np.array([len(x) for x in cand])
        rows = np.repeat(np.arange(len(p)), counts)
        cols = np.concatenate([np.asarray(x, dtype=np.int64) for x in cand]) if counts.sum() else np.zeros(0, np.int64)
        q = closest_points_on_triangles(p[rows], a[cols], b[cols], c[cols])
        best = np.full(len(p), np.inf)
        np.minimum.at(best, rows, np.linalg.norm(p[rows] - q, axis=1))
        result[start:start + chunk] = np.minimum(best, bound)
    return result


def point_to_plane_rmse(pred_vertices, gt_vertices, gt_triangles):
    """RMS distance from predicted vertices to the ground-truth surface (pred -> gt only)."""
    d = point_to_surface_distances(pred_vertices, gt_vertices, gt_triangles)
    return float(np.sqrt(np.mean(d ** 2)))


@dataclass
class EvaluationReport:
    nme_by_bucket: list = None  # percent per yaw bucket
    nme_mean: float = None
    bucket_counts: list = None
    rmse_by_scenario: dict = None  # label -> {"mean", "std", "subjects", "frames"}
    rows: list = field(default_factory=list)  # per-sample/per-frame records

    def to_json(self):
        d = {}
        if self.nme_by_bucket is not None:
            d["nme"] = {"buckets": dict(zip(BUCKET_LABELS, self.nme_by_bucket)),
                        "mean": self.nme_mean, "counts": dict(zip(BUCKET_LABELS, self.bucket_counts))}
        if self.rmse_by_scenario is not None:
            d["rmse_mm"] = self.rmse_by_scenario
        return d

    def write(self, out_dir, name):
        """Write ``<name>.json``, the table CSV ``<name>.csv`` and ``<name>_rows.csv``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{name}.json").write_text(json.dumps(self.to_json(), indent=2, allow_nan=True))
        with open(out_dir / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            if self.nme_by_bucket is not None:
                w.writerow(list(BUCKET_LABELS) + ["mean"])
                w.writerow([f"{x:.4f}" for x in self.nme_by_bucket] + [f"{self.nme_mean:.4f}"])
            if self.rmse_by_scenario is not None:
                labels = list(self.rmse_by_scenario)
                w.writerow(labels)
                w.writerow([f"{self.rmse_by_scenario[k]['mean']:.4f} ± {self.rmse_by_scenario[k]['std']:.4f}"
                            for k in labels])
        if self.rows:
            keys = list(self.rows[0])
            with open(out_dir / f"{name}_rows.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys)
                w.writeheader()
                w.writerows(self.rows)


def alignment_report(preds, gts, yaws, bboxes=None, seed=0, balance=True):
    """Per-bucket NME over (pred, gt) landmark pairs; mean is the plain mean of the buckets."""
    errs = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        h, w = bboxes[i] if bboxes is not None and bboxes[i] is not None else (None, None)
        errs.append(nme(p, g, h, w))
    errs = np.asarray(errs)
    groups = bucket_by_yaw(yaws, seed=seed, balance=balance)
    per = [float(errs[g].mean()) if len(g) else float("nan") for g in groups]
    rows = [{"index": i, "yaw": float(yaws[i]), "bucket": yaw_bucket(yaws[i]), "nme": float(errs[i])}
            for i in range(len(errs))]
    return EvaluationReport(nme_by_bucket=per, nme_mean=float(np.mean(per)),
                            bucket_counts=[int(len(g)) for g in groups], rows=rows)


def reconstruction_error(pred_vertices, gt_vertices, gt_triangles, gt_nose_tip,
                         radius=95.0, pred_nose_tip=None, allow_scale=True):
    """Crop, align and measure one predicted mesh against its scan. Returns (rmse, icp)."""
    gv, gt_tri, _ = crop_to_radius(gt_vertices, gt_triangles, gt_nose_tip, radius)
    pv = np.asarray(pred_vertices, dtype=np.float64)
    if pred_nose_tip is not None:
        pv = pv[np.linalg.norm(pv - pv[pred_nose_tip], axis=1) <= radius]
    icp = icp_align(pv, gv, allow_scale=allow_scale)
    return point_to_plane_rmse(icp.apply(pv), gv, gt_tri), icp


def reconstruction_report(frames):
    """Aggregate per-frame errors: mean per (scenario, subject), then mean ± std over subjects.

    ``frames`` is an iterable of dicts with ``scenario``, ``subject`` and ``rmse``.
    """
    frames = list(frames)
    per_subject = {}
    for f in frames:
        per_subject.setdefault(f["scenario"], {}).setdefault(f["subject"], []).append(f["rmse"])
    table = {}
    for scen, subjects in per_subject.items():
        means = np.array([np.mean(v) for v in subjects.values()])
        table[scen] = {"mean": float(means.mean()), "std": float(means.std()),
                       "subjects": len(means), "frames": int(sum(len(v) for v in subjects.values()))}
    return EvaluationReport(rmse_by_scenario=table, rows=frames)


def _read_jsonl(path):
    from .io import FormatError

    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc})") from exc
    out = []
    for lineno, line in enumerate(lines, 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON") from exc
    return out


def evaluate_alignment(manifest, predictor=None, seed=0, balance=True):
    """NME report for a JSON-lines manifest.

    Records carry ``landmarks`` (ground truth file), ``yaw`` (degrees) and
    either ``pred_landmarks`` (file) or ``image``, which is passed to
    ``predictor(image_path) -> (68, 2)``. An optional ``bbox`` gives ``[h, w]``.
    """
    from .io import FormatError, read_landmarks

    root = Path(manifest).parent
    preds, gts, yaws, boxes = [], [], [], []
    for i, rec in enumerate(_read_jsonl(manifest)):
        if "landmarks" not in rec or "yaw" not in rec:
            raise FormatError(f"{manifest}: record {i} needs 'landmarks' and 'yaw'")
        gts.append(read_landmarks(root / rec["landmarks"]))
        if "pred_landmarks" in rec:
            preds.append(read_landmarks(root / rec["pred_landmarks"]))
        elif predictor is not None and "image" in rec:
            preds.append(np.asarray(predictor(root / rec["image"])))
        else:
            raise FormatError(f"{manifest}: record {i} has no prediction source")
        yaws.append(float(rec["yaw"]))
        boxes.append(tuple(rec["bbox"]) if "bbox" in rec else None)
    if not gts:
        raise FormatError(f"{manifest}: empty manifest")
    return alignment_report(preds, gts, yaws, boxes, seed=seed, balance=balance)


def evaluate_reconstruction(manifest, radius=95.0, predictor=None, pred_nose_tip=None):
    """Point-to-plane RMSE report for a JSON-lines manifest of scan pairs.

    Records carry ``gt`` (OBJ), ``nose_tip`` (ground-truth vertex index),
    ``scenario`` and either ``pred`` (OBJ) or ``image`` for
    ``predictor(image_path) -> (N, 3) vertices``. ``subject`` defaults to the
    ground-truth path; ``pred_nose_tip`` (per record, or the argument as a
    default) crops the prediction to the same radius, which keeps the scaled
    alignment well posed when the prediction covers more than the crop.
    """
    from .io import FormatError, read_obj

    root = Path(manifest).parent
    frames = []
    for i, rec in enumerate(_read_jsonl(manifest)):
        missing = [k for k in ("gt", "nose_tip", "scenario") if k not in rec]
        if missing:
            raise FormatError(f"{manifest}: record {i} lacks {', '.join(missing)}")
        gv, gtri = read_obj(root / rec["gt"])
        if "pred" in rec:
            pv, _ = read_obj(root / rec["pred"])
        elif predictor is not None and "image" in rec:
            pv = np.asarray(predictor(root / rec["image"]))
        else:
            raise FormatError(f"{manifest}: record {i} has no prediction source")
        if not 0 <= int(rec["nose_tip"]) < len(gv):
            raise FormatError(f"{manifest}: record {i} nose_tip out of range")
        rmse, icp = reconstruction_error(pv, gv, gtri, int(rec["nose_tip"]), radius,
                                         rec.get("pred_nose_tip", pred_nose_tip))
        frames.append({"scenario": rec["scenario"], "subject": str(rec.get("subject", rec["gt"])),
                       "frame": i, "rmse": rmse, "icp_scale": icp.scale,
                       "icp_iterations": len(icp.errors) - 1})
    if not frames:
        raise FormatError(f"{manifest}: empty manifest")
    return reconstruction_report(frames)
