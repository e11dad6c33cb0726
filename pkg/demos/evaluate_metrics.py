"""Walk through the two evaluation metrics on synthetic data.

Landmark NME: perturb ground-truth landmarks with noise that grows with yaw
and report the error per yaw bucket. Reconstruction RMSE: distort a scan by a
similarity transform plus noise, let ICP undo the transform, and report the
remaining point-to-surface error.

    python demos/evaluate_metrics.py
"""

import numpy as np
from scipy.spatial.transform import Rotation

from facerecon.evaluation import (BUCKET_LABELS, alignment_report, icp_align, point_to_plane_rmse,
                                  reconstruction_error)
from facerecon.morphable_model import synthesize_toy_model


def landmark_demo(rng):
    yaws = rng.uniform(-90, 90, size=300)
    gts, preds = [], []
    for yaw in yaws:
        gt = rng.uniform(40, 180, size=(68, 2))
        noise = 1.0 + 3.0 * abs(yaw) / 90.0  # profile faces are harder
        gts.append(gt)
        preds.append(gt + rng.normal(scale=noise, size=gt.shape))
    report = alignment_report(preds, gts, yaws, seed=0)
    print("landmark NME (% of sqrt(h*w)) per yaw bucket, balanced:")
    for label, value, n in zip(BUCKET_LABELS, report.nme_by_bucket, report.bucket_counts):
        print(f"  {label:>8}: {value:.3f}  ({n} faces)")
    print(f"  mean    : {report.nme_mean:.3f}")


def reconstruction_demo(rng):
    model = synthesize_toy_model(seed=5, n_vertices=1500)
    scan, tri = model.mean_shape.reshape(-1, 3), model.triangles
    r = Rotation.from_euler("xyz", [5, -10, 3], degrees=True).as_matrix()
    pred = 1.15 * scan @ r.T + [4.0, -2.0, 7.0]
    print(f"\nbefore alignment: RMSE {point_to_plane_rmse(pred, scan, tri):.2f} mm")
    icp = icp_align(pred, scan)
    print(f"ICP recovered scale {icp.scale:.4f} (expected {1 / 1.15:.4f}) in {len(icp.errors) - 1} iterations")
    # A realistic prediction is already in millimetres, so its scale is close to one.
    noisy = 1.03 * scan @ r.T + [4.0, -2.0, 7.0] + rng.normal(scale=0.5, size=scan.shape)
    # Crop both meshes around their nose tips. Without the crop on the prediction,
    # shrinking it onto the smaller scan would look like a perfect fit.
    rmse, icp = reconstruction_error(noisy, scan, tri, model.nose_tip_index, radius=95.0,
                                     pred_nose_tip=model.nose_tip_index)
    print(f"scale 1.03 plus 0.5 mm noise, both cropped to 95 mm around the nose: "
          f"RMSE {rmse:.3f} mm, ICP scale {icp.scale:.4f} (expected {1 / 1.03:.4f})")


if __name__ == "__main__":
    rng = np.random.default_rng(0)
    landmark_demo(rng)
    reconstruction_demo(rng)
