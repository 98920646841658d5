"""Evaluation metrics with brute-force oracle twins.

Every fast implementation here has a deliberately naive counterpart
(``*_bruteforce``) used by the test suite to cross-check it. The fast and
naive paths must agree exactly for IoU and within 1e-9 for the distance
metrics.

Formulas:
- IoU: |A and B| / |A or B| over binary voxel grids.
- Chamfer: 0.5 * mean_p min_q ||p-q|| + 0.5 * mean_q min_p ||q-p||.
- position error: ||t - t_hat||.
- angular error: acos(2 <q, q_hat>^2 - 1), which is blind to the
  quaternion sign.
- ADD: mean_x ||(R x + t) - (R_hat x + t_hat)|| over model points.
- ADD-S: mean_x min_y ||(R x + t) - (R_hat y + t_hat)||, never above ADD.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, PointCloud, VoxelGrid, quat_to_matrix, rotate_points
from .synthdata import Sample


def _grid_values(g) -> np.ndarray:
    return g.values if isinstance(g, VoxelGrid) else np.asarray(g, dtype=np.float64)


def _points(p) -> np.ndarray:
    pts = p.points if isinstance(p, PointCloud) else np.asarray(p, dtype=np.float64)
    return pts.reshape(-1, 3)


def iou(a, b) -> float:
    """Intersection over union of two binary grids; 1.0 when both empty."""
    av, bv = _grid_values(a), _grid_values(b)
    if av.shape != bv.shape:
        raise ValueError(f"grid resolutions differ: {av.shape} vs {bv.shape}")
    a_occ = av > 0
    b_occ = bv > 0
    union = int(np.count_nonzero(a_occ | b_occ))
    if union == 0:
        warnings.warn("iou: both grids empty; defining IoU as 1.0", stacklevel=2)
        return 1.0
    return int(np.count_nonzero(a_occ & b_occ)) / union


def iou_bruteforce(a, b) -> float:
    av, bv = _grid_values(a), _grid_values(b)
    if av.shape != bv.shape:
        raise ValueError("grid resolutions differ")
    inter = union = 0
    for x, y in zip(av.ravel(), bv.ravel()):
        pa, pb = x > 0, y > 0
        inter += pa and pb
        union += pa or pb
    return 1.0 if union == 0 else inter / union


def chamfer(p, q) -> float:
    """Symmetric mean nearest-neighbor distance (exact, KD-tree backed)."""
    pp, qq = _points(p), _points(q)
    if len(pp) == 0 or len(qq) == 0:
        raise ValueError("chamfer distance needs two nonempty clouds")
    d_pq, _ = cKDTree(qq).query(pp)
    d_qp, _ = cKDTree(pp).query(qq)
    return 0.5 * float(d_pq.mean()) + 0.5 * float(d_qp.mean())


def chamfer_bruteforce(p, q) -> float:
    pp, qq = _points(p), _points(q)
    if len(pp) == 0 or len(qq) == 0:
        raise ValueError("chamfer distance needs two nonempty clouds")

    def one_way(a, b):
        total = 0.0
        for x in a:
            best = math.inf
            for y in b:
                best = min(best, math.dist(x, y))
            total += best
        return total / len(a)

    return 0.5 * one_way(pp, qq) + 0.5 * one_way(qq, pp)


def position_error(t, t_hat) -> float:
    t = np.asarray(t, dtype=np.float64).reshape(3)
    t_hat = np.asarray(t_hat, dtype=np.float64).reshape(3)
    return float(np.linalg.norm(t - t_hat))


def _check_unit(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise ValueError("quaternion is not unit length")
    return q


def angular_error(q, q_hat) -> float:
    """acos(2 <q, q_hat>^2 - 1), radians in [0, pi]; sign-insensitive."""
    q = _check_unit(q)
    q_hat = _check_unit(q_hat)
    ip = float(np.clip(np.dot(q, q_hat), -1.0, 1.0))
    return float(np.arccos(np.clip(2.0 * ip * ip - 1.0, -1.0, 1.0)))


def angular_error_deg(q, q_hat) -> float:
    return math.degrees(angular_error(q, q_hat))


def relative_rotation_angle(q, q_hat) -> float:
    """Oracle: geodesic angle of the relative rotation matrix (trace form)."""
    r = quat_to_matrix(_check_unit(q))
    r_hat = quat_to_matrix(_check_unit(q_hat))
    cos_angle = (np.trace(r.T @ r_hat) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))


def _transformed(pose: Pose, pts: np.ndarray) -> np.ndarray:
    return rotate_points(pts, pose.rotation) + pose.translation


def add(gt: Pose, est: Pose, model_pts) -> float:
    """Average distance of corresponding model points under the two poses."""
    pts = _points(model_pts)
    if len(pts) == 0:
        raise ValueError("the model point set is empty")
    return float(np.linalg.norm(_transformed(gt, pts) - _transformed(est, pts), axis=1).mean())


def add_bruteforce(gt: Pose, est: Pose, model_pts) -> float:
    pts = _points(model_pts)
    if len(pts) == 0:
        raise ValueError("the model point set is empty")
    total = 0.0
    for x in pts:
        a = quat_to_matrix(gt.rotation) @ x + gt.translation
        b = quat_to_matrix(est.rotation) @ x + est.translation
        total += math.dist(a, b)
    return total / len(pts)


def add_s(gt: Pose, est: Pose, model_pts) -> float:
    """Closest-point variant of ADD; absorbs object symmetry."""
    pts = _points(model_pts)
    if len(pts) == 0:
        raise ValueError("the model point set is empty")
    gt_pts = _transformed(gt, pts)
    est_pts = _transformed(est, pts)
    d, _ = cKDTree(est_pts).query(gt_pts)
    return float(d.mean())


def add_s_bruteforce(gt: Pose, est: Pose, model_pts) -> float:
    pts = _points(model_pts)
    if len(pts) == 0:
        raise ValueError("the model point set is empty")
    gt_pts = _transformed(gt, pts)
    est_pts = _transformed(est, pts)
    total = 0.0
    for a in gt_pts:
        best = math.inf
        for b in est_pts:
            best = min(best, math.dist(a, b))
        total += best
    return total / len(pts)


def occlusion_level(sample: Sample) -> float:
    """The generator-side definition: fraction of the pre-occlusion mask
    that was hidden, stored at generation time."""
    return float(sample.occlusion_level)
