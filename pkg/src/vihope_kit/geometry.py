"""Point-cloud, voxel, and rotation math shared by the whole pipeline.

Conventions
-----------
- Points are float64 arrays of shape (N, 3), meters, camera frame unless a
  normalization says otherwise.
- Quaternions are (w, x, y, z), Hamilton product, active rotations. q and -q
  denote the same rotation; ``canonicalize_quat`` (w >= 0) is for storage
  only and must never be applied inside losses.
- The normalized voxel domain is the cube [-1, 1]^3. A cloud is normalized
  by ``(p - mu) / (sigma * padding)`` where ``mu`` is the centroid and
  ``sigma`` the farthest distance from it.
- Voxel index along each axis: ``i = floor((x + 1) / 2 * res)``, clamped to
  ``res - 1`` at the +1 boundary. Points strictly outside the cube are
  dropped, never clamped, and the drop count is kept as a diagnostic.

All operations are pure functions of their inputs plus an explicit seeded
random generator, so they are safe to call concurrently.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class Role(enum.Enum):
    """What a point cloud represents in the pipeline."""

    VISUAL = "visual"
    TACTILE = "tactile"
    MERGED = "merged"
    COMPLETE = "complete"
    MODEL = "model"


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    role: Role

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if not isinstance(self.role, Role):
            self.role = Role(self.role)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class VoxelGrid:
    values: np.ndarray  # (nx, ny, nz) floats in [0, 1]
    resolution: tuple[int, int, int]
    dropped_points: int = 0  # diagnostic: points outside [-1,1]^3 at voxelization

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.resolution = tuple(int(r) for r in self.resolution)
        if self.values.shape != self.resolution:
            raise ValueError(
                f"grid shape {self.values.shape} != resolution {self.resolution}"
            )
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("voxel values must lie in [0, 1]")

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def binarize(self, threshold: float = 0.5) -> "VoxelGrid":
        return VoxelGrid((self.values >= threshold).astype(np.float64), self.resolution)

    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.values))


@dataclass
class Pose:
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("pose quaternion is not unit length")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))


@dataclass
class NormFactors:
    mu: np.ndarray  # (3,) centroid, meters
    sigma: float  # farthest distance from centroid, meters
    padding: float  # unitless margin factor, >= 1
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.sigma = float(self.sigma)
        self.padding = float(self.padding)
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.padding < 1:
            raise ValueError("padding must be >= 1")

    @property
    def scale(self) -> float:
        return self.sigma * self.padding

    @staticmethod
    def identity() -> "NormFactors":
        return NormFactors(np.zeros(3), 1.0, 1.0)


# ---------------------------------------------------------------------------
# quaternion helpers


def quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2, both (w, x, y, z)."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def canonicalize_quat(q: np.ndarray) -> np.ndarray:
    """Flip sign so w >= 0. Storage convenience only; not for losses."""
    q = np.asarray(q, dtype=np.float64)
    return -q if q[0] < 0 else q.copy()


def rotate_points(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    return points @ quat_to_matrix(q).T


# ---------------------------------------------------------------------------
# operations


def normalize(cloud: PointCloud, padding: float = 1.25) -> tuple[PointCloud, NormFactors]:
    """Center on the centroid and scale by the farthest distance from it.

    Returns the normalized cloud and the factors needed to undo the map.
    A single-point or fully coincident cloud has sigma 0; it is replaced by
    1.0 and the factors are flagged degenerate.
    """
    if len(cloud) == 0:
        raise ValueError("empty input")
    mu = cloud.points.mean(axis=0)
    dists = np.linalg.norm(cloud.points - mu, axis=1)
    sigma = float(dists.max())
    degenerate = sigma == 0.0
    if degenerate:
        sigma = 1.0
    nf = NormFactors(mu, sigma, padding, degenerate=degenerate)
    out = (cloud.points - mu) / nf.scale
    return PointCloud(out, cloud.role), nf


def apply_normalization(points: np.ndarray, nf: NormFactors) -> np.ndarray:
    """Forward map (p - mu) / (sigma * padding) with given factors."""
    return (np.asarray(points, dtype=np.float64) - nf.mu) / nf.scale


def invert_normalization(points: np.ndarray, nf: NormFactors) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) * nf.scale + nf.mu


def voxelize(cloud: PointCloud, res: int) -> VoxelGrid:
    """Binary occupancy of the uniform res^3 partition of [-1, 1]^3.

    The cloud must already be normalized. Points strictly outside the cube
    are dropped and counted in ``dropped_points``.
    """
    if res <= 0:
        raise ValueError("resolution must be positive")
    values = np.zeros((res, res, res), dtype=np.float64)
    pts = cloud.points
    if len(pts) == 0:
        return VoxelGrid(values, (res, res, res))
    inside = np.all(np.abs(pts) <= 1.0, axis=1)
    dropped = int(len(pts) - inside.sum())
    kept = pts[inside]
    if len(kept):
        idx = np.floor((kept + 1.0) / 2.0 * res).astype(np.int64)
        np.clip(idx, 0, res - 1, out=idx)  # x == +1 maps to the last cell
        values[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelGrid(values, (res, res, res), dropped_points=dropped)


def devoxelize(
    grid: VoxelGrid,
    nf: NormFactors,
    threshold: float = 0.5,
    role: Role = Role.COMPLETE,
) -> PointCloud:
    """One point per voxel with value >= threshold, at the voxel center,
    mapped back through the inverse of :func:`normalize`."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    res = np.asarray(grid.resolution, dtype=np.float64)
    idx = np.argwhere(grid.values >= threshold)
    if len(idx) == 0:
        return PointCloud(np.empty((0, 3)), role)
    centers = -1.0 + (idx + 0.5) * 2.0 / res
    return PointCloud(invert_normalization(centers, nf), role)


def random_so3(rng: np.random.Generator) -> np.ndarray:
    """Unit quaternion uniform on SO(3) (normalized 4D Gaussian)."""
    while True:
        q = rng.normal(size=4)
        n = np.linalg.norm(q)
        if n > 1e-12:
            return q / n


def transform(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Apply p -> R p + t to every point."""
    if abs(np.linalg.norm(pose.rotation) - 1.0) > 1e-6:
        raise ValueError("pose quaternion is not unit length")
    pts = rotate_points(cloud.points, pose.rotation) + pose.translation
    return PointCloud(pts, cloud.role)


def compose(p2: Pose, p1: Pose) -> Pose:
    """Pose equal to applying p1 first, then p2."""
    q = quat_mul(p2.rotation, p1.rotation)
    q = q / np.linalg.norm(q)
    t = rotate_points(p1.translation[None, :], p2.rotation)[0] + p2.translation
    return Pose(q, t)


def inverse(pose: Pose) -> Pose:
    qinv = quat_conjugate(pose.rotation)
    return Pose(qinv, -rotate_points(pose.translation[None, :], qinv)[0])


def sor_filter(cloud: PointCloud, k: int = 20, std_ratio: float = 1.0) -> PointCloud:
    """Statistical outlier removal.

    Removes every point whose mean distance to its k nearest neighbors
    exceeds (global mean + std_ratio * global std) of that statistic,
    preserving the order of survivors. Clouds with at most k points are
    returned unchanged with a warning. Population std (ddof=0) is used.
    """
    n = len(cloud)
    if n <= k:
        warnings.warn(
            f"sor_filter: cloud of {n} points has no {k} neighbors; returned unchanged",
            stacklevel=2,
        )
        return PointCloud(cloud.points.copy(), cloud.role)
    tree = cKDTree(cloud.points)
    dists, _ = tree.query(cloud.points, k=k + 1)  # first neighbor is the point itself
    mean_dists = dists[:, 1:].mean(axis=1)
    threshold = mean_dists.mean() + std_ratio * mean_dists.std()
    keep = mean_dists <= threshold
    return PointCloud(cloud.points[keep], cloud.role)
