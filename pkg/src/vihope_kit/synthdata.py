"""Procedural in-hand visuotactile sample generation.

Replaces a photorealistic capture rig at desk scale: procedural objects are
stored as dense uniform-area surface samples, rendered with a z-buffer
point-splat rasterizer, occluded by elliptical "finger" masks, and touched
by contiguous tactile patches. Ground-truth masks, poses, and complete
clouds come straight from the generator.

Camera convention: pinhole, x right / y down / z forward. A point projects
to continuous image coordinates ``u = fx*x/z + cx``, ``v = fy*y/z + cy``;
the pixel index is the floor. Back-projection uses the pixel center
``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DatasetConfig
from .errors import NoObservationError
from .geometry import (
    PointCloud,
    Pose,
    Role,
    quat_to_matrix,
    random_so3,
    transform,
)


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


def default_camera(height: int, width: int) -> CameraIntrinsics:
    """Fixed intrinsics derived from the image size (nothing to persist)."""
    f = 1.5 * width
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                            width=width, height=height)


@dataclass
class ObjectModel:
    id: str
    surface_points: PointCloud  # role MODEL, canonical frame, bbox centered
    surface_normals: np.ndarray  # (N, 3) outward unit normals (for shading)
    extents: np.ndarray  # (3,) meters
    symmetry: str  # none | axial | planar

    def __post_init__(self):
        self.surface_normals = np.asarray(self.surface_normals, dtype=np.float64).reshape(-1, 3)
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if len(self.surface_points) != len(self.surface_normals):
            raise ValueError("one normal per surface point required")
        if np.any(self.extents <= 0):
            raise ValueError("extents must be positive")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32 meters, 0 = no hit
    mask: np.ndarray  # (H, W) bool
    tactile: PointCloud  # role TACTILE
    gt_pose: Pose
    gt_complete: PointCloud  # role COMPLETE
    object_id: str
    occlusion_level: float

    def __post_init__(self):
        if np.any(self.mask & ~(self.depth > 0)):
            raise ValueError("mask must imply depth > 0")


# ---------------------------------------------------------------------------
# procedural objects


def _box_faces(dims: np.ndarray) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, float]]:
    """(origin, edge_u, edge_v, area) per face of an origin-centered box."""
    dx, dy, dz = dims
    h = dims / 2.0
    faces = []
    for axis, sign in ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)):
        normal = np.zeros(3)
        normal[axis] = sign
        u_axis, v_axis = [a for a in range(3) if a != axis]
        origin = normal * h[axis]
        eu = np.zeros(3)
        eu[u_axis] = dims[u_axis]
        ev = np.zeros(3)
        ev[v_axis] = dims[v_axis]
        origin = origin - eu / 2 - ev / 2
        faces.append((origin, eu, ev, dims[u_axis] * dims[v_axis], normal))
    return faces


def _sample_box_surface(dims, n, rng):
    faces = _box_faces(np.asarray(dims, dtype=np.float64))
    areas = np.array([f[3] for f in faces])
    probs = areas / areas.sum()
    which = rng.choice(len(faces), size=n, p=probs)
    uv = rng.uniform(size=(n, 2))
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    for i, f_idx in enumerate(which):
        origin, eu, ev, _, normal = faces[f_idx]
        pts[i] = origin + uv[i, 0] * eu + uv[i, 1] * ev
        nrm[i] = normal
    return pts, nrm


def _sample_cylinder_surface(radius, height, n, rng):
    """Flat-capped cylinder centered at the origin, axis along z."""
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    probs = np.array([lateral, cap, cap])
    probs = probs / probs.sum()
    which = rng.choice(3, size=n, p=probs)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    for i in range(n):
        c, s = np.cos(theta[i]), np.sin(theta[i])
        if which[i] == 0:
            z = rng.uniform(-height / 2, height / 2)
            pts[i] = (radius * c, radius * s, z)
            nrm[i] = (c, s, 0.0)
        else:
            sign = 1.0 if which[i] == 1 else -1.0
            rho = radius * np.sqrt(rng.uniform())
            pts[i] = (rho * c, rho * s, sign * height / 2)
            nrm[i] = (0.0, 0.0, sign)
    return pts, nrm


def _sample_capsule_surface(radius, total_height, n, rng):
    """Cylinder with hemispherical end caps, axis along z."""
    h_cyl = total_height - 2 * radius
    if h_cyl <= 0:
        raise ValueError("capped cylinder needs height > diameter")
    lateral = 2 * np.pi * radius * h_cyl
    sphere = 4 * np.pi * radius**2  # both hemispheres together
    probs = np.array([lateral, sphere])
    probs = probs / probs.sum()
    which = rng.choice(2, size=n, p=probs)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    for i in range(n):
        if which[i] == 0:
            theta = rng.uniform(0, 2 * np.pi)
            c, s = np.cos(theta), np.sin(theta)
            pts[i] = (radius * c, radius * s, rng.uniform(-h_cyl / 2, h_cyl / 2))
            nrm[i] = (c, s, 0.0)
        else:
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            center_z = h_cyl / 2 if d[2] >= 0 else -h_cyl / 2
            pts[i] = radius * d + np.array([0.0, 0.0, center_z])
            nrm[i] = d
    return pts, nrm


def _sample_lbracket_surface(dims, n, rng):
    """L-shaped union of two boxes, bounding box centered at the origin."""
    dx, dy, dz = np.asarray(dims, dtype=np.float64)
    tx, tz = 0.45 * dx, 0.45 * dz
    shift = np.array([dx, dy, dz]) / 2.0
    # leg A: upright, spans x in [0, tx], z in [0, dz]; leg B: foot, z in [0, tz]
    box_a = (np.array([0.0, 0.0, 0.0]), np.array([tx, dy, dz]))
    box_b = (np.array([0.0, 0.0, 0.0]), np.array([dx, dy, tz]))

    def inside(p, box):
        lo, hi = box
        return np.all((p > lo + 1e-12) & (p < hi - 1e-12), axis=-1)

    pts = np.empty((0, 3))
    nrm = np.empty((0, 3))
    area_a = 2 * (tx * dy + tx * dz + dy * dz)
    area_b = 2 * (dx * dy + dx * tz + dy * tz)
    p_a = area_a / (area_a + area_b)
    while len(pts) < n:
        m = max(64, 2 * (n - len(pts)))
        take_a = rng.uniform(size=m) < p_a
        cand = np.empty((m, 3))
        cnrm = np.empty((m, 3))
        n_a = int(take_a.sum())
        if n_a:
            pa, na = _sample_box_surface(box_a[1] - box_a[0], n_a, rng)
            cand[take_a] = pa + (box_a[0] + box_a[1]) / 2
            cnrm[take_a] = na
        if m - n_a:
            pb, nb = _sample_box_surface(box_b[1] - box_b[0], m - n_a, rng)
            cand[~take_a] = pb + (box_b[0] + box_b[1]) / 2
            cnrm[~take_a] = nb
        hidden = np.where(take_a, inside(cand, box_b), inside(cand, box_a))
        pts = np.vstack([pts, cand[~hidden]])
        nrm = np.vstack([nrm, cnrm[~hidden]])
    return pts[:n] - shift, nrm[:n]


_SYMMETRY = {"box": "planar", "cylinder": "axial", "capped_cylinder": "axial",
             "lbracket": "none"}


def make_object(kind: str, dims, rng: np.random.Generator, n_points: int = 4096,
                object_id: str | None = None) -> ObjectModel:
    """Uniform-area surface sampling of a procedural object, canonical frame."""
    dims = np.asarray(dims, dtype=np.float64)
    if np.any(dims <= 0):
        raise ValueError("object dims must be positive")
    if dims.max() > 0.25:
        raise ValueError("desk-scale objects are capped at 0.25 m")
    if kind == "box":
        pts, nrm = _sample_box_surface(dims, n_points, rng)
    elif kind == "cylinder":
        pts, nrm = _sample_cylinder_surface(dims[0] / 2, dims[2], n_points, rng)
    elif kind == "capped_cylinder":
        pts, nrm = _sample_capsule_surface(dims[0] / 2, dims[2], n_points, rng)
    elif kind == "lbracket":
        pts, nrm = _sample_lbracket_surface(dims, n_points, rng)
    else:
        raise ValueError(f"unknown object kind {kind!r}")
    return ObjectModel(
        id=object_id or kind,
        surface_points=PointCloud(pts, Role.MODEL),
        surface_normals=nrm,
        extents=dims,
        symmetry=_SYMMETRY[kind],
    )


# ---------------------------------------------------------------------------
# rendering

_LIGHT_DIR = np.array([0.3, -0.4, -0.866])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
MIN_RENDER_Z = 0.1


def render(obj: ObjectModel, pose: Pose, cam: CameraIntrinsics,
           rng: np.random.Generator | None = None):
    """Z-buffer point splat of the transformed surface samples.

    Returns (image, depth, mask). The image is normal-shaded grayscale on a
    domain-randomized background; pass ``rng=None`` for a fixed mid-gray
    background without noise.
    """
    h, w = cam.height, cam.width
    depth = np.zeros((h, w), dtype=np.float64)
    shade_buf = np.zeros((h, w), dtype=np.float64)
    pts = transform(obj.surface_points, pose).points
    if len(pts):
        if pts[:, 2].min() <= MIN_RENDER_Z:
            raise ValueError("object behind camera")
        normals = obj.surface_normals @ quat_to_matrix(pose.rotation).T
        u = np.floor(cam.fx * pts[:, 0] / pts[:, 2] + cam.cx).astype(np.int64)
        v = np.floor(cam.fy * pts[:, 1] / pts[:, 2] + cam.cy).astype(np.int64)
        ok = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        u, v, z = u[ok], v[ok], pts[ok, 2]
        shade = 0.2 + 0.8 * np.clip(normals[ok] @ (-_LIGHT_DIR), 0.0, 1.0)
        # nearest point wins each pixel: process in decreasing z so the last
        # write is the smallest depth
        order = np.argsort(-z, kind="stable")
        depth[v[order], u[order]] = z[order]
        shade_buf[v[order], u[order]] = shade[order]
    mask = depth > 0
    if rng is not None:
        background = rng.uniform(0.0, 1.0, size=3)
        image = np.broadcast_to(background, (h, w, 3)).copy()
    else:
        image = np.full((h, w, 3), 0.5)
    image[mask] = shade_buf[mask, None]
    if rng is not None:
        image += rng.normal(0.0, 0.02, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return image.astype(np.float32), depth.astype(np.float32), mask


# ---------------------------------------------------------------------------
# occlusion


def _ellipse_hidden(mask, center, axes, angle):
    h, w = mask.shape
    vv, uu = np.mgrid[0:h, 0:w]
    du = uu + 0.5 - center[0]
    dv = vv + 0.5 - center[1]
    c, s = np.cos(angle), np.sin(angle)
    x = c * du + s * dv
    y = -s * du + c * dv
    inside = (x / axes[0]) ** 2 + (y / axes[1]) ** 2 <= 1.0
    return mask & inside


def simulate_occlusion(depth: np.ndarray, mask: np.ndarray, level: float,
                       rng: np.random.Generator):
    """Hide the requested fraction of mask pixels under 1-4 elliptical
    occluders (best effort within +/-0.05 of the request)."""
    if not (0.0 <= level <= 0.95):
        raise ValueError("occlusion level must lie in [0, 0.95]")
    depth = depth.copy()
    mask = mask.copy()
    visible0 = int(mask.sum())
    if level == 0.0 or visible0 == 0:
        return depth, mask
    target = level * visible0
    band = 0.04 * visible0
    hidden_total = np.zeros_like(mask)
    n_occluders = int(rng.integers(1, 5))
    ys, xs = np.nonzero(mask)
    for i in range(n_occluders):
        remaining = target - hidden_total.sum()
        if remaining <= band:
            break
        j = rng.integers(len(xs))
        center = (xs[j] + 0.5, ys[j] + 0.5)
        angle = rng.uniform(0, np.pi)
        if i < n_occluders - 1:
            want = remaining * rng.uniform(0.3, 0.7)
        else:
            want = remaining
        s0 = np.sqrt(max(want, 1.0) / np.pi)
        aspect = rng.uniform(1.2, 2.2)  # elongated, finger-like
        base = np.array([s0 * aspect, s0 / aspect])
        # monotone in scale: bisect so the union lands at or under the target
        lo, hi = 0.0, 1.0
        grow = lambda f: (hidden_total | _ellipse_hidden(mask, center, base * f, angle)).sum()
        while grow(hi) < target - band and hi < 64:
            hi *= 2.0
        best = None
        for _ in range(24):
            mid = 0.5 * (lo + hi)
            got = grow(mid)
            if got > target + band:
                hi = mid
            else:
                lo = mid
                best = mid
                if got >= target - band:
                    break
        f = best if best is not None else lo
        if f > 0:
            hidden_total |= _ellipse_hidden(mask, center, base * f, angle)
    mask_out = mask & ~hidden_total
    depth[~mask_out] = 0.0
    return depth, mask_out


def achieved_occlusion(mask_before: np.ndarray, mask_after: np.ndarray) -> float:
    """1 - visible/initially-visible; 0 when nothing was visible to begin with."""
    before = int(mask_before.sum())
    if before == 0:
        return 0.0
    return 1.0 - int(mask_after.sum()) / before


# ---------------------------------------------------------------------------
# tactile simulation


def sample_tactile(obj: ObjectModel, pose: Pose, n: int,
                   rng: np.random.Generator) -> PointCloud:
    """n contact points from 2-4 contiguous surface patches, posed."""
    if not (0 <= n <= 200):
        raise ValueError("tactile point count must lie in [0, 200]")
    if n == 0:
        return PointCloud(np.empty((0, 3)), Role.TACTILE)
    surface = obj.surface_points.points
    n_patches = min(int(rng.integers(2, 5)), n)
    seeds = [int(rng.integers(len(surface)))]
    while len(seeds) < n_patches:
        cand = rng.integers(len(surface), size=24)
        seed_pts = surface[seeds]
        spread = np.array([
            np.min(np.linalg.norm(seed_pts - surface[c], axis=1)) for c in cand
        ])
        seeds.append(int(cand[int(np.argmax(spread))]))
    counts = [n // n_patches] * n_patches
    for i in range(n % n_patches):
        counts[i] += 1
    picked = []
    for seed, count in zip(seeds, counts):
        d = np.linalg.norm(surface - surface[seed], axis=1)
        picked.append(np.argsort(d, kind="stable")[:count])
    pts = surface[np.concatenate(picked)]
    return transform(PointCloud(pts, Role.TACTILE), pose)


# ---------------------------------------------------------------------------
# observation assembly


def backproject(depth: np.ndarray, mask: np.ndarray,
                cam: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points of masked depth pixels (row-major pixel order)."""
    v, u = np.nonzero(mask)
    z = depth[v, u].astype(np.float64)
    x = (u + 0.5 - cam.cx) * z / cam.fx
    y = (v + 0.5 - cam.cy) * z / cam.fy
    return np.column_stack([x, y, z])


def build_partial(depth: np.ndarray, mask: np.ndarray, cam: CameraIntrinsics,
                  tactile: PointCloud) -> PointCloud:
    """Union of the back-projected visual cloud and the tactile cloud."""
    if depth.shape != mask.shape:
        raise ValueError("depth and mask shapes differ")
    visual = backproject(depth, mask, cam)
    merged = np.vstack([visual, tactile.points])
    if len(merged) == 0:
        raise NoObservationError("no observation")
    return PointCloud(merged, Role.MERGED)


# ---------------------------------------------------------------------------
# dataset generation


def object_rng(seed: int, obj_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0, obj_index)))


def sample_rng(seed: int, sample_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, sample_index)))


def build_objects(cfg: DatasetConfig, seed: int) -> list[ObjectModel]:
    return [
        make_object(spec.kind, spec.dims, object_rng(seed, i),
                    n_points=cfg.surface_points, object_id=spec.id)
        for i, spec in enumerate(cfg.objects)
    ]


def _random_pose(obj: ObjectModel, cam: CameraIntrinsics, cfg: DatasetConfig,
                 rng: np.random.Generator) -> Pose:
    q = random_so3(rng)
    z = rng.uniform(*cfg.z_range)
    half_extent = float(np.linalg.norm(obj.extents) / 2)
    margin = 4.0  # pixels kept clear of the image border
    bx = max(0.002, (cam.width / 2 - margin) * z / cam.fx - half_extent)
    by = max(0.002, (cam.height / 2 - margin) * z / cam.fy - half_extent)
    t = np.array([rng.uniform(-bx, bx), rng.uniform(-by, by), z])
    return Pose(q, t)


def generate_sample(obj: ObjectModel, cam: CameraIntrinsics, cfg: DatasetConfig,
                    rng: np.random.Generator) -> Sample:
    pose = _random_pose(obj, cam, cfg, rng)
    image, depth, mask = render(obj, pose, cam, rng)
    requested = rng.uniform(*cfg.occlusion_range)
    depth2, mask2 = simulate_occlusion(depth, mask, requested, rng)
    occlusion = achieved_occlusion(mask, mask2)
    hidden = mask & ~mask2
    if hidden.any():
        finger = rng.uniform(0.25, 0.75, size=3)
        image = image.copy()
        image[hidden] = np.clip(finger + rng.normal(0, 0.02, size=(int(hidden.sum()), 3)),
                                0.0, 1.0).astype(np.float32)
    if cfg.depth_noise_std > 0:
        noisy = depth2.copy()
        noisy[mask2] += rng.normal(0.0, cfg.depth_noise_std, size=int(mask2.sum()))
        depth2 = np.maximum(noisy, 1e-3).astype(np.float32) * mask2
    tactile = sample_tactile(obj, pose, cfg.tactile_points, rng)
    gt_complete = transform(PointCloud(obj.surface_points.points, Role.COMPLETE), pose)
    return Sample(
        image=image,
        depth=depth2.astype(np.float32),
        mask=mask2,
        tactile=tactile,
        gt_pose=pose,
        gt_complete=gt_complete,
        object_id=obj.id,
        occlusion_level=float(occlusion),
    )


def generate_dataset(cfg: DatasetConfig, seed: int, out_dir=None):
    """Write a dataset directory (records + manifest); bit-identical per
    (config, seed). Returns the manifest."""
    from . import dataio  # local import: dataio depends on this module's types

    out = out_dir if out_dir is not None else cfg.path
    objects = build_objects(cfg, seed)
    cam = default_camera(*cfg.image_hw)
    total = cfg.samples_per_object * len(objects)
    writer = dataio.DatasetWriter(out, cfg, seed)
    for idx in range(total):
        obj = objects[idx % len(objects)]
        sample = generate_sample(obj, cam, cfg, sample_rng(seed, idx))
        writer.add(sample)
    return writer.finalize()
