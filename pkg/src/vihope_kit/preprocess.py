"""Turns raw samples into the tensors the networks consume.

Per sample: back-project the masked depth map, merge the tactile points,
normalize with the partial cloud's centroid and farthest-point radius,
voxelize, and voxelize the ground-truth complete cloud **in the same
frame**. The shared frame is what makes the partial-to-complete latent
mapping well-posed, so the complete grid always reuses the partial cloud's
normalization factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .dataio import Dataset
from .errors import NoObservationError
from .geometry import (
    NormFactors,
    PointCloud,
    Role,
    apply_normalization,
    sor_filter,
    voxelize,
    normalize,
)
from .synthdata import CameraIntrinsics, Sample, backproject, default_camera


@dataclass
class PreparedSample:
    v_partial: np.ndarray  # (res,res,res) uint8
    v_complete: np.ndarray  # (res,res,res) uint8, same normalization frame
    mu: np.ndarray  # (3,) partial centroid, meters
    sigma: float  # farthest-point radius, meters
    scale: float  # sigma * padding
    nf: NormFactors
    image: np.ndarray  # (3,H,W) float32
    quat_gt: np.ndarray  # (4,)
    t_res_norm: np.ndarray  # (t - mu) / scale
    object_id: str
    occlusion: float
    n_tactile: int
    n_visual: int
    dropped_complete: int  # complete-cloud points outside the grid


def subsample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(4, index)))


def prepare_sample(
    sample: Sample,
    cam: CameraIntrinsics,
    *,
    res: int = 32,
    padding: float = 1.25,
    drop_tactile: bool = False,
    drop_visual: bool = False,
    tactile_n: int | None = None,
    rng: np.random.Generator | None = None,
    sor_k: int | None = None,
    sor_std_ratio: float = 1.0,
) -> PreparedSample:
    """Build the normalized partial/complete grids and pose targets.

    Raises :class:`NoObservationError` when the configured modalities leave
    nothing to observe.
    """
    tactile_pts = sample.tactile.points
    if drop_tactile:
        tactile_pts = tactile_pts[:0]
    elif tactile_n is not None and tactile_n < len(tactile_pts):
        if tactile_n == 0:
            tactile_pts = tactile_pts[:0]
        else:
            if rng is None:
                raise ValueError("tactile subsampling needs an explicit rng")
            idx = np.sort(rng.choice(len(tactile_pts), size=tactile_n, replace=False))
            tactile_pts = tactile_pts[idx]
    if drop_visual:
        visual = np.empty((0, 3))
    else:
        visual = backproject(sample.depth, sample.mask, cam)
        if sor_k is not None and len(visual) > sor_k:
            visual = sor_filter(PointCloud(visual, Role.VISUAL), sor_k, sor_std_ratio).points
    merged = np.vstack([visual, tactile_pts])
    if len(merged) == 0:
        raise NoObservationError("no observation")
    partial = PointCloud(merged, Role.MERGED)
    partial_norm, nf = normalize(partial, padding)
    v_partial = voxelize(partial_norm, res)
    complete_norm = PointCloud(apply_normalization(sample.gt_complete.points, nf), Role.COMPLETE)
    v_complete = voxelize(complete_norm, res)
    return PreparedSample(
        v_partial=v_partial.values.astype(np.uint8),
        v_complete=v_complete.values.astype(np.uint8),
        mu=nf.mu,
        sigma=nf.sigma,
        scale=nf.scale,
        nf=nf,
        image=np.ascontiguousarray(sample.image.transpose(2, 0, 1)),
        quat_gt=sample.gt_pose.rotation.copy(),
        t_res_norm=(sample.gt_pose.translation - nf.mu) / nf.scale,
        object_id=sample.object_id,
        occlusion=sample.occlusion_level,
        n_tactile=len(tactile_pts),
        n_visual=len(visual),
        dropped_complete=v_complete.dropped_points,
    )


@dataclass
class PreparedSplit:
    indices: list[int]  # dataset indices actually prepared
    skipped: list[int]  # dataset indices with no observation
    samples: list[PreparedSample]
    object_ids: list[str]  # unique ids in manifest order

    def __len__(self):
        return len(self.samples)

    def stack(self) -> dict[str, torch.Tensor]:
        s = self.samples
        obj_index = [self.object_ids.index(p.object_id) for p in s]
        return {
            "v_partial": torch.from_numpy(np.stack([p.v_partial for p in s])),
            "v_complete": torch.from_numpy(np.stack([p.v_complete for p in s])),
            "image": torch.from_numpy(np.stack([p.image for p in s])),
            "mu": torch.from_numpy(np.stack([p.mu for p in s]).astype(np.float32)),
            "sigma": torch.from_numpy(np.array([p.sigma for p in s], dtype=np.float32)),
            "scale": torch.from_numpy(np.array([p.scale for p in s], dtype=np.float32)),
            "quat_gt": torch.from_numpy(np.stack([p.quat_gt for p in s]).astype(np.float32)),
            "t_res_norm": torch.from_numpy(np.stack([p.t_res_norm for p in s]).astype(np.float32)),
            "object_index": torch.tensor(obj_index, dtype=torch.long),
        }


def prepare_split(
    dataset: Dataset,
    indices,
    cfg: RunConfig,
    *,
    drop_tactile: bool = False,
    drop_visual: bool = False,
    tactile_n: int | None = None,
    subsample_seed: int = 0,
) -> PreparedSplit:
    cam = default_camera(*dataset.manifest.image_hw)
    object_ids = [o["id"] for o in dataset.manifest.objects]
    prepared, kept, skipped = [], [], []
    sor_k = cfg.sor_k if cfg.sor_enabled else None
    for idx in indices:
        sample = dataset[idx]
        try:
            prepared.append(
                prepare_sample(
                    sample,
                    cam,
                    res=cfg.voxel_res,
                    padding=cfg.padding,
                    drop_tactile=drop_tactile,
                    drop_visual=drop_visual,
                    tactile_n=tactile_n,
                    rng=subsample_rng(subsample_seed, idx),
                    sor_k=sor_k,
                    sor_std_ratio=cfg.sor_std_ratio,
                )
            )
            kept.append(idx)
        except NoObservationError:
            skipped.append(idx)
    return PreparedSplit(indices=kept, skipped=skipped, samples=prepared, object_ids=object_ids)


def encode_grids(ae, grids: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    """Inference-mode latents for a stack of (B, r, r, r) grids."""
    ae.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(grids), batch_size):
            out.append(ae.encode_tensor(grids[s:s + batch_size].float()))
    return torch.cat(out) if out else torch.empty(0, ae.latent_dim)
