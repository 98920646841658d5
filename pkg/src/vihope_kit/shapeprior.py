"""Voxel-grid shape prior: a 3D convolutional autoencoder trained with the
Jaccard index loss on randomly rotated copies of the object.

The encoder maps a res^3 occupancy grid through four stride-2 convolution
stages (kernel 4, batch norm + ReLU after each) and a dense layer to a
128-d latent. The decoder mirrors it with transposed convolutions and ends
in a logistic unit, so its output lies strictly inside (0, 1).
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import freeze, save_checkpoint
from .config import StageConfig
from .errors import TrainingDivergedError
from .geometry import PointCloud, Role, VoxelGrid, normalize, random_so3, rotate_points, voxelize


class LatentSpace(enum.Enum):
    PARTIAL = "partial"
    COMPLETE = "complete"


@dataclass
class LatentCode:
    values: np.ndarray  # (latent_dim,)
    space: LatentSpace

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent code contains non-finite entries")


class VoxelAutoencoder(nn.Module):
    """Symmetric encoder/decoder over res^3 occupancy grids."""

    def __init__(self, res: int = 32, channels=(16, 32, 64, 128), latent_dim: int = 128):
        super().__init__()
        if res % 16 != 0:
            raise ValueError("resolution must be divisible by 16 (four stride-2 stages)")
        self.res = res
        self.channels = tuple(channels)
        self.latent_dim = latent_dim
        c1, c2, c3, c4 = self.channels
        self.bottom = res // 16
        enc = []
        in_c = 1
        for c in self.channels:
            enc += [nn.Conv3d(in_c, c, 4, stride=2, padding=1),
                    nn.BatchNorm3d(c), nn.ReLU(inplace=True)]
            in_c = c
        self.encoder_convs = nn.Sequential(*enc)
        self.to_latent = nn.Linear(c4 * self.bottom**3, latent_dim)
        self.from_latent = nn.Linear(latent_dim, c4 * self.bottom**3)
        dec = []
        chain = [c4, c3, c2, c1]
        for i in range(3):
            dec += [nn.ConvTranspose3d(chain[i], chain[i + 1], 4, stride=2, padding=1),
                    nn.BatchNorm3d(chain[i + 1]), nn.ReLU(inplace=True)]
        final = nn.ConvTranspose3d(c1, 1, 4, stride=2, padding=1)
        # occupancy grids are mostly empty; bias the logistic output low so
        # training starts from a sensible prior instead of all-0.5 grids
        nn.init.constant_(final.bias, -2.5)
        dec += [final, nn.Sigmoid()]
        self.decoder_convs = nn.Sequential(*dec)

    @property
    def arch(self) -> dict:
        return {"kind": "voxel_autoencoder", "res": self.res,
                "channels": list(self.channels), "latent_dim": self.latent_dim}

    def encode_tensor(self, grids: torch.Tensor) -> torch.Tensor:
        if grids.dim() == 3:
            grids = grids[None]
        x = self.encoder_convs(grids[:, None].float())
        return self.to_latent(x.flatten(1))

    def decode_tensor(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.dim() == 1:
            latents = latents[None]
        c4 = self.channels[-1]
        x = self.from_latent(latents).view(-1, c4, self.bottom, self.bottom, self.bottom)
        return self.decoder_convs(x)[:, 0]

    def forward(self, grids: torch.Tensor) -> torch.Tensor:
        return self.decode_tensor(self.encode_tensor(grids))


def encode(model: VoxelAutoencoder, grid: VoxelGrid,
           space: LatentSpace = LatentSpace.COMPLETE) -> LatentCode:
    """Deterministic inference-mode encoding of one grid."""
    if grid.resolution != (model.res,) * 3:
        raise ValueError(f"expected a {model.res}^3 grid, got {grid.resolution}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z = model.encode_tensor(torch.from_numpy(grid.values.astype(np.float32)))
    if was_training:
        model.train()
    return LatentCode(z[0].numpy(), space)


def decode(model: VoxelAutoencoder, code: LatentCode) -> VoxelGrid:
    """Deterministic inference-mode decoding to a soft occupancy grid."""
    if code.values.shape != (model.latent_dim,):
        raise ValueError(f"expected a {model.latent_dim}-d latent, got {code.values.shape}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        v = model.decode_tensor(torch.from_numpy(code.values.astype(np.float32)))
    if was_training:
        model.train()
    out = v[0].double().clamp(1e-7, 1 - 1e-7).numpy()
    return VoxelGrid(out, (model.res,) * 3)


def jaccard_loss(pred, target):
    """1 - soft Jaccard index, in [0, 1], differentiable in ``pred``.

    Intersection is the elementwise product, union the inclusion-exclusion
    sum. Batched inputs (leading dimension) reduce per sample and return
    the batch mean. Two empty grids agree perfectly: loss 0.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    batched = pred.dim() == 4
    flat_p = pred.flatten(1) if batched else pred.reshape(1, -1)
    flat_t = target.flatten(1) if batched else target.reshape(1, -1)
    inter = (flat_p * flat_t).sum(dim=1)
    union = (flat_p + flat_t - flat_p * flat_t).sum(dim=1)
    empty = union == 0
    if (not batched) and bool(empty.any()):
        warnings.warn("jaccard_loss: both grids empty; defining loss as 0", stacklevel=2)
    safe_union = torch.where(empty, torch.ones_like(union), union)
    loss = torch.where(empty, flat_p.sum(dim=1) * 0.0, 1.0 - inter / safe_union)
    return loss.mean()


# ---------------------------------------------------------------------------
# rotation-augmented grid dataset


def rotated_grid(points: np.ndarray, quat: np.ndarray, res: int, padding: float) -> np.ndarray:
    """Rotate canonical surface points, self-normalize, voxelize."""
    rotated = rotate_points(points, quat)
    norm, _ = normalize(PointCloud(rotated, Role.COMPLETE), padding)
    return voxelize(norm, res).values.astype(np.float32)


def _grid_rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def rotation_grid_batch(base_points: list[np.ndarray], n: int, seed: int, res: int,
                        padding: float, epoch: int = 0) -> np.ndarray:
    """n grids of rotated objects; slot i uses object i mod len(base_points).
    A fresh epoch re-rotates every slot deterministically."""
    grids = np.empty((n, res, res, res), dtype=np.float32)
    for i in range(n):
        rng = _grid_rng(seed, 10, epoch, i)
        grids[i] = rotated_grid(base_points[i % len(base_points)], random_so3(rng), res, padding)
    return grids


@dataclass
class TrainResult:
    trace: list[dict] = field(default_factory=list)
    final_val: float = math.nan
    epochs_run: int = 0


def train_autoencoder(
    base_points: list[np.ndarray],
    stage: StageConfig,
    *,
    res: int = 32,
    channels=(16, 32, 64, 128),
    latent_dim: int = 128,
    padding: float = 1.25,
    seed: int = 0,
    n_rotations: int = 200,
    n_val_rotations: int = 40,
    reaugment: bool = True,
    out_path=None,
    start_state: dict | None = None,
    log=None,
) -> tuple[VoxelAutoencoder, TrainResult]:
    """Stage 1: fit the shape prior on rotated object grids.

    Training slots are re-rotated every epoch (augmentation); the held-out
    validation rotations are fixed. Trace rows carry per-epoch train and
    validation losses. NaN losses abort.
    """
    if not base_points:
        raise ValueError("at least one object is required")
    torch.manual_seed(seed)
    model = VoxelAutoencoder(res=res, channels=channels, latent_dim=latent_dim)
    opt = torch.optim.Adam(model.parameters(), lr=stage.lr)
    result = TrainResult()
    start_epoch = 0
    if start_state is not None:
        model.load_state_dict(start_state["model"])
        opt.load_state_dict(start_state["optimizer"])
        torch.set_rng_state(torch.as_tensor(start_state["torch_rng"], dtype=torch.uint8))
        start_epoch = start_state["epoch"]
        result.trace = list(start_state.get("trace", []))

    val_grids = torch.from_numpy(
        np.stack([
            rotated_grid(base_points[i % len(base_points)],
                         random_so3(_grid_rng(seed, 11, i)), res, padding)
            for i in range(n_val_rotations)
        ])
    )
    fixed_train = None
    if not reaugment:
        fixed_train = rotation_grid_batch(base_points, n_rotations, seed, res, padding, epoch=0)

    def checkpoint(epoch, complete):
        if out_path is None:
            return
        save_checkpoint(
            out_path,
            arch=model.arch,
            state={"model": model.state_dict()},
            extra={
                "stage": "ae",
                "epoch": epoch,
                "complete": complete,
                "trace": result.trace,
                "optimizer": opt.state_dict(),
                "torch_rng": torch.get_rng_state().numpy(),
                "seed": seed,
            },
        )

    for epoch in range(start_epoch, stage.epochs):
        grids = fixed_train if fixed_train is not None else rotation_grid_batch(
            base_points, n_rotations, seed, res, padding, epoch=epoch)
        order = _grid_rng(seed, 12, epoch).permutation(n_rotations)
        model.train()
        total, nb = 0.0, 0
        for s in range(0, n_rotations, stage.batch_size):
            batch = torch.from_numpy(grids[order[s:s + stage.batch_size]])
            opt.zero_grad()
            loss = jaccard_loss(model(batch), batch)
            loss.backward()
            opt.step()
            total += loss.item()
            nb += 1
        train_loss = total / nb
        model.eval()
        with torch.no_grad():
            val_loss = float(jaccard_loss(model(val_grids), val_grids))
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDivergedError(f"autoencoder loss became non-finite at epoch {epoch}")
        result.trace.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        result.final_val = val_loss
        result.epochs_run = epoch + 1
        if log:
            log(f"ae epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f}")
        if (epoch + 1) % stage.checkpoint_every == 0:
            checkpoint(epoch + 1, complete=False)
        if stage.stop_at_val is not None and val_loss <= stage.stop_at_val:
            break
    checkpoint(result.epochs_run, complete=True)
    freeze(model)
    return model, result
