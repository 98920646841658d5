"""Residual 6D pose heads over the completed latent, the point-cloud loss,
and the stage-3 / stage-4 trainers.

Both heads are four-layer MLPs ([512, 256, 32] hidden) consuming the
completed latent, the visual feature, the normalization factors, and a
skip connection from the partial latent. The rotation head's raw 4-vector
is normalized to a unit quaternion; the translation head predicts the
residual to the partial centroid in normalized units, so the absolute
translation is ``t = t_res * sigma * padding + mu``.

The point-cloud loss compares model points under the ground-truth and
estimated poses, which makes it blind to the quaternion sign (q and -q
rotate identically).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import save_checkpoint, state_hash
from .completion import (
    FeatureExtractor,
    LatentDiscriminator,
    LatentGenerator,
    VisualFeature,
    augment_images,
    discriminator_loss,
    generator_loss,
    reconstruction_loss,
)
from .config import RunConfig, StageConfig
from .errors import TrainingDivergedError
from .shapeprior import LatentCode, LatentSpace, VoxelAutoencoder


def _head(in_dim: int, hidden, out_dim: int) -> nn.Sequential:
    layers = []
    d = in_dim
    for h in hidden:
        layers += [nn.Linear(d, h), nn.ReLU(inplace=True)]
        d = h
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class PoseHeads(nn.Module):
    """Rotation head (raw quaternion, 4) and translation head (residual, 3)."""

    HIDDEN = (512, 256, 32)

    def __init__(self, latent_dim: int = 128, feature_dim: int = 256,
                 heads_use_feature: bool = True):
        super().__init__()
        self.latent_dim = latent_dim
        self.feature_dim = feature_dim if heads_use_feature else 0
        self.heads_use_feature = heads_use_feature
        in_dim = 2 * latent_dim + self.feature_dim + 4  # mu (3) + sigma (1)
        self.rot = _head(in_dim, self.HIDDEN, 4)
        self.trans = _head(in_dim, self.HIDDEN, 3)

    @property
    def arch(self) -> dict:
        return {"kind": "pose_heads", "latent_dim": self.latent_dim,
                "feature_dim": self.feature_dim, "hidden": list(self.HIDDEN)}

    def forward(self, latent_main, feature, mu, sigma, lp):
        parts = [latent_main]
        if self.feature_dim > 0:
            if feature is None:
                raise ValueError("pose heads expect a visual feature")
            parts.append(feature)
        parts += [mu, sigma[:, None], lp]
        x = torch.cat(parts, dim=1)
        return self.rot(x), self.trans(x)


def normalize_quaternion(raw: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Euclidean normalization of raw head output to a unit quaternion."""
    norm = raw.norm(dim=-1, keepdim=True)
    if bool((norm < eps).any()):
        raise ValueError("degenerate quaternion")
    return raw / norm


def quat_rotate_torch(q: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Rotate (..., k, 3) points by unit quaternions (..., 4)."""
    w, x, y, z = q.unbind(-1)
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ]
    rot = torch.stack(rows, -2)  # (..., 3, 3)
    return pts @ rot.transpose(-1, -2)


def point_cloud_loss(gt_q, gt_t, est_q, est_t, points):
    """Mean distance between model points under the two poses.

    ``points`` is (k, 3) or (B, k, 3); translations are residuals in a
    shared frame. Batched input returns the batch mean.
    """
    gt_q = torch.as_tensor(gt_q)
    gt_t = torch.as_tensor(gt_t, dtype=gt_q.dtype)
    est_q = torch.as_tensor(est_q, dtype=gt_q.dtype)
    est_t = torch.as_tensor(est_t, dtype=gt_q.dtype)
    points = torch.as_tensor(points, dtype=gt_q.dtype)
    if points.shape[-2] == 0:
        raise ValueError("the model point set is empty")
    if gt_q.dim() == 1:
        gt_q, gt_t, est_q, est_t = gt_q[None], gt_t[None], est_q[None], est_t[None]
        points = points[None] if points.dim() == 2 else points
    elif points.dim() == 2:
        points = points[None].expand(gt_q.shape[0], -1, -1)
    gt_pts = quat_rotate_torch(gt_q, points) + gt_t[:, None, :]
    est_pts = quat_rotate_torch(est_q, points) + est_t[:, None, :]
    return (gt_pts - est_pts).norm(dim=-1).mean()


# ---------------------------------------------------------------------------
# pipeline assembly and ablations


@dataclass(frozen=True)
class VariantWiring:
    name: str
    use_gan: bool = True  # False: heads consume the partial latent directly
    gan_uses_feature: bool = True  # False: no visual conditioning in G / F
    heads_use_feature: bool = True  # False: no visual feature into the heads
    drop_tactile: bool = False
    drop_visual: bool = False


VARIANTS = {
    "full": VariantWiring("full"),
    "No-Shape-Completion": VariantWiring("No-Shape-Completion", use_gan=False),
    "No-Vis-GAN": VariantWiring("No-Vis-GAN", gan_uses_feature=False),
    "No-Vis-MLP": VariantWiring("No-Vis-MLP", heads_use_feature=False),
    "No-Tactile": VariantWiring("No-Tactile", drop_tactile=True),
    "No-Point-Cloud": VariantWiring("No-Point-Cloud", drop_visual=True),
}

# data-level variants keep the full architecture, so they can also be
# applied to an already-trained full model at evaluation time
DATA_VARIANTS = ("No-Tactile", "No-Point-Cloud")


def get_variant(name: str) -> VariantWiring:
    if name not in VARIANTS:
        raise ValueError(f"unknown ablation variant {name!r}; valid: {sorted(VARIANTS)}")
    return VARIANTS[name]


class PosePipeline:
    """Assembled model: frozen shape prior + completion GAN + pose heads."""

    def __init__(self, *, ae: VoxelAutoencoder, fe: FeatureExtractor,
                 gen: LatentGenerator | None, disc: LatentDiscriminator | None,
                 heads: PoseHeads, wiring: VariantWiring, padding: float):
        if wiring.use_gan and gen is None:
            raise ValueError("this wiring requires a generator")
        if not wiring.use_gan:
            gen, disc = None, None  # structural ablation carries no G/F parameters
        self.ae = ae
        self.fe = fe
        self.gen = gen
        self.disc = disc
        self.heads = heads
        self.wiring = wiring
        self.padding = padding

    def modules(self) -> dict[str, nn.Module]:
        out = {"ae": self.ae, "fe": self.fe, "heads": self.heads}
        if self.gen is not None:
            out["gen"] = self.gen
        if self.disc is not None:
            out["disc"] = self.disc
        return out

    def eval(self):
        for m in self.modules().values():
            m.eval()
        return self

    def completed_latent_tensor(self, lp: torch.Tensor, f: torch.Tensor | None) -> torch.Tensor:
        if self.gen is None:
            return lp
        return self.gen(lp, f if self.wiring.gan_uses_feature else None)

    def forward_tensors(self, *, images, lp, mu, scale):
        """Batched inference: returns unit quaternions, normalized residual
        translations, and the completed latents. ``scale`` is
        sigma * padding, the factor shared with the grid normalization."""
        f = self.fe(images)
        lhat = self.completed_latent_tensor(lp, f)
        raw_q, t_res = self.heads(lhat, f if self.wiring.heads_use_feature else None,
                                  mu, scale, lp)
        return normalize_quaternion(raw_q), t_res, lhat

    def estimate(self, lhat_c: LatentCode, feature: VisualFeature | None,
                 mu, sigma: float, lp: LatentCode):
        """Single-sample pose estimate.

        Returns ``(quaternion, t_residual_meters)``; the absolute
        translation is ``t_residual + mu``.
        """
        if lhat_c.space is not LatentSpace.COMPLETE:
            raise ValueError("estimate expects a complete-space latent")
        if lp.space is not LatentSpace.PARTIAL:
            raise ValueError("the skip-connection latent must be partial-space")
        self.heads.eval()
        scale = float(sigma) * self.padding
        with torch.no_grad():
            f = None
            if self.heads.feature_dim > 0:
                if feature is None:
                    raise ValueError("pose heads expect a visual feature")
                f = torch.from_numpy(feature.values.astype(np.float32))[None]
            raw_q, t_res = self.heads(
                torch.from_numpy(lhat_c.values.astype(np.float32))[None], f,
                torch.from_numpy(np.asarray(mu, dtype=np.float32))[None],
                torch.tensor([scale], dtype=torch.float32),
                torch.from_numpy(lp.values.astype(np.float32))[None],
            )
            quat = normalize_quaternion(raw_q)[0].numpy().astype(np.float64)
        return quat, t_res[0].numpy().astype(np.float64) * scale


def build_ablation(variant: str, cfg: RunConfig, ae: VoxelAutoencoder) -> PosePipeline:
    """Fresh (untrained) pipeline wired for the requested variant."""
    wiring = get_variant(variant)
    fe = FeatureExtractor(cfg.fe_channels, cfg.feature_dim)
    gen = disc = None
    if wiring.use_gan:
        feat = cfg.feature_dim if wiring.gan_uses_feature else 0
        gen = LatentGenerator(cfg.latent_dim, feat, cfg.gan_hidden, cfg.dropout)
        disc = LatentDiscriminator(cfg.latent_dim, feat, cfg.gan_hidden)
    heads = PoseHeads(cfg.latent_dim, cfg.feature_dim, wiring.heads_use_feature)
    return PosePipeline(ae=ae, fe=fe, gen=gen, disc=disc, heads=heads,
                        wiring=wiring, padding=cfg.padding)


# ---------------------------------------------------------------------------
# stage 3: pose heads on a frozen completion module


@dataclass
class PoseTrainResult:
    trace: list[dict] = field(default_factory=list)
    final_val: float = math.nan
    epochs_run: int = 0


def _gather_model_points(points_per_object: torch.Tensor, object_index: torch.Tensor,
                         scale: torch.Tensor) -> torch.Tensor:
    """Per-sample canonical model points in normalized units."""
    return points_per_object[object_index] / scale[:, None, None]


def train_pose(
    pipeline: PosePipeline,
    *,
    batch: dict[str, torch.Tensor],
    lp: torch.Tensor,
    points_per_object: torch.Tensor,
    stage: StageConfig,
    seed: int = 0,
    val: dict | None = None,
    val_lp: torch.Tensor | None = None,
    out_path=None,
    start_state: dict | None = None,
    log=None,
) -> PoseTrainResult:
    """Stage 3: train the heads on the point-cloud loss alone, with the
    completion module frozen (features and completed latents precomputed
    in inference mode)."""
    torch.manual_seed(seed)
    heads = pipeline.heads
    pipeline.fe.eval()
    if pipeline.gen is not None:
        pipeline.gen.eval()
    with torch.no_grad():
        f = pipeline.fe(batch["image"])
        lhat = pipeline.completed_latent_tensor(lp, f)
        if val is not None:
            f_val = pipeline.fe(val["image"])
            lhat_val = pipeline.completed_latent_tensor(val_lp, f_val)
    scale = batch["scale"]
    k_norm = _gather_model_points(points_per_object, batch["object_index"], scale)
    opt = torch.optim.Adam(heads.parameters(), lr=stage.lr)
    result = PoseTrainResult()
    start_epoch = 0
    if start_state is not None:
        heads.load_state_dict(start_state["heads"])
        opt.load_state_dict(start_state["optimizer"])
        torch.set_rng_state(torch.as_tensor(start_state["torch_rng"], dtype=torch.uint8))
        start_epoch = start_state["epoch"]
        result.trace = list(start_state.get("trace", []))
    n = len(lp)

    def checkpoint(epoch, complete):
        if out_path is None:
            return
        save_checkpoint(
            out_path,
            arch={"heads": heads.arch},
            state={"heads": heads.state_dict()},
            extra={"stage": "pose", "epoch": epoch, "complete": complete,
                   "trace": result.trace, "optimizer": opt.state_dict(),
                   "torch_rng": torch.get_rng_state().numpy(), "seed": seed},
        )

    for epoch in range(start_epoch, stage.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(14, epoch))).permutation(n)
        heads.train()
        total, nb = 0.0, 0
        for s in range(0, n, stage.batch_size):
            idx = torch.from_numpy(order[s:s + stage.batch_size].copy())
            opt.zero_grad()
            raw_q, t_res = heads(
                lhat[idx],
                f[idx] if heads.feature_dim > 0 else None,
                batch["mu"][idx], scale[idx], lp[idx])
            loss = point_cloud_loss(batch["quat_gt"][idx], batch["t_res_norm"][idx],
                                    normalize_quaternion(raw_q), t_res, k_norm[idx])
            loss.backward()
            opt.step()
            total += loss.item()
            nb += 1
        row = {"epoch": epoch, "lp_loss": total / nb}
        if not math.isfinite(row["lp_loss"]):
            raise TrainingDivergedError(f"pose loss became non-finite at epoch {epoch}")
        if val is not None:
            heads.eval()
            with torch.no_grad():
                raw_q, t_res = heads(
                    lhat_val,
                    f_val if heads.feature_dim > 0 else None,
                    val["mu"], val["scale"], val_lp)
                k_val = _gather_model_points(points_per_object, val["object_index"], val["scale"])
                row["val_lp_loss"] = float(point_cloud_loss(
                    val["quat_gt"], val["t_res_norm"],
                    normalize_quaternion(raw_q), t_res, k_val))
            result.final_val = row["val_lp_loss"]
        result.trace.append(row)
        result.epochs_run = epoch + 1
        if log:
            log(f"pose epoch {epoch}: " + " ".join(
                f"{k} {v:.5f}" for k, v in row.items() if k != "epoch"))
        if (epoch + 1) % stage.checkpoint_every == 0:
            checkpoint(epoch + 1, complete=False)
    checkpoint(result.epochs_run, complete=True)
    return result


# ---------------------------------------------------------------------------
# stage 4: end-to-end joint optimization


def train_end_to_end(
    pipeline: PosePipeline,
    *,
    batch: dict[str, torch.Tensor],
    lp: torch.Tensor,
    lc: torch.Tensor,
    points_per_object: torch.Tensor,
    stage: StageConfig,
    alpha: float = 30.0,
    beta: float = 5000.0,
    augment: bool = True,
    seed: int = 0,
    out_path=None,
    start_state: dict | None = None,
    log=None,
) -> PoseTrainResult:
    """Stage 4: unfreeze the completion module (generator, discriminator,
    feature extractor) and jointly optimize it with the pose heads. The
    shape prior stays frozen throughout."""
    torch.manual_seed(seed)
    heads, fe, gen, disc, ae = (pipeline.heads, pipeline.fe, pipeline.gen,
                                pipeline.disc, pipeline.ae)
    use_gan = gen is not None
    joint_params = list(fe.parameters()) + list(heads.parameters())
    if use_gan:
        joint_params += list(gen.parameters())
    opt_joint = torch.optim.Adam(joint_params, lr=stage.lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=stage.lr) if use_gan else None
    frozen_hash = state_hash(ae)
    result = PoseTrainResult()
    start_epoch = 0
    if start_state is not None:
        fe.load_state_dict(start_state["fe"])
        heads.load_state_dict(start_state["heads"])
        if use_gan:
            gen.load_state_dict(start_state["gen"])
            disc.load_state_dict(start_state["disc"])
            opt_d.load_state_dict(start_state["opt_d"])
        opt_joint.load_state_dict(start_state["opt_joint"])
        torch.set_rng_state(torch.as_tensor(start_state["torch_rng"], dtype=torch.uint8))
        start_epoch = start_state["epoch"]
        result.trace = list(start_state.get("trace", []))

    scale = batch["scale"]
    k_norm = _gather_model_points(points_per_object, batch["object_index"], scale)
    n = len(lp)
    gan_feat = use_gan and pipeline.wiring.gan_uses_feature

    def checkpoint(epoch, complete):
        if out_path is None:
            return
        state = {"fe": fe.state_dict(), "heads": heads.state_dict()}
        arch = {"fe": fe.arch, "heads": heads.arch, "ae": ae.arch,
                "variant": pipeline.wiring.name}
        extra = {"stage": "e2e", "epoch": epoch, "complete": complete,
                 "trace": result.trace, "opt_joint": opt_joint.state_dict(),
                 "torch_rng": torch.get_rng_state().numpy(), "seed": seed}
        if use_gan:
            state["gen"] = gen.state_dict()
            state["disc"] = disc.state_dict()
            arch["gen"] = gen.arch
            arch["disc"] = disc.arch
            extra["opt_d"] = opt_d.state_dict()
        save_checkpoint(out_path, arch=arch, state=state, extra=extra)

    for epoch in range(start_epoch, stage.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(15, epoch))).permutation(n)
        fe.train(); heads.train()
        if use_gan:
            gen.train(); disc.train()
        sums = {"d_loss": 0.0, "g_adv": 0.0, "recon": 0.0, "lp_loss": 0.0, "total": 0.0}
        nb = 0
        for s in range(0, n, stage.batch_size):
            idx = torch.from_numpy(order[s:s + stage.batch_size].copy())
            imgs = batch["image"][idx]
            if augment:
                imgs = augment_images(imgs)
            f = fe(imgs)
            lhat = pipeline.completed_latent_tensor(lp[idx], f)
            d_loss = torch.zeros(())
            if use_gan:
                cond = f.detach() if gan_feat else None
                opt_d.zero_grad()
                d_loss = discriminator_loss(disc(lc[idx], cond), disc(lhat.detach(), cond))
                d_loss.backward()
                opt_d.step()
            opt_joint.zero_grad()
            total = torch.zeros(())
            g_adv = torch.zeros(())
            recon = torch.zeros(())
            if use_gan:
                g_adv = generator_loss(disc(lhat, f if gan_feat else None))
                recon = reconstruction_loss(ae, lhat, batch["v_complete"][idx])
                total = g_adv + alpha * recon
            raw_q, t_res = heads(lhat, f if heads.feature_dim > 0 else None,
                                 batch["mu"][idx], scale[idx], lp[idx])
            lp_loss = point_cloud_loss(batch["quat_gt"][idx], batch["t_res_norm"][idx],
                                       normalize_quaternion(raw_q), t_res, k_norm[idx])
            total = total + beta * lp_loss
            total.backward()
            opt_joint.step()
            for key, v in (("d_loss", d_loss), ("g_adv", g_adv), ("recon", recon),
                           ("lp_loss", lp_loss), ("total", total)):
                sums[key] += v.item()
            nb += 1
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}}
        if any(not math.isfinite(v) for v in row.values()):
            raise TrainingDivergedError(
                f"end-to-end loss became non-finite at epoch {epoch}; "
                "the last periodic checkpoint is the last good state")
        result.trace.append(row)
        result.epochs_run = epoch + 1
        if log:
            log(f"e2e epoch {epoch}: " + " ".join(
                f"{k} {v:.5f}" for k, v in row.items() if k != "epoch"))
        if (epoch + 1) % stage.checkpoint_every == 0:
            checkpoint(epoch + 1, complete=False)
    if state_hash(ae) != frozen_hash:
        raise RuntimeError("frozen shape prior drifted during end-to-end training")
    checkpoint(result.epochs_run, complete=True)
    return result


def clone_pipeline(pipeline: PosePipeline) -> PosePipeline:
    """Deep copy of all trainable components (the shape prior is shared,
    it is frozen anyway)."""
    return PosePipeline(
        ae=pipeline.ae,
        fe=copy.deepcopy(pipeline.fe),
        gen=copy.deepcopy(pipeline.gen),
        disc=copy.deepcopy(pipeline.disc),
        heads=copy.deepcopy(pipeline.heads),
        wiring=pipeline.wiring,
        padding=pipeline.padding,
    )
