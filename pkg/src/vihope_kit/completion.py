"""Latent-space completion: a conditional GAN maps partial-shape latents to
complete-shape latents, conditioned on image features.

The generator consumes the partial latent concatenated with a dropout-
regularized copy of the visual feature; the discriminator scores a latent
against the same (un-dropped) feature. Losses follow the least-squares GAN
formulation, plus a Jaccard reconstruction term decoded through the frozen
shape-prior decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import save_checkpoint, state_hash
from .config import StageConfig
from .errors import TrainingDivergedError
from .shapeprior import LatentCode, LatentSpace, VoxelAutoencoder, jaccard_loss


@dataclass
class VisualFeature:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("visual feature contains non-finite entries")


class FeatureExtractor(nn.Module):
    """Four stride-2 conv stages, global average pool, dense projection.

    A compact stand-in for a large pretrained backbone; trained jointly
    with the completion stage.
    """

    def __init__(self, channels=(16, 32, 64, 128), out_dim: int = 256):
        super().__init__()
        self.channels = tuple(channels)
        self.out_dim = out_dim
        layers = []
        in_c = 3
        for c in self.channels:
            layers += [nn.Conv2d(in_c, c, 3, stride=2, padding=1),
                       nn.BatchNorm2d(c), nn.ReLU(inplace=True)]
            in_c = c
        self.convs = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(in_c, out_dim)

    @property
    def arch(self) -> dict:
        return {"kind": "feature_extractor", "channels": list(self.channels),
                "out_dim": self.out_dim}

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.convs(images)
        return self.head(self.pool(x).flatten(1))


def _mlp(in_dim: int, hidden, out_dim: int, negative_slope: float = 0.0) -> nn.Sequential:
    layers = []
    d = in_dim
    for h in hidden:
        layers.append(nn.Linear(d, h))
        layers.append(nn.LeakyReLU(negative_slope) if negative_slope > 0 else nn.ReLU(inplace=True))
        d = h
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class LatentGenerator(nn.Module):
    """G: (partial latent, dropout(feature)) -> complete latent.

    ``feature_dim=0`` removes the visual conditioning entirely (ablation).
    Dropout applies only while in training mode.
    """

    def __init__(self, latent_dim: int = 128, feature_dim: int = 256,
                 hidden=(512, 256), dropout: float = 0.3):
        super().__init__()
        self.latent_dim = latent_dim
        self.feature_dim = feature_dim
        self.dropout_rate = dropout
        self.net = _mlp(latent_dim + feature_dim, hidden, latent_dim)

    @property
    def arch(self) -> dict:
        return {"kind": "latent_generator", "latent_dim": self.latent_dim,
                "feature_dim": self.feature_dim, "dropout": self.dropout_rate,
                "hidden": [m.out_features for m in self.net if isinstance(m, nn.Linear)][:-1]}

    def forward(self, lp: torch.Tensor, feature: torch.Tensor | None = None) -> torch.Tensor:
        if self.feature_dim == 0:
            return self.net(lp)
        if feature is None:
            raise ValueError("generator expects a visual feature")
        f = F.dropout(feature, self.dropout_rate, training=self.training)
        return self.net(torch.cat([lp, f], dim=1))


class LatentDiscriminator(nn.Module):
    """F: (latent, feature) -> scalar score, same conditioning as G."""

    def __init__(self, latent_dim: int = 128, feature_dim: int = 256, hidden=(512, 256)):
        super().__init__()
        self.latent_dim = latent_dim
        self.feature_dim = feature_dim
        self.net = _mlp(latent_dim + feature_dim, hidden, 1, negative_slope=0.2)

    @property
    def arch(self) -> dict:
        return {"kind": "latent_discriminator", "latent_dim": self.latent_dim,
                "feature_dim": self.feature_dim,
                "hidden": [m.out_features for m in self.net if isinstance(m, nn.Linear)][:-1]}

    def forward(self, latent: torch.Tensor, feature: torch.Tensor | None = None) -> torch.Tensor:
        if self.feature_dim == 0:
            return self.net(latent)[:, 0]
        if feature is None:
            raise ValueError("discriminator expects a visual feature")
        return self.net(torch.cat([latent, feature], dim=1))[:, 0]


# ---------------------------------------------------------------------------
# losses (least-squares GAN)


def _as_float(scores):
    t = torch.as_tensor(scores)
    return t if t.is_floating_point() else t.double()


def discriminator_loss(real_scores, fake_scores):
    """mean[(s_real - 1)^2] + mean[s_fake^2]."""
    real = _as_float(real_scores)
    fake = _as_float(fake_scores)
    return ((real - 1.0) ** 2).mean() + (fake ** 2).mean()


def generator_loss(fake_scores):
    """mean[(s_fake - 1)^2]."""
    fake = _as_float(fake_scores)
    return ((fake - 1.0) ** 2).mean()


def reconstruction_loss(ae: VoxelAutoencoder, lhat: torch.Tensor, v_complete: torch.Tensor):
    """Jaccard loss between the decoded estimate and the target grid.

    The decoder must already be frozen; gradients reach ``lhat`` only.
    """
    ae.eval()
    pred = ae.decode_tensor(lhat)
    target = v_complete.float() if v_complete.dim() == 4 else v_complete.float()[None]
    return jaccard_loss(pred, target)


# ---------------------------------------------------------------------------
# public single-sample ops


def extract_features(fe: FeatureExtractor, image: np.ndarray) -> VisualFeature:
    """Deterministic inference-mode feature of one (H, W, 3) image."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    was_training = fe.training
    fe.eval()
    with torch.no_grad():
        f = fe(torch.from_numpy(image.transpose(2, 0, 1).astype(np.float32))[None])
    if was_training:
        fe.train()
    return VisualFeature(f[0].numpy())


def complete_latent(gen: LatentGenerator, lp: LatentCode, feature: VisualFeature | None) -> LatentCode:
    """Map a partial-space latent to the complete space (dropout off)."""
    if lp.space is not LatentSpace.PARTIAL:
        raise ValueError(f"expected a partial-space latent, got {lp.space}")
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        f = None
        if gen.feature_dim > 0:
            if feature is None:
                raise ValueError("generator expects a visual feature")
            f = torch.from_numpy(feature.values.astype(np.float32))[None]
        out = gen(torch.from_numpy(lp.values.astype(np.float32))[None], f)
    if was_training:
        gen.train()
    return LatentCode(out[0].numpy(), LatentSpace.COMPLETE)


# ---------------------------------------------------------------------------
# training


def augment_images(images: torch.Tensor) -> torch.Tensor:
    """Light train-time augmentation: brightness/contrast jitter and an
    occasional 3x3 Gaussian blur. Uses the global torch RNG."""
    b = images.shape[0]
    brightness = 0.85 + 0.3 * torch.rand(b, 1, 1, 1)
    contrast = 0.85 + 0.3 * torch.rand(b, 1, 1, 1)
    mean = images.mean(dim=(2, 3), keepdim=True)
    out = (images - mean) * contrast + mean * brightness
    if float(torch.rand(())) < 0.3:
        k = torch.tensor([1.0, 2.0, 1.0])
        kernel = (k[:, None] * k[None, :]) / 16.0
        kernel = kernel.expand(3, 1, 3, 3)
        out = F.conv2d(out, kernel, padding=1, groups=3)
    return out.clamp(0.0, 1.0)


@dataclass
class CompletionTrainResult:
    trace: list[dict] = field(default_factory=list)
    final_val_recon: float = math.nan
    epochs_run: int = 0


def train_completion(
    *,
    ae: VoxelAutoencoder,
    images: torch.Tensor,
    lp: torch.Tensor,
    lc: torch.Tensor,
    v_complete: torch.Tensor,
    stage: StageConfig,
    alpha: float = 30.0,
    feature_dim: int = 256,
    fe_channels=(16, 32, 64, 128),
    gan_hidden=(512, 256),
    dropout: float = 0.3,
    gan_uses_feature: bool = True,
    augment: bool = True,
    seed: int = 0,
    val: dict | None = None,
    val_every: int = 5,
    out_path=None,
    start_state: dict | None = None,
    log=None,
) -> tuple[FeatureExtractor, LatentGenerator, LatentDiscriminator, CompletionTrainResult]:
    """Stage 2: adversarial latent mapping with a frozen shape prior.

    One discriminator step then one generator step per batch. The
    discriminator sees the identical feature tensor in its real and fake
    branches; dropout regularizes only the generator's copy. The
    autoencoder stays bit-frozen (verified by hash in the tests).
    """
    torch.manual_seed(seed)
    gan_feature_dim = feature_dim if gan_uses_feature else 0
    fe = FeatureExtractor(fe_channels, feature_dim)
    gen = LatentGenerator(ae.latent_dim, gan_feature_dim, gan_hidden, dropout)
    disc = LatentDiscriminator(ae.latent_dim, gan_feature_dim, gan_hidden)
    opt_g = torch.optim.Adam(list(gen.parameters()) + list(fe.parameters()), lr=stage.lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=stage.lr)
    result = CompletionTrainResult()
    start_epoch = 0
    if start_state is not None:
        fe.load_state_dict(start_state["fe"])
        gen.load_state_dict(start_state["gen"])
        disc.load_state_dict(start_state["disc"])
        opt_g.load_state_dict(start_state["opt_g"])
        opt_d.load_state_dict(start_state["opt_d"])
        torch.set_rng_state(torch.as_tensor(start_state["torch_rng"], dtype=torch.uint8))
        start_epoch = start_state["epoch"]
        result.trace = list(start_state.get("trace", []))

    frozen_hash = state_hash(ae)
    n = len(images)

    def checkpoint(epoch, complete):
        if out_path is None:
            return
        save_checkpoint(
            out_path,
            arch={"fe": fe.arch, "gen": gen.arch, "disc": disc.arch, "ae": ae.arch},
            state={"fe": fe.state_dict(), "gen": gen.state_dict(), "disc": disc.state_dict()},
            extra={
                "stage": "completion", "epoch": epoch, "complete": complete,
                "trace": result.trace,
                "opt_g": opt_g.state_dict(), "opt_d": opt_d.state_dict(),
                "torch_rng": torch.get_rng_state().numpy(), "seed": seed,
                "gan_uses_feature": gan_uses_feature,
            },
        )

    def val_recon() -> float:
        if val is None:
            return math.nan
        fe.eval(); gen.eval()
        with torch.no_grad():
            f = fe(val["image"]) if gan_feature_dim > 0 else None
            lhat = gen(val["lp"], f)
            loss = float(reconstruction_loss(ae, lhat, val["v_complete"]))
        fe.train(); gen.train()
        return loss

    for epoch in range(start_epoch, stage.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(13, epoch))).permutation(n)
        fe.train(); gen.train(); disc.train()
        sums = {"d_loss": 0.0, "g_adv": 0.0, "recon": 0.0}
        nb = 0
        for s in range(0, n, stage.batch_size):
            idx = torch.from_numpy(order[s:s + stage.batch_size].copy())
            imgs = images[idx]
            if augment:
                imgs = augment_images(imgs)
            f = fe(imgs) if gan_feature_dim > 0 else None
            lhat = gen(lp[idx], f)
            # discriminator step: identical conditioning for real and fake
            cond = f.detach() if f is not None else None
            opt_d.zero_grad()
            d_loss = discriminator_loss(disc(lc[idx], cond), disc(lhat.detach(), cond))
            d_loss.backward()
            opt_d.step()
            # generator + feature extractor step
            opt_g.zero_grad()
            g_adv = generator_loss(disc(lhat, f))
            recon = reconstruction_loss(ae, lhat, v_complete[idx])
            (g_adv + alpha * recon).backward()
            opt_g.step()
            sums["d_loss"] += d_loss.item()
            sums["g_adv"] += g_adv.item()
            sums["recon"] += recon.item()
            nb += 1
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}}
        if any(not math.isfinite(v) for v in row.values()):
            raise TrainingDivergedError(f"completion loss became non-finite at epoch {epoch}")
        if val is not None and ((epoch + 1) % val_every == 0 or epoch + 1 == stage.epochs):
            row["val_recon"] = val_recon()
            result.final_val_recon = row["val_recon"]
        result.trace.append(row)
        result.epochs_run = epoch + 1
        if log:
            log(f"completion epoch {epoch}: " + " ".join(
                f"{k} {v:.4f}" for k, v in row.items() if k != "epoch"))
        if (epoch + 1) % stage.checkpoint_every == 0:
            checkpoint(epoch + 1, complete=False)
    if state_hash(ae) != frozen_hash:
        raise RuntimeError("frozen autoencoder weights drifted during completion training")
    checkpoint(result.epochs_run, complete=True)
    return fe, gen, disc, result
