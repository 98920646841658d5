"""Four-stage training orchestration over a run directory.

Layout under ``out_dir``:

    config.json                  effective configuration (provenance)
    checkpoints/{stage}.pt       stage checkpoints (ae, completion, pose, e2e)
    traces/{stage}_trace.csv     line-oriented loss traces
    eval/<label>/                evaluation reports

Stages must run in order (ae -> completion -> pose -> e2e); a missing
prerequisite raises :class:`MissingPrerequisiteError` naming the stage.
``--resume`` continues an interrupted stage from its periodic checkpoint,
including optimizer and RNG state, so the trace continues identically.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .checkpoint import freeze, load_checkpoint, save_checkpoint
from .completion import FeatureExtractor, LatentDiscriminator, LatentGenerator, train_completion
from .config import RunConfig, save_config
from .dataio import Dataset, model_points
from .errors import ConfigError, MissingPrerequisiteError
from .pose import (
    PoseHeads,
    PosePipeline,
    get_variant,
    train_end_to_end,
    train_pose,
)
from .preprocess import encode_grids, prepare_split
from .shapeprior import VoxelAutoencoder, train_autoencoder

STAGES = ("ae", "completion", "pose", "e2e")
_PREREQ = {"ae": None, "completion": "ae", "pose": "completion", "e2e": "pose"}


def checkpoint_path(run_dir, stage: str) -> Path:
    return Path(run_dir) / "checkpoints" / f"{stage}.pt"


def trace_path(run_dir, stage: str) -> Path:
    return Path(run_dir) / "traces" / f"{stage}_trace.csv"


def write_trace(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([repr(row[k]) if k in row else "" for k in fields])


def _load_complete(run_dir, stage: str) -> dict:
    path = checkpoint_path(run_dir, stage)
    if not path.exists():
        raise MissingPrerequisiteError(
            f"stage '{stage}' has not been trained yet; run `vihope train {stage}` first")
    payload = load_checkpoint(path)
    if not payload["extra"].get("complete", False):
        raise MissingPrerequisiteError(
            f"stage '{stage}' is incomplete; finish it (optionally with --resume) first")
    return payload


def _resume_state(run_dir, stage: str, resume: bool) -> dict | None:
    path = checkpoint_path(run_dir, stage)
    if not (resume and path.exists()):
        return None
    payload = load_checkpoint(path)
    if payload["extra"].get("complete", False):
        return {"done": payload}
    extra = payload["extra"]
    state = {"epoch": extra["epoch"], "trace": extra["trace"], "torch_rng": extra["torch_rng"]}
    state.update(payload["state"])
    for key in ("optimizer", "opt_g", "opt_d", "opt_joint"):
        if key in extra:
            state[key] = extra[key]
    return state


def _require_dataset(cfg: RunConfig) -> Dataset:
    path = Path(cfg.dataset.path)
    if not (path / "manifest.json").exists():
        raise MissingPrerequisiteError(
            f"dataset not found at {path}; run `vihope gen-data` first")
    return Dataset(path)


def _variant_of(payload: dict, default: str = "full") -> str:
    return payload["extra"].get("variant", payload["arch"].get("variant", default))


def _check_variant(requested: str | None, inherited: str) -> str:
    if requested is None:
        return inherited
    if requested != inherited:
        raise ConfigError(
            f"this run directory was trained with variant {inherited!r}; "
            f"cannot continue it as {requested!r}")
    return requested


def ae_from_payload(payload: dict) -> VoxelAutoencoder:
    arch = payload["arch"]
    model = VoxelAutoencoder(res=arch["res"], channels=tuple(arch["channels"]),
                             latent_dim=arch["latent_dim"])
    model.load_state_dict(payload["state"]["model"])
    return freeze(model)


def _completion_modules(payload: dict):
    arch = payload["arch"]
    fe = FeatureExtractor(tuple(arch["fe"]["channels"]), arch["fe"]["out_dim"])
    fe.load_state_dict(payload["state"]["fe"])
    gen = disc = None
    if "gen" in payload["state"]:
        g = arch["gen"]
        gen = LatentGenerator(g["latent_dim"], g["feature_dim"], tuple(g["hidden"]), g["dropout"])
        gen.load_state_dict(payload["state"]["gen"])
        d = arch["disc"]
        disc = LatentDiscriminator(d["latent_dim"], d["feature_dim"], tuple(d["hidden"]))
        disc.load_state_dict(payload["state"]["disc"])
    return fe, gen, disc


def _heads_from_arch(arch: dict) -> PoseHeads:
    return PoseHeads(arch["latent_dim"], arch["feature_dim"] or 1,
                     heads_use_feature=arch["feature_dim"] > 0)


def _prepared(dataset: Dataset, cfg: RunConfig, split: str, wiring):
    prep = prepare_split(
        dataset, dataset.split(split), cfg,
        drop_tactile=wiring.drop_tactile, drop_visual=wiring.drop_visual,
        subsample_seed=dataset.manifest.seed)
    if len(prep) == 0:
        raise ConfigError(f"split {split!r} has no usable samples")
    return prep


def _points_per_object(dataset: Dataset, cfg: RunConfig, object_ids) -> torch.Tensor:
    pts = np.stack([model_points(dataset, oid, cfg.model_points) for oid in object_ids])
    return torch.from_numpy(pts.astype(np.float32))


def run_stage(cfg: RunConfig, stage: str, *, resume: bool = False,
              variant: str | None = None, log=None) -> dict:
    """Train one stage inside the run directory; returns a small result
    summary. Refuses to skip stages."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; valid stages: {STAGES}")
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")
    out_path = checkpoint_path(run_dir, stage)

    start_state = _resume_state(run_dir, stage, resume)
    if start_state is not None and "done" in start_state:
        if log:
            log(f"stage '{stage}' is already complete; nothing to do")
        return {"stage": stage, "already_complete": True}

    prereq_stage = _PREREQ[stage]
    prereq = _load_complete(run_dir, prereq_stage) if prereq_stage else None
    dataset = _require_dataset(cfg)

    if stage == "ae":
        objects = dataset.object_models()
        base_points = [m.surface_points.points for m in objects.values()]
        _, result = train_autoencoder(
            base_points, cfg.ae, res=cfg.voxel_res, channels=cfg.ae_channels,
            latent_dim=cfg.latent_dim, padding=cfg.padding, seed=cfg.seed,
            n_rotations=cfg.ae_rotations, n_val_rotations=cfg.ae_val_rotations,
            out_path=out_path, start_state=start_state, log=log)
        write_trace(result.trace, trace_path(run_dir, stage))
        return {"stage": stage, "epochs": result.epochs_run, "final_val": result.final_val}

    if stage == "completion":
        wiring = get_variant(variant or "full")
        ae = ae_from_payload(prereq)
        prep = _prepared(dataset, cfg, "train", wiring)
        val_prep = prepare_split(dataset, dataset.split("val"), cfg,
                                 drop_tactile=wiring.drop_tactile,
                                 drop_visual=wiring.drop_visual,
                                 subsample_seed=dataset.manifest.seed)
        batch = prep.stack()
        lp = encode_grids(ae, batch["v_partial"])
        lc = encode_grids(ae, batch["v_complete"])
        val = None
        if len(val_prep):
            vb = val_prep.stack()
            val = {"image": vb["image"], "lp": encode_grids(ae, vb["v_partial"]),
                   "v_complete": vb["v_complete"]}
        if wiring.use_gan:
            fe, gen, disc, result = train_completion(
                ae=ae, images=batch["image"], lp=lp, lc=lc,
                v_complete=batch["v_complete"], stage=cfg.completion,
                alpha=cfg.alpha, feature_dim=cfg.feature_dim,
                fe_channels=cfg.fe_channels, gan_hidden=cfg.gan_hidden,
                dropout=cfg.dropout, gan_uses_feature=wiring.gan_uses_feature,
                seed=cfg.seed, val=val, out_path=out_path,
                start_state=start_state, log=log)
            payload = load_checkpoint(out_path)
            payload["extra"]["variant"] = wiring.name
            torch.save(payload, out_path)
            write_trace(result.trace, trace_path(run_dir, stage))
            return {"stage": stage, "epochs": result.epochs_run,
                    "final_val_recon": result.final_val_recon}
        # No-Shape-Completion: there is no latent mapping to train; persist a
        # fresh feature extractor that later stages train end-to-end
        torch.manual_seed(cfg.seed)
        fe = FeatureExtractor(cfg.fe_channels, cfg.feature_dim)
        save_checkpoint(out_path, arch={"fe": fe.arch, "ae": ae.arch},
                        state={"fe": fe.state_dict()},
                        extra={"stage": stage, "epoch": 0, "complete": True,
                               "trace": [], "variant": wiring.name,
                               "torch_rng": torch.get_rng_state().numpy(),
                               "seed": cfg.seed})
        write_trace([], trace_path(run_dir, stage))
        return {"stage": stage, "epochs": 0}

    # pose and e2e share most of the setup
    completion_payload = _load_complete(run_dir, "completion")
    inherited = _variant_of(completion_payload)
    wiring = get_variant(_check_variant(variant, inherited))
    ae = ae_from_payload(_load_complete(run_dir, "ae"))
    fe, gen, disc = _completion_modules(completion_payload)
    prep = _prepared(dataset, cfg, "train", wiring)
    batch = prep.stack()
    lp = encode_grids(ae, batch["v_partial"])
    points = _points_per_object(dataset, cfg, prep.object_ids)

    if stage == "pose":
        torch.manual_seed(cfg.seed)
        heads = PoseHeads(cfg.latent_dim, cfg.feature_dim, wiring.heads_use_feature)
        pipeline = PosePipeline(ae=ae, fe=freeze(fe), gen=freeze(gen) if gen else None,
                                disc=freeze(disc) if disc else None, heads=heads,
                                wiring=wiring, padding=cfg.padding)
        val_prep = prepare_split(dataset, dataset.split("val"), cfg,
                                 drop_tactile=wiring.drop_tactile,
                                 drop_visual=wiring.drop_visual,
                                 subsample_seed=dataset.manifest.seed)
        val = val_lp = None
        if len(val_prep):
            val = val_prep.stack()
            val_lp = encode_grids(ae, val["v_partial"])
        result = train_pose(pipeline, batch=batch, lp=lp, points_per_object=points,
                            stage=cfg.pose, seed=cfg.seed, val=val, val_lp=val_lp,
                            out_path=out_path, start_state=start_state, log=log)
        payload = load_checkpoint(out_path)
        payload["extra"]["variant"] = wiring.name
        torch.save(payload, out_path)
        write_trace(result.trace, trace_path(run_dir, stage))
        return {"stage": stage, "epochs": result.epochs_run, "final_val": result.final_val}

    # e2e
    pose_payload = _load_complete(run_dir, "pose")
    heads = _heads_from_arch(pose_payload["arch"]["heads"])
    heads.load_state_dict(pose_payload["state"]["heads"])
    pipeline = PosePipeline(ae=ae, fe=fe, gen=gen, disc=disc, heads=heads,
                            wiring=wiring, padding=cfg.padding)
    lc = encode_grids(ae, batch["v_complete"])
    result = train_end_to_end(pipeline, batch=batch, lp=lp, lc=lc,
                              points_per_object=points, stage=cfg.e2e,
                              alpha=cfg.alpha, beta=cfg.beta, seed=cfg.seed,
                              out_path=out_path, start_state=start_state, log=log)
    payload = load_checkpoint(out_path)
    payload["extra"]["variant"] = wiring.name
    torch.save(payload, out_path)
    write_trace(result.trace, trace_path(run_dir, stage))
    return {"stage": stage, "epochs": result.epochs_run}


def load_pipeline(cfg: RunConfig, stage: str = "auto") -> tuple[PosePipeline, str]:
    """Rebuild an inference pipeline from a run directory.

    ``stage`` may be "pose", "e2e", or "auto" (latest of the two).
    """
    run_dir = Path(cfg.out_dir)
    if stage == "auto":
        stage = "e2e" if checkpoint_path(run_dir, "e2e").exists() else "pose"
    if stage not in ("pose", "e2e"):
        raise ConfigError(f"evaluation stage must be 'pose', 'e2e', or 'auto', got {stage!r}")
    ae = ae_from_payload(_load_complete(run_dir, "ae"))
    if stage == "e2e":
        payload = _load_complete(run_dir, "e2e")
        wiring = get_variant(_variant_of(payload))
        fe, gen, disc = _completion_modules(payload)
        heads = _heads_from_arch(payload["arch"]["heads"])
        heads.load_state_dict(payload["state"]["heads"])
    else:
        completion_payload = _load_complete(run_dir, "completion")
        wiring = get_variant(_variant_of(completion_payload))
        fe, gen, disc = _completion_modules(completion_payload)
        payload = _load_complete(run_dir, "pose")
        heads = _heads_from_arch(payload["arch"]["heads"])
        heads.load_state_dict(payload["state"]["heads"])
    pipeline = PosePipeline(ae=ae, fe=fe, gen=gen, disc=disc, heads=heads,
                            wiring=wiring, padding=cfg.padding)
    pipeline.eval()
    return pipeline, stage
