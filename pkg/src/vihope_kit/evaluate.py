"""Model evaluation: per-sample records, aggregate tables, occlusion bins,
and the tactile-count sweep.

Aggregates are mean plus standard error (std / sqrt(n), ddof=1) and are
recomputable bit-exactly from the persisted per-sample records; floats are
serialized with full round-trip precision.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .dataio import Dataset, model_points
from .errors import ConfigError
from .geometry import NormFactors, PointCloud, Pose, Role, VoxelGrid, devoxelize
from .metrics import add, add_s, angular_error_deg, chamfer, iou, position_error
from .pose import DATA_VARIANTS, PosePipeline, get_variant
from .preprocess import encode_grids, prepare_split

OCCLUSION_BIN_COUNT = 9  # [0,0.1) .. [0.8,0.9]; anything above folds into the last

METRIC_FIELDS = ("position_error", "angular_error_deg", "add", "add_s",
                 "iou", "cd", "iou_partial")


@dataclass
class SampleRecord:
    index: int
    object_id: str
    occlusion: float
    n_tactile: int
    skipped: bool
    position_error: float = math.nan
    angular_error_deg: float = math.nan
    add: float = math.nan
    add_s: float = math.nan
    iou: float = math.nan
    cd: float = math.nan
    iou_partial: float = math.nan


@dataclass
class EvalReport:
    label: str
    records: list[SampleRecord]
    summary: dict


def _aggregate(values: list[float]) -> dict | None:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return None
    arr = np.asarray(vals, dtype=np.float64)
    stderr = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "stderr": stderr, "count": len(arr)}


def summarize(records: list[SampleRecord], label: str) -> dict:
    live = [r for r in records if not r.skipped]
    summary: dict = {
        "label": label,
        "samples": len(records),
        "skipped": sum(r.skipped for r in records),
        "metrics": {},
        "occlusion_bins": {},
    }
    for name in METRIC_FIELDS:
        agg = _aggregate([getattr(r, name) for r in live])
        if agg is not None:
            summary["metrics"][name] = agg
    for b in range(OCCLUSION_BIN_COUNT):
        lo, hi = b / 10.0, (b + 1) / 10.0
        if b == OCCLUSION_BIN_COUNT - 1:
            members = [r for r in live if r.occlusion >= lo]
        else:
            members = [r for r in live if lo <= r.occlusion < hi]
        if not members:
            continue  # empty bins are absent, never zero
        entry = {}
        for name in METRIC_FIELDS:
            agg = _aggregate([getattr(r, name) for r in members])
            if agg is not None:
                entry[name] = agg
        entry["count"] = len(members)
        summary["occlusion_bins"][f"{lo:.1f}-{hi:.1f}"] = entry
    return summary


def run_evaluation(
    pipeline: PosePipeline,
    dataset: Dataset,
    split: str,
    cfg: RunConfig,
    *,
    ablate: str | None = None,
    tactile_n: int | None = None,
    with_shape: bool = True,
    label: str | None = None,
    batch_size: int = 64,
) -> EvalReport:
    """Evaluate on a dataset split; optionally under a data-level ablation
    or with the tactile cloud subsampled to ``tactile_n`` points."""
    drop_tactile = drop_visual = False
    if ablate is not None:
        wiring = get_variant(ablate)
        if ablate in DATA_VARIANTS:
            drop_tactile = wiring.drop_tactile
            drop_visual = wiring.drop_visual
        elif pipeline.wiring.name != ablate:
            raise ConfigError(
                f"ablation {ablate!r} changes the architecture; evaluate a checkpoint "
                f"trained with that variant (this one is {pipeline.wiring.name!r})")
    drop_tactile = drop_tactile or pipeline.wiring.drop_tactile
    drop_visual = drop_visual or pipeline.wiring.drop_visual

    indices = dataset.split(split)
    prep = prepare_split(dataset, indices, cfg, drop_tactile=drop_tactile,
                         drop_visual=drop_visual, tactile_n=tactile_n,
                         subsample_seed=dataset.manifest.seed)
    records = [
        SampleRecord(index=i, object_id="", occlusion=math.nan, n_tactile=0, skipped=True)
        for i in prep.skipped
    ]
    if len(prep) == 0:
        lbl = label or (ablate or pipeline.wiring.name)
        return EvalReport(lbl, records, summarize(records, lbl))

    points = {oid: model_points(dataset, oid, cfg.model_points) for oid in prep.object_ids}
    batch = prep.stack()
    pipeline.eval()
    quats, t_res, lhats = [], [], []
    with torch.no_grad():
        for s in range(0, len(prep), batch_size):
            q, t, lh = pipeline.forward_tensors(
                images=batch["image"][s:s + batch_size],
                lp=encode_grids(pipeline.ae, batch["v_partial"][s:s + batch_size]),
                mu=batch["mu"][s:s + batch_size],
                scale=batch["scale"][s:s + batch_size],
            )
            quats.append(q)
            t_res.append(t)
            lhats.append(lh)
        quats = torch.cat(quats).double().numpy()
        t_res = torch.cat(t_res).double().numpy()
        lhats = torch.cat(lhats)
        soft = None
        if with_shape:
            soft = torch.cat([
                pipeline.ae.decode_tensor(lhats[s:s + batch_size])
                for s in range(0, len(lhats), batch_size)
            ]).double().numpy()

    res = cfg.voxel_res
    for j, p in enumerate(prep.samples):
        sample = dataset[prep.indices[j]]
        q_est = quats[j] / np.linalg.norm(quats[j])
        t_est = t_res[j] * p.scale + p.mu
        est = Pose(q_est, t_est)
        gt = sample.gt_pose
        k_pts = points[p.object_id]
        rec = SampleRecord(
            index=prep.indices[j],
            object_id=p.object_id,
            occlusion=p.occlusion,
            n_tactile=p.n_tactile,
            skipped=False,
            position_error=position_error(gt.translation, est.translation),
            angular_error_deg=angular_error_deg(gt.rotation, est.rotation),
            add=add(gt, est, k_pts),
            add_s=add_s(gt, est, k_pts),
        )
        if with_shape:
            pred = (soft[j] >= 0.5).astype(np.float64)
            vc = p.v_complete.astype(np.float64)
            rec.iou = iou(VoxelGrid(pred, (res,) * 3), VoxelGrid(vc, (res,) * 3))
            rec.iou_partial = iou(VoxelGrid(p.v_partial.astype(np.float64), (res,) * 3),
                                  VoxelGrid(vc, (res,) * 3))
            nf = NormFactors(p.mu, p.sigma, cfg.padding)
            pred_cloud = devoxelize(VoxelGrid(pred, (res,) * 3), nf, 0.5)
            if len(pred_cloud) > 0:
                gt_cloud = sample.gt_complete.points
                rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=dataset.manifest.seed,
                                           spawn_key=(5, prep.indices[j])))
                m = min(len(pred_cloud), len(gt_cloud))
                sub = gt_cloud[np.sort(rng.choice(len(gt_cloud), size=m, replace=False))]
                rec.cd = chamfer(pred_cloud, PointCloud(sub, Role.COMPLETE))
        records.append(rec)
    records.sort(key=lambda r: r.index)
    lbl = label or (ablate or pipeline.wiring.name)
    return EvalReport(lbl, records, summarize(records, lbl))


def tactile_sweep(pipeline: PosePipeline, dataset: Dataset, split: str,
                  cfg: RunConfig, counts=None) -> dict[int, EvalReport]:
    """Evaluate the same model while subsampling the tactile cloud."""
    counts = cfg.tactile_sweep if counts is None else counts
    return {
        int(n): run_evaluation(pipeline, dataset, split, cfg, tactile_n=int(n),
                               label=f"tactile_{int(n)}")
        for n in counts
    }


# ---------------------------------------------------------------------------
# persistence


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)  # shortest round-trip representation
    return str(x)


def write_records_csv(records: list[SampleRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(asdict(records[0]).keys()) if records else [
        "index", "object_id", "occlusion", "n_tactile", "skipped", *METRIC_FIELDS]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in records:
            writer.writerow([_fmt(v) for v in asdict(r).values()])


def read_records_csv(path) -> list[SampleRecord]:
    out = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            out.append(SampleRecord(
                index=int(row["index"]),
                object_id=row["object_id"],
                occlusion=float(row["occlusion"]),
                n_tactile=int(row["n_tactile"]),
                skipped=row["skipped"] == "True",
                **{name: float(row[name]) for name in METRIC_FIELDS},
            ))
    return out


def write_report(report: EvalReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(report.records, out / "records.csv")
    (out / "summary.json").write_text(
        json.dumps(report.summary, indent=2, sort_keys=True) + "\n")
    return out


def plot_occlusion_sweep(summary: dict, path, metric: str = "add") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    bins = summary["occlusion_bins"]
    xs, ys, errs = [], [], []
    for name, entry in sorted(bins.items()):
        if metric not in entry:
            continue
        lo = float(name.split("-")[0])
        xs.append(lo + 0.05)
        ys.append(entry[metric]["mean"])
        errs.append(entry[metric]["stderr"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, ys, yerr=errs, marker="o")
    ax.set_xlabel("occlusion level")
    ax.set_ylabel(metric)
    ax.set_title(summary["label"])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_tactile_sweep(reports: dict[int, EvalReport], path,
                       metric: str = "angular_error_deg") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = sorted(reports)
    ys = [reports[n].summary["metrics"][metric]["mean"] for n in xs]
    errs = [reports[n].summary["metrics"][metric]["stderr"] for n in xs]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, ys, yerr=errs, marker="o")
    ax.set_xlabel("tactile contact points")
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
