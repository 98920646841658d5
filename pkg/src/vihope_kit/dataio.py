"""Dataset persistence: flat binary sample records plus a JSON manifest.

Layout: one directory per dataset, containing ``manifest.json`` and one
``NNNNNN.rec`` file per sample. A record is little-endian throughout:

    magic "VHP1" | u32 field count (9) | 9 length-prefixed fields

Each field is ``u32 byte length`` followed by the payload. Field order is
fixed: image f32[H*W*3], depth f32[H*W], mask u8[H*W], tactile f32[n*3],
quat f32[4], trans f32[3], complete f32[m*3], occlusion f32, object_id
utf-8. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DatasetConfig, ObjectSpec
from .geometry import PointCloud, Pose, Role
from .synthdata import ObjectModel, Sample, build_objects

MAGIC = b"VHP1"
FIELD_COUNT = 9
MANIFEST_VERSION = 1


def _pack_field(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_record(sample: Sample) -> bytes:
    parts = [MAGIC, struct.pack("<I", FIELD_COUNT)]
    parts.append(_pack_field(_f32_bytes(sample.image)))
    parts.append(_pack_field(_f32_bytes(sample.depth)))
    parts.append(_pack_field(np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes()))
    parts.append(_pack_field(_f32_bytes(sample.tactile.points)))
    parts.append(_pack_field(_f32_bytes(sample.gt_pose.rotation)))
    parts.append(_pack_field(_f32_bytes(sample.gt_pose.translation)))
    parts.append(_pack_field(_f32_bytes(sample.gt_complete.points)))
    parts.append(_pack_field(struct.pack("<f", sample.occlusion_level)))
    parts.append(_pack_field(sample.object_id.encode("utf-8")))
    return b"".join(parts)


def decode_record(blob: bytes, image_hw: tuple[int, int]) -> Sample:
    if blob[:4] != MAGIC:
        raise ValueError("bad record magic")
    (count,) = struct.unpack_from("<I", blob, 4)
    if count != FIELD_COUNT:
        raise ValueError(f"expected {FIELD_COUNT} fields, found {count}")
    offset = 8
    fields = []
    for _ in range(count):
        (length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        fields.append(blob[offset:offset + length])
        offset += length
    if offset != len(blob):
        raise ValueError("trailing bytes in record")
    h, w = image_hw
    image = np.frombuffer(fields[0], dtype="<f4").reshape(h, w, 3)
    depth = np.frombuffer(fields[1], dtype="<f4").reshape(h, w)
    mask = np.frombuffer(fields[2], dtype=np.uint8).reshape(h, w).astype(bool)
    tactile = np.frombuffer(fields[3], dtype="<f4").reshape(-1, 3)
    quat = np.frombuffer(fields[4], dtype="<f4")
    trans = np.frombuffer(fields[5], dtype="<f4")
    complete = np.frombuffer(fields[6], dtype="<f4").reshape(-1, 3)
    (occlusion,) = struct.unpack("<f", fields[7])
    object_id = fields[8].decode("utf-8")
    quat64 = quat.astype(np.float64)
    quat64 /= np.linalg.norm(quat64)  # undo f32 rounding of the unit norm
    return Sample(
        image=image.copy(),
        depth=depth.copy(),
        mask=mask,
        tactile=PointCloud(tactile, Role.TACTILE),
        gt_pose=Pose(quat64, trans.astype(np.float64)),
        gt_complete=PointCloud(complete, Role.COMPLETE),
        object_id=object_id,
        occlusion_level=float(occlusion),
    )


def record_name(index: int) -> str:
    return f"{index:06d}.rec"


@dataclass
class DatasetManifest:
    version: int
    seed: int
    objects: list[dict]
    samples: int
    image_hw: tuple[int, int]
    splits: dict

    def to_json(self) -> str:
        data = {
            "version": self.version,
            "seed": self.seed,
            "objects": self.objects,
            "samples": self.samples,
            "image_hw": list(self.image_hw),
            "splits": self.splits,
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        data = json.loads(text)
        return DatasetManifest(
            version=data["version"],
            seed=data["seed"],
            objects=data["objects"],
            samples=data["samples"],
            image_hw=tuple(data["image_hw"]),
            splits=data["splits"],
        )


def _split_indices(n: int, fractions, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2, 0)))
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return {
        "fractions": list(fractions),
        "train": sorted(int(i) for i in perm[:n_train]),
        "val": sorted(int(i) for i in perm[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val:]),
    }


class DatasetWriter:
    """Serializes records as they arrive; the manifest is written last."""

    def __init__(self, out_dir, cfg: DatasetConfig, seed: int):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.seed = seed
        self.count = 0

    def add(self, sample: Sample) -> None:
        path = self.dir / record_name(self.count)
        path.write_bytes(encode_record(sample))
        self.count += 1

    def finalize(self) -> DatasetManifest:
        objects = [
            {
                "id": spec.id,
                "kind": spec.kind,
                "dims": list(spec.dims),
                "surface_points": self.cfg.surface_points,
                "rng_index": i,
            }
            for i, spec in enumerate(self.cfg.objects)
        ]
        manifest = DatasetManifest(
            version=MANIFEST_VERSION,
            seed=self.seed,
            objects=objects,
            samples=self.count,
            image_hw=self.cfg.image_hw,
            splits=_split_indices(self.count, self.cfg.split_fractions, self.seed),
        )
        (self.dir / "manifest.json").write_text(manifest.to_json())
        return manifest


class Dataset:
    """Read-only view of a dataset directory with lazy record loading."""

    def __init__(self, path):
        self.dir = Path(path)
        manifest_path = self.dir / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json under {self.dir}")
        self.manifest = DatasetManifest.from_json(manifest_path.read_text())

    def __len__(self) -> int:
        return self.manifest.samples

    def __getitem__(self, index: int) -> Sample:
        if not (0 <= index < len(self)):
            raise IndexError(index)
        blob = (self.dir / record_name(index)).read_bytes()
        return decode_record(blob, self.manifest.image_hw)

    def split(self, name: str) -> list[int]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return list(self.manifest.splits[name])

    def object_models(self, n_points: int | None = None) -> dict[str, ObjectModel]:
        """Rebuild the generator's objects from the manifest (deterministic)."""
        specs = tuple(
            ObjectSpec(o["id"], o["kind"], tuple(o["dims"])) for o in self.manifest.objects
        )
        cfg = DatasetConfig(
            path=str(self.dir),
            objects=specs,
            samples_per_object=max(1, len(self) // max(1, len(specs))),
            image_hw=self.manifest.image_hw,
            surface_points=n_points or self.manifest.objects[0]["surface_points"],
        )
        return {m.id: m for m in build_objects(cfg, self.manifest.seed)}


def validate_dataset(path) -> dict:
    """Format validation: manifest readable, record count and shapes match,
    splits disjoint and exhaustive. Returns a small report dict; raises on
    any violation."""
    ds = Dataset(path)
    m = ds.manifest
    splits = m.splits
    all_ids = sorted(splits["train"]) + sorted(splits["val"]) + sorted(splits["test"])
    if sorted(all_ids) != list(range(m.samples)):
        raise ValueError("splits are not disjoint and exhaustive")
    h, w = m.image_hw
    for idx in range(m.samples):
        sample = ds[idx]
        if sample.image.shape != (h, w, 3) or sample.depth.shape != (h, w):
            raise ValueError(f"record {idx}: image/depth shape mismatch")
        if sample.object_id not in {o["id"] for o in m.objects}:
            raise ValueError(f"record {idx}: unknown object id {sample.object_id!r}")
    return {"samples": m.samples, "objects": [o["id"] for o in m.objects],
            "image_hw": list(m.image_hw),
            "split_sizes": {k: len(splits[k]) for k in ("train", "val", "test")}}


def model_points(dataset: Dataset, object_id: str, k: int) -> np.ndarray:
    """k canonical model points for pose losses and ADD metrics, derived
    deterministically from the dataset seed."""
    models = dataset.object_models()
    if object_id not in models:
        raise KeyError(object_id)
    obj_index = [o["id"] for o in dataset.manifest.objects].index(object_id)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=dataset.manifest.seed, spawn_key=(3, obj_index))
    )
    surface = models[object_id].surface_points.points
    idx = rng.choice(len(surface), size=min(k, len(surface)), replace=False)
    return surface[idx]
