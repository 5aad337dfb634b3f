"""Dataset generation, on-disk format, and the manifest.

Layout: <root>/manifest.json plus one directory per sample under
<root>/samples/<sample_id>/ holding meta.json and raw little-endian arrays
image.f32, image_clean.f32, points.f32, depth.f32 (row-major) and labels.u16.
Adverse samples store both the corrupted image (image.f32, the training
input) and the clean render (image_clean.f32); LiDAR stays clean at build
time. Rebuilding with the same config and seed is byte-identical.
"""

import hashlib
import json
import shutil
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .corruption import corrupt_image
from .errors import ConfigError, DatasetError, PrerequisiteError
from .geometry import CameraIntrinsics, RigidTransform, SensorRig
from .scenes import RenderConfig, Sample, WorldConfig, default_rig, generate_scene, render_sample
from .seeding import derive_seed

CONDITIONS = ("day_clear", "day_rain", "night")
CONDITION_KIND = {"day_rain": "rain", "night": "night"}


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    train_count: int = 256
    val_count: int = 64
    night_fraction: float = 0.12
    rain_fraction: float = 0.19
    image_width: int = 96
    image_height: int = 64
    focal_length: float = 52.0
    night_severity: int = 5
    rain_severity: int = 2
    world: WorldConfig = field(default_factory=WorldConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def validate(self):
        if self.train_count < 0 or self.val_count < 0:
            raise ConfigError("sample counts must be nonnegative")
        if not (0 <= self.night_fraction and 0 <= self.rain_fraction
                and self.night_fraction + self.rain_fraction <= 1):
            raise ConfigError("condition fractions must be nonnegative and sum to <= 1")
        if self.image_width < 8 or self.image_height < 8:
            raise ConfigError("image size too small")
        if self.focal_length <= 0:
            raise ConfigError("focal_length must be positive")
        self.world.validate()
        self.render.validate()


@dataclass
class SampleRecord:
    sample_id: str
    condition: str
    split: str
    path: str


@dataclass
class DatasetManifest:
    root: str
    config_hash: str
    counts: dict
    samples: list

    def records(self, split: str | None = None):
        if split is None:
            return list(self.samples)
        return [r for r in self.samples if r.split == split]


def config_hash_of(config: DatasetConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def assign_conditions(count: int, night_fraction: float, rain_fraction: float):
    """Condition per index: night block, then rain, then day_clear."""
    n_night = int(round(count * night_fraction))
    n_rain = int(round(count * rain_fraction))
    if n_night + n_rain > count:
        raise ConfigError("condition fractions exceed sample count")
    return ["night"] * n_night + ["day_rain"] * n_rain + ["day_clear"] * (count - n_night - n_rain)


def make_sample(config: DatasetConfig, sample_id: str, condition: str,
                rig: SensorRig | None = None) -> Sample:
    """Generate one sample deterministically from (config.seed, sample_id)."""
    if rig is None:
        rig = default_rig(config.image_width, config.image_height, config.focal_length)
    seed_i = derive_seed(config.seed, "sample", sample_id)
    scene = generate_scene(seed_i, config.world)
    sample = render_sample(scene, rig, config.render, sample_id=sample_id)
    sample.condition = condition
    if condition in CONDITION_KIND:
        kind = CONDITION_KIND[condition]
        severity = config.night_severity if kind == "night" else config.rain_severity
        sample.image = corrupt_image(sample.image_clean, kind, severity,
                                     seed=derive_seed(seed_i, "condition"))
    return sample


def _write_array(path: Path, arr: np.ndarray, dtype: str):
    path.write_bytes(np.ascontiguousarray(arr).astype(dtype).tobytes())


def _rig_to_meta(rig: SensorRig) -> dict:
    intr = rig.intrinsics
    return {
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
        "rotation": rig.lidar_to_camera.rotation.reshape(-1).tolist(),
        "translation": rig.lidar_to_camera.translation.tolist(),
    }


def rig_from_meta(meta: dict) -> SensorRig:
    intr = CameraIntrinsics(meta["fx"], meta["fy"], meta["cx"], meta["cy"],
                            meta["width"], meta["height"])
    rot = np.array(meta["rotation"], dtype=np.float64).reshape(3, 3)
    return SensorRig(intr, RigidTransform(rot, np.array(meta["translation"])))


def save_sample(sample: Sample, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    h, w, _ = sample.image.shape
    meta = {
        "sample_id": sample.sample_id,
        "condition": sample.condition,
        "image_shape": [h, w, 3],
        "points_shape": list(sample.points.shape),
        "depth_shape": [h, w],
        "labels_shape": [int(len(sample.point_labels))],
        "dtypes": {"image": "<f4", "image_clean": "<f4", "points": "<f4",
                   "depth": "<f4", "labels": "<u2"},
        "rig": _rig_to_meta(sample.rig),
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    _write_array(directory / "image.f32", sample.image, "<f4")
    _write_array(directory / "image_clean.f32", sample.image_clean, "<f4")
    _write_array(directory / "points.f32", sample.points, "<f4")
    _write_array(directory / "depth.f32", sample.pixel_depth, "<f4")
    _write_array(directory / "labels.u16", sample.point_labels, "<u2")


def load_sample(root: Path, record: SampleRecord) -> Sample:
    directory = Path(root) / record.path
    meta = json.loads((directory / "meta.json").read_text())
    h, w, _ = meta["image_shape"]
    n = meta["points_shape"][0]

    def read(name, dtype, shape):
        arr = np.frombuffer((directory / name).read_bytes(), dtype=dtype)
        return arr.reshape(shape).copy()

    return Sample(
        image=read("image.f32", "<f4", (h, w, 3)),
        image_clean=read("image_clean.f32", "<f4", (h, w, 3)),
        points=read("points.f32", "<f4", (n, 3)),
        point_labels=read("labels.u16", "<u2", (n,)),
        pixel_depth=read("depth.f32", "<f4", (h, w)),
        condition=meta["condition"],
        rig=rig_from_meta(meta["rig"]),
        sample_id=meta["sample_id"],
    )


def save_manifest(manifest: DatasetManifest, root: Path):
    payload = {
        "config_hash": manifest.config_hash,
        "counts": manifest.counts,
        "samples": [asdict(r) for r in manifest.samples],
    }
    (Path(root) / "manifest.json").write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_manifest(root: Path) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise PrerequisiteError(f"no manifest.json under {root}")
    payload = json.loads(path.read_text())
    samples = [SampleRecord(**r) for r in payload["samples"]]
    return DatasetManifest(root=str(root), config_hash=payload["config_hash"],
                           counts=payload["counts"], samples=samples)


def build_dataset(config: DatasetConfig, out_dir: Path) -> DatasetManifest:
    """Generate the full dataset on disk and return its manifest."""
    config.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    samples_dir = root / "samples"
    rig = default_rig(config.image_width, config.image_height, config.focal_length)

    records = []
    counts = {c: 0 for c in CONDITIONS}
    created = []
    try:
        for split, count in (("train", config.train_count), ("val", config.val_count)):
            conditions = assign_conditions(count, config.night_fraction, config.rain_fraction)
            for i, condition in enumerate(conditions):
                sample_id = f"{split}_{i:04d}"
                sample = make_sample(config, sample_id, condition, rig)
                directory = samples_dir / sample_id
                save_sample(sample, directory)
                created.append(directory)
                records.append(SampleRecord(sample_id, condition, split,
                                            str(directory.relative_to(root))))
                counts[condition] += 1
    except Exception as exc:
        for directory in created:
            shutil.rmtree(directory, ignore_errors=True)
        raise DatasetError(f"dataset build failed: {exc}") from exc

    manifest = DatasetManifest(root=str(root), config_hash=config_hash_of(config),
                               counts=counts, samples=records)
    save_manifest(manifest, root)
    return manifest
