"""Experiment configuration: strict YAML schema over the module dataclasses.

One top-level `seed` feeds the dataset, trainer, and probe sub-configs, so a
config file plus that seed pins every random draw in a run. Unknown keys are
rejected with their dotted path; YAML syntax errors keep the parser's
line/column anchor. A content hash of the parsed config is stamped into every
output.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import DatasetConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .evalsuite import ProbeConfig
from .scenes import RenderConfig, WorldConfig
from .training import StageHyper, TrainerConfig


@dataclass(frozen=True)
class AblationConfig:
    corruption_kinds: tuple = ("night", "rain", "fog", "gaussian", "motion_blur")
    corruption_severities: tuple = (1, 3, 5)
    lidar_kinds: tuple = ("gaussian_noise", "density_decrease")
    lidar_severities: tuple = (1, 2)
    epoch_sweep: tuple = (1, 2, 8)

    def validate(self):
        if not self.corruption_kinds or not self.corruption_severities:
            raise ConfigError("corruption suite must list kinds and severities")
        if not self.epoch_sweep:
            raise ConfigError("epoch_sweep must be nonempty")


@dataclass(frozen=True)
class OutputConfig:
    root: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self):
        self.dataset.validate()
        self.encoder.validate()
        self.trainer.validate()
        self.probe.validate()
        self.ablation.validate()

    def content_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def num_classes(self) -> int:
        # Ground class 0 plus the primitive classes.
        return self.dataset.world.num_classes + 1


# Keys injected by the loader rather than read from the file.
_INJECTED = {
    DatasetConfig: {"seed", "world", "render"},
    TrainerConfig: {"seed", "encoder", "stage1", "stage2"},
    ProbeConfig: {"seed"},
    ExperimentConfig: {"dataset", "encoder", "trainer", "probe", "ablation", "output"},
}


def _coerce(value, target, path):
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _fill(dc_type, data: dict, path: str, **injected):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(dc_type)}
    hidden = _INJECTED.get(dc_type, set())
    for key in data:
        if key not in fields or key in hidden:
            known = sorted(set(fields) - hidden)
            raise ConfigError(f"unknown key {path}.{key} (known: {', '.join(known)})")

    kwargs = dict(injected)
    for name, f in fields.items():
        if name in kwargs or name not in data:
            continue
        value = data[name]
        ftype = f.type if isinstance(f.type, type) else None
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = _coerce(value, ftype, f"{path}.{name}")
    return dc_type(**kwargs)


def config_from_dict(raw: dict, path: str = "config") -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for key in raw:
        if key not in ("seed", "dataset", "encoder", "trainer", "probe", "ablation", "output"):
            raise ConfigError(f"unknown key {path}.{key}")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"{path}.seed: expected an integer, got {seed!r}")

    dataset_raw = dict(raw.get("dataset") or {})
    world = _fill(WorldConfig, dataset_raw.pop("world", {}), f"{path}.dataset.world")
    render = _fill(RenderConfig, dataset_raw.pop("render", {}), f"{path}.dataset.render")
    dataset = _fill(DatasetConfig, dataset_raw, f"{path}.dataset",
                    seed=seed, world=world, render=render)

    encoder = _fill(EncoderConfig, raw.get("encoder", {}), f"{path}.encoder")

    trainer_raw = dict(raw.get("trainer") or {})
    stage1 = _stage(trainer_raw.pop("stage1", {}), f"{path}.trainer.stage1", TrainerConfig().stage1)
    stage2 = _stage(trainer_raw.pop("stage2", {}), f"{path}.trainer.stage2", TrainerConfig().stage2)
    corruption = trainer_raw.get("lidar_anchor_corruption")
    if corruption is not None:
        if (not isinstance(corruption, (list, tuple)) or len(corruption) != 2):
            raise ConfigError(f"{path}.trainer.lidar_anchor_corruption: expected [kind, severity]")
        trainer_raw["lidar_anchor_corruption"] = (str(corruption[0]), int(corruption[1]))
    trainer = _fill(TrainerConfig, trainer_raw, f"{path}.trainer",
                    seed=seed, encoder=encoder, stage1=stage1, stage2=stage2)

    probe = _fill(ProbeConfig, raw.get("probe", {}), f"{path}.probe", seed=seed)
    ablation = _fill(AblationConfig, raw.get("ablation", {}), f"{path}.ablation")
    output = _fill(OutputConfig, raw.get("output", {}), f"{path}.output")

    config = ExperimentConfig(seed=seed, dataset=dataset, encoder=encoder,
                              trainer=trainer, probe=probe, ablation=ablation,
                              output=output)
    config.validate()
    return config


def _stage(data, path, defaults: StageHyper) -> StageHyper:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name for f in dataclasses.fields(StageHyper)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {path}.{key} (known: {', '.join(sorted(known))})")
    kwargs = {f.name: data.get(f.name, getattr(defaults, f.name))
              for f in dataclasses.fields(StageHyper)}
    return StageHyper(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {exc}") from exc
    return config_from_dict(raw, path=str(path))
