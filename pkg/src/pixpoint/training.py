"""Two-stage training orchestration.

Stage 1 trains the 3D encoder (with its head) toward frozen 2D features on
day-clear samples; stage 2 swaps the roles, training the 2D encoder on every
condition's stored (possibly corrupted) image against frozen 3D anchors
computed from the clean cloud. The frozen side is never handed to the
optimizer and is hash-checked every epoch, so freezing is exact by
construction and verified anyway.

Correspondences are matched on the un-augmented cloud; LiDAR augmentation
(z-rotation, axis flips) is an isometry, so the k-NN graph is computed once
per sample and shared across epochs.
"""

import copy
import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .corruption import corrupt_lidar
from .dataset import DatasetManifest, load_sample
from .distill import MatchedFeatures, Stage, joint_loss, stage_loss
from .encoders import (EncoderConfig, ImageEncoder, PointEncoder, forward_2d,
                       forward_3d, knn_indices, params_from_bytes, params_hash,
                       params_to_bytes)
from .errors import ConfigError, NumericalError, PrerequisiteError
from .geometry import match_correspondences
from .seeding import derive_seed, rng_for


@dataclass(frozen=True)
class StageHyper:
    epochs: int
    batch_size: int
    peak_lr: float
    floor_lr: float
    weight_decay: float
    warmup_fraction: float

    def validate(self, name: str):
        if self.epochs < 1:
            raise ConfigError(f"{name}: epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"{name}: batch_size must be >= 1")
        if not (0 < self.floor_lr <= self.peak_lr):
            raise ConfigError(f"{name}: need 0 < floor_lr <= peak_lr")
        if not (0 <= self.warmup_fraction < 1):
            raise ConfigError(f"{name}: warmup_fraction must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError(f"{name}: weight_decay must be >= 0")


def _default_stage1():
    return StageHyper(epochs=30, batch_size=8, peak_lr=2e-3, floor_lr=1e-5,
                      weight_decay=3e-2, warmup_fraction=0.1)


def _default_stage2():
    return StageHyper(epochs=3, batch_size=8, peak_lr=1e-3, floor_lr=1e-5,
                      weight_decay=0.0, warmup_fraction=0.1)


@dataclass(frozen=True)
class TrainerConfig:
    seed: int = 0
    stage1: StageHyper = field(default_factory=_default_stage1)
    stage2: StageHyper = field(default_factory=_default_stage2)
    joint_epochs: int = 30
    augment: bool = True
    skip_stage1: bool = False
    stage1_full_data: bool = False
    joint_one_stage: bool = False
    lidar_anchor_corruption: tuple | None = None   # (kind, severity) or None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self):
        self.stage1.validate("stage1")
        self.stage2.validate("stage2")
        if self.joint_epochs < 1:
            raise ConfigError("joint_epochs must be >= 1")
        if self.joint_one_stage and (self.skip_stage1 or self.stage1_full_data):
            raise ConfigError("joint_one_stage excludes the other ablation flags")
        self.encoder.validate()

    def content_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- schedule and optimizer --------------------------------------------------

def cosine_lr(step: int, total_steps: int, warmup_steps: int,
              peak: float, floor: float) -> float:
    """Linear 0 -> peak over warmup, then cosine peak -> floor."""
    if step < warmup_steps:
        return peak * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Decoupled-weight-decay Adam moments for one named parameter set."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_optimizer(named_params, weight_decay: float = 0.0,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> OptimizerState:
    m = {name: torch.zeros_like(p) for name, p in named_params}
    v = {name: torch.zeros_like(p) for name, p in named_params}
    return OptimizerState(m=m, v=v, beta1=beta1, beta2=beta2, eps=eps,
                          weight_decay=weight_decay)


def optimizer_step(named_params, grads: dict, state: OptimizerState, rate: float):
    """One AdamW update in place; decay is applied directly to the weights."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, param in named_params:
            grad = grads.get(name)
            if grad is None:
                grad = torch.zeros_like(param)
            if not torch.all(torch.isfinite(grad)):
                raise NumericalError(f"non-finite gradient in {name}")
            if state.weight_decay:
                param.mul_(1.0 - rate * state.weight_decay)
            m = state.m[name]
            v = state.v[name]
            m.mul_(state.beta1).add_(grad, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(grad, grad, value=1.0 - state.beta2)
            m_hat = m / bc1
            v_hat = v / bc2
            param.addcdiv_(m_hat, v_hat.sqrt().add_(state.eps), value=-rate)


# --- data plumbing -----------------------------------------------------------

def filter_stage1_data(manifest: DatasetManifest, full_data: bool = False,
                       split: str = "train"):
    """Day-clear training records, or the full split when the flag is set."""
    records = manifest.records(split)
    if full_data:
        return records
    kept = [r for r in records if r.condition == "day_clear"]
    if not kept:
        raise PrerequisiteError("no day_clear samples available for stage 1")
    return kept


def apply_z_rotation_flips(points: np.ndarray, theta: float,
                           flip_x: bool, flip_y: bool) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    out = np.asarray(points, dtype=np.float64) @ rot.T
    if flip_x:
        out[:, 0] = -out[:, 0]
    if flip_y:
        out[:, 1] = -out[:, 1]
    return out.astype(np.float32)


def augment_lidar(points: np.ndarray, seed: int) -> np.ndarray:
    """Random z rotation then independent x/y sign flips, seed-deterministic."""
    rng = rng_for(seed, "augment")
    theta = float(rng.uniform(0.0, 2.0 * math.pi))
    flip_x = bool(rng.random() < 0.5)
    flip_y = bool(rng.random() < 0.5)
    return apply_z_rotation_flips(points, theta, flip_x, flip_y)


def _shuffled(indices, seed: int, stage: str, epoch: int):
    order = rng_for(seed, "shuffle", stage, epoch).permutation(len(indices))
    return [indices[i] for i in order]


def _batches(items, batch_size):
    for i in range(0, len(items), batch_size):
        yield items[i:i + batch_size]


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    enc2d: ImageEncoder
    enc3d: PointEncoder
    opt_state: OptimizerState | None
    step: int
    stage: str
    config_hash: str
    seed: int
    trace: list = field(default_factory=list, repr=False)


def _moments_to_bytes(state: OptimizerState, order):
    m = b"".join(np.ascontiguousarray(state.m[n].numpy()).astype("<f4").tobytes() for n in order)
    v = b"".join(np.ascontiguousarray(state.v[n].numpy()).astype("<f4").tobytes() for n in order)
    return m, v


def save_checkpoint(ckpt: Checkpoint, directory: Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    enc_cfg = asdict(ckpt.enc2d.cfg)
    meta = {
        "stage": ckpt.stage,
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "seed": ckpt.seed,
        "encoder": enc_cfg,
        "groups_2d": [[n, list(p.shape)] for n, p in ckpt.enc2d.named_parameters()],
        "groups_3d": [[n, list(p.shape)] for n, p in ckpt.enc3d.named_parameters()],
        "optimizer": None,
    }
    files = {
        "params2d.f32": params_to_bytes(ckpt.enc2d),
        "params3d.f32": params_to_bytes(ckpt.enc3d),
    }
    if ckpt.opt_state is not None:
        order = sorted(ckpt.opt_state.m.keys())
        meta["optimizer"] = {
            "order": order,
            "step": ckpt.opt_state.step,
            "beta1": ckpt.opt_state.beta1,
            "beta2": ckpt.opt_state.beta2,
            "eps": ckpt.opt_state.eps,
            "weight_decay": ckpt.opt_state.weight_decay,
            "shapes": {n: list(ckpt.opt_state.m[n].shape) for n in order},
        }
        m_bytes, v_bytes = _moments_to_bytes(ckpt.opt_state, order)
        files["opt_m.f32"] = m_bytes
        files["opt_v.f32"] = v_bytes

    # Write via temp-then-rename so checkpoints are atomic per file.
    for name, blob in files.items():
        tmp = directory / (name + ".tmp")
        tmp.write_bytes(blob)
        tmp.replace(directory / name)
    tmp = directory / "checkpoint.json.tmp"
    tmp.write_text(json.dumps(meta, sort_keys=True, indent=1))
    tmp.replace(directory / "checkpoint.json")


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    meta_path = directory / "checkpoint.json"
    if not meta_path.exists():
        raise PrerequisiteError(f"no checkpoint.json under {directory}")
    meta = json.loads(meta_path.read_text())
    cfg = EncoderConfig(**meta["encoder"])
    enc2d = ImageEncoder(cfg, seed=0)
    enc3d = PointEncoder(cfg, seed=0)
    params_from_bytes(enc2d, (directory / "params2d.f32").read_bytes())
    params_from_bytes(enc3d, (directory / "params3d.f32").read_bytes())

    opt_state = None
    if meta.get("optimizer"):
        spec = meta["optimizer"]
        order = spec["order"]
        m_raw = (directory / "opt_m.f32").read_bytes()
        v_raw = (directory / "opt_v.f32").read_bytes()
        m, v, offset = {}, {}, 0
        for name in order:
            shape = tuple(spec["shapes"][name])
            n = int(np.prod(shape)) * 4
            m[name] = torch.from_numpy(np.frombuffer(m_raw[offset:offset + n], dtype="<f4").reshape(shape).copy())
            v[name] = torch.from_numpy(np.frombuffer(v_raw[offset:offset + n], dtype="<f4").reshape(shape).copy())
            offset += n
        opt_state = OptimizerState(m=m, v=v, step=spec["step"], beta1=spec["beta1"],
                                   beta2=spec["beta2"], eps=spec["eps"],
                                   weight_decay=spec["weight_decay"])
    return Checkpoint(enc2d=enc2d, enc3d=enc3d, opt_state=opt_state,
                      step=meta["step"], stage=meta["stage"],
                      config_hash=meta["config_hash"], seed=meta["seed"])


def _append_log(log_path, rows):
    if log_path is None:
        return
    log_path = Path(log_path)
    new = not log_path.exists()
    with log_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "stage", "lr", "loss"])
        writer.writerows(rows)


# --- training loops ----------------------------------------------------------

def build_encoders(config: TrainerConfig):
    enc2d = ImageEncoder(config.encoder, seed=derive_seed(config.seed, "enc2d"))
    enc3d = PointEncoder(config.encoder, seed=derive_seed(config.seed, "enc3d"))
    return enc2d, enc3d


def _anchor_cloud(sample, config: TrainerConfig, sample_id: str):
    if config.lidar_anchor_corruption is None:
        return sample.points
    kind, severity = config.lidar_anchor_corruption
    return corrupt_lidar(sample.points, kind, int(severity),
                         seed=derive_seed(config.seed, "lidar_anchor", sample_id))


def _run_epochs(stage_name, items, batch_loss, named_params, hyper: StageHyper,
                epochs, seed, frozen, log_path, on_divergence):
    """Shared epoch/batch/schedule/freeze-check loop for all three stages.

    `batch_loss(batch, epoch)` returns the mean per-sample loss of one batch
    as a scalar tensor connected to the trainable parameters.
    """
    if not items:
        raise PrerequisiteError(f"{stage_name}: no usable training samples")
    state = init_optimizer(named_params, weight_decay=hyper.weight_decay)
    steps_per_epoch = math.ceil(len(items) / hyper.batch_size)
    total_steps = epochs * steps_per_epoch
    warmup_steps = int(round(hyper.warmup_fraction * total_steps))
    frozen_hashes = [params_hash(module) for module in frozen]

    trace = []
    global_step = 0
    for epoch in range(epochs):
        order = _shuffled(items, seed, stage_name, epoch)
        for batch in _batches(order, hyper.batch_size):
            rate = cosine_lr(global_step, total_steps, warmup_steps,
                             hyper.peak_lr, hyper.floor_lr)
            loss = batch_loss(batch, epoch)
            if not torch.isfinite(loss):
                on_divergence(state, global_step, trace)
                raise NumericalError(f"{stage_name}: non-finite loss at step {global_step}")
            grads = torch.autograd.grad(loss, [p for _, p in named_params], allow_unused=True)
            grads = {name: g for (name, _), g in zip(named_params, grads) if g is not None}
            optimizer_step(named_params, grads, state, rate)
            trace.append((global_step, stage_name, rate, float(loss.detach())))
            global_step += 1
        for module, expect in zip(frozen, frozen_hashes):
            if params_hash(module) != expect:
                raise NumericalError(f"{stage_name}: frozen parameters changed at epoch {epoch}")
    _append_log(log_path, trace)
    return state, global_step, trace


def _concat_clouds(clouds, neighbor_lists):
    """Stack per-sample clouds into one cloud with offset neighbor indices."""
    sizes = [len(c) for c in clouds]
    points = torch.cat([torch.as_tensor(c, dtype=torch.float32) for c in clouds])
    offsets = np.concatenate([[0], np.cumsum(sizes[:-1])])
    neighbors = torch.cat([nb + int(off) for nb, off in zip(neighbor_lists, offsets)])
    return points, neighbors, sizes


def _load_split(manifest: DatasetManifest, records):
    root = Path(manifest.root)
    return [load_sample(root, r) for r in records]


def train_stage1(config: TrainerConfig, manifest: DatasetManifest,
                 out_dir: Path | None = None, log_path=None) -> Checkpoint:
    """Align 3D features to frozen 2D features on day-clear data."""
    config.validate()
    enc2d, enc3d = build_encoders(config)
    records = filter_stage1_data(manifest, full_data=config.stage1_full_data)
    samples = _load_split(manifest, records)

    items = []
    enc2d.eval()
    with torch.no_grad():
        for sample in samples:
            corr = match_correspondences(sample.points, sample.rig)
            if corr.count == 0:
                continue
            fmap = forward_2d(enc2d, sample.image)
            anchors = fmap[corr.pixel_rows, corr.pixel_cols].clone()
            items.append({
                "sample_id": sample.sample_id,
                "points": sample.points,
                "neighbors": knn_indices(torch.from_numpy(sample.points.astype(np.float32)),
                                         config.encoder.knn_k),
                "point_idx": torch.from_numpy(corr.point_indices),
                "anchors": anchors,
            })

    named = list(enc3d.named_parameters())

    def batch_loss(batch, epoch):
        clouds = []
        for item in batch:
            pts = item["points"]
            if config.augment:
                pts = augment_lidar(pts, derive_seed(config.seed, "aug", epoch, item["sample_id"]))
            clouds.append(pts)
        points, neighbors, sizes = _concat_clouds(clouds, [b["neighbors"] for b in batch])
        feats = enc3d(points, neighbors)
        losses = []
        for item, per_sample in zip(batch, torch.split(feats, sizes)):
            student = per_sample[item["point_idx"]]
            losses.append(stage_loss(Stage.STAGE1, MatchedFeatures(G=item["anchors"], F=student)))
        return torch.stack(losses).mean()

    def on_divergence(state, step, trace):
        if out_dir is not None:
            bad = Checkpoint(enc2d, enc3d, state, step, "stage1_aborted",
                             config.content_hash(), config.seed, trace)
            save_checkpoint(bad, Path(out_dir) / "stage1_aborted")

    state, step, trace = _run_epochs(
        "stage1", items, batch_loss, named, config.stage1, config.stage1.epochs,
        config.seed, frozen=[enc2d], log_path=log_path, on_divergence=on_divergence)

    ckpt = Checkpoint(enc2d, enc3d, state, step, "stage1",
                      config.content_hash(), config.seed, trace)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir)
    return ckpt


def train_stage2(config: TrainerConfig, manifest: DatasetManifest,
                 stage1_ckpt: Checkpoint | None,
                 out_dir: Path | None = None, log_path=None) -> Checkpoint:
    """Train the 2D encoder on all conditions against frozen 3D anchors."""
    config.validate()
    if stage1_ckpt is None:
        if not config.skip_stage1:
            raise PrerequisiteError("stage 2 needs a stage-1 checkpoint unless skip_stage1 is set")
        enc2d, enc3d = build_encoders(config)
    else:
        # Deep copies keep the caller's stage-1 checkpoint usable as the
        # untouched baseline for paired comparisons.
        enc2d = copy.deepcopy(stage1_ckpt.enc2d)
        enc3d = copy.deepcopy(stage1_ckpt.enc3d)

    samples = _load_split(manifest, manifest.records("train"))
    items = []
    enc3d.eval()
    with torch.no_grad():
        for sample in samples:
            anchor_pts = _anchor_cloud(sample, config, sample.sample_id)
            corr = match_correspondences(anchor_pts, sample.rig)
            if corr.count == 0:
                continue
            feats = forward_3d(enc3d, anchor_pts)
            items.append({
                "sample_id": sample.sample_id,
                "image": sample.image,
                "rows": torch.from_numpy(corr.pixel_rows),
                "cols": torch.from_numpy(corr.pixel_cols),
                "anchors": feats[torch.from_numpy(corr.point_indices)].clone(),
            })

    named = list(enc2d.named_parameters())

    def batch_loss(batch, epoch):
        images = torch.from_numpy(np.stack([item["image"] for item in batch]))
        fmaps = enc2d(images)
        losses = []
        for i, item in enumerate(batch):
            student = fmaps[i][item["rows"], item["cols"]]
            losses.append(stage_loss(Stage.STAGE2, MatchedFeatures(G=student, F=item["anchors"])))
        return torch.stack(losses).mean()

    def on_divergence(state, step, trace):
        if out_dir is not None:
            bad = Checkpoint(enc2d, enc3d, state, step, "stage2_aborted",
                             config.content_hash(), config.seed, trace)
            save_checkpoint(bad, Path(out_dir) / "stage2_aborted")

    state, step, trace = _run_epochs(
        "stage2", items, batch_loss, named, config.stage2, config.stage2.epochs,
        config.seed, frozen=[enc3d], log_path=log_path, on_divergence=on_divergence)

    ckpt = Checkpoint(enc2d, enc3d, state, step, "stage2",
                      config.content_hash(), config.seed, trace)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir)
    return ckpt


def train_joint(config: TrainerConfig, manifest: DatasetManifest,
                out_dir: Path | None = None, log_path=None) -> Checkpoint:
    """One-stage baseline: both encoders trainable, no stop-gradient."""
    config.validate()
    if not config.joint_one_stage:
        raise ConfigError("train_joint requires the joint_one_stage flag")
    enc2d, enc3d = build_encoders(config)

    samples = _load_split(manifest, manifest.records("train"))
    items = []
    for sample in samples:
        corr = match_correspondences(sample.points, sample.rig)
        if corr.count == 0:
            continue
        items.append({
            "sample_id": sample.sample_id,
            "image": sample.image,
            "points": torch.from_numpy(sample.points.astype(np.float32)),
            "neighbors": knn_indices(torch.from_numpy(sample.points.astype(np.float32)),
                                     config.encoder.knn_k),
            "rows": torch.from_numpy(corr.pixel_rows),
            "cols": torch.from_numpy(corr.pixel_cols),
            "point_idx": torch.from_numpy(corr.point_indices),
        })

    named = list(enc2d.named_parameters()) + [
        (f"3d.{n}", p) for n, p in enc3d.named_parameters()
    ]

    def batch_loss(batch, epoch):
        images = torch.from_numpy(np.stack([item["image"] for item in batch]))
        fmaps = enc2d(images)
        points, neighbors, sizes = _concat_clouds(
            [item["points"] for item in batch], [item["neighbors"] for item in batch])
        feats = enc3d(points, neighbors)
        losses = []
        for i, (item, per_sample) in enumerate(zip(batch, torch.split(feats, sizes))):
            g = fmaps[i][item["rows"], item["cols"]]
            f = per_sample[item["point_idx"]]
            losses.append(joint_loss(MatchedFeatures(G=g, F=f)))
        return torch.stack(losses).mean()

    def on_divergence(state, step, trace):
        if out_dir is not None:
            bad = Checkpoint(enc2d, enc3d, state, step, "joint_aborted",
                             config.content_hash(), config.seed, trace)
            save_checkpoint(bad, Path(out_dir) / "joint_aborted")

    state, step, trace = _run_epochs(
        "joint", items, batch_loss, named, config.stage1, config.joint_epochs,
        config.seed, frozen=[], log_path=log_path, on_divergence=on_divergence)

    ckpt = Checkpoint(enc2d, enc3d, state, step, "joint",
                      config.content_hash(), config.seed, trace)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir)
    return ckpt
