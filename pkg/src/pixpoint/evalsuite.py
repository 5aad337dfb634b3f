"""Downstream probing, condition-stratified metrics, and feature diagnostics.

Probes train a single linear head on top of a (usually frozen) 2D encoder:
cross-entropy over LiDAR-projected sparse labels for segmentation, MSE over
valid rendered depth for regression. Metrics are reported per condition
(day_clear, day_rain, night) plus `full`, which is always recomputed from the
pooled confusion / squared error over the union, never averaged from subsets.

Diagnostics summarize the feature space with per-sample descriptors
(mean-pooled l2-normalized pixel features): per-condition centroid distances
as the distribution-shift surrogate and cross-sample spread as the collapse
metric. PCA renderings are emitted for human inspection only.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corruption import corrupt_image
from .dataset import DatasetManifest, load_sample
from .distill import distill_loss, l2_normalize
from .encoders import ImageEncoder, PointEncoder, forward_2d, forward_3d
from .errors import ConfigError, NumericalError
from .geometry import match_correspondences
from .seeding import derive_seed, rng_for
from .training import init_optimizer, optimizer_step


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-2            # frozen-probe head learning rate
    finetune_lr: float = 1e-4   # shared head+encoder rate when finetuning
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("probe epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.finetune_lr <= 0:
            raise ConfigError("probe learning rates must be positive")


@dataclass
class ConditionMetrics:
    task: str                    # "segmentation" | "depth"
    metric: str                  # "miou" | "rmse"
    values: dict                 # condition -> float
    counts: dict                 # condition -> sample count


@dataclass
class ShiftReport:
    distances: dict              # "day_clear|night" etc -> centroid distance
    missing: list = field(default_factory=list)
    before: dict | None = None
    relative_change: dict | None = None


def num_label_classes(manifest: DatasetManifest) -> int:
    """Ground class 0 plus the primitive classes present in the data."""
    top = 0
    root = Path(manifest.root)
    for record in manifest.samples:
        sample = load_sample(root, record)
        if len(sample.point_labels):
            top = max(top, int(sample.point_labels.max()))
    return top + 1


def project_labels(sample) -> np.ndarray:
    """Sparse H x W label map from visible points; -1 where unlabeled."""
    intr = sample.rig.intrinsics
    labels = np.full((intr.height, intr.width), -1, dtype=np.int64)
    corr = match_correspondences(sample.points, sample.rig)
    if corr.count:
        labels[corr.pixel_rows, corr.pixel_cols] = sample.point_labels[corr.point_indices]
    return labels


def make_head(in_dim: int, out_dim: int, seed: int) -> nn.Linear:
    head = nn.Linear(in_dim, out_dim)
    with torch.no_grad():
        bound = 1.0 / np.sqrt(in_dim)
        w = rng_for(seed, "head.weight").uniform(-bound, bound, size=(out_dim, in_dim))
        head.weight.copy_(torch.from_numpy(w).to(head.weight.dtype))
        head.bias.zero_()
    return head


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits, dim=-1)
    return -logp[torch.arange(len(targets)), targets].mean()


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    diff = pred - target
    return (diff * diff).mean()


def miou(confusion: np.ndarray):
    """(mean IoU, per-class IoU with NaN for absent classes)."""
    confusion = np.asarray(confusion)
    if np.any(confusion < 0):
        raise ValueError("confusion counts must be nonnegative")
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    if not np.any(present):
        raise NumericalError("mIoU undefined: every class is empty")
    iou = np.full(len(tp), np.nan)
    iou[present] = tp[present] / denom[present]
    return float(iou[present].mean()), iou


def _maybe_corrupt(sample, corruption):
    if corruption is None:
        return sample.image
    kind, severity = corruption
    return corrupt_image(sample.image, kind, int(severity),
                         seed=derive_seed(0, "eval_corruption", sample.sample_id, kind, severity),
                         depth=sample.pixel_depth, depth_valid=sample.depth_valid)


def _feature_stats(items):
    """Per-dimension mean/std of the pooled train features (whitening)."""
    feats = torch.cat([item["features"] for item in items])
    mean = feats.mean(dim=0)
    std = feats.std(dim=0, unbiased=False).clamp_min(1e-6)
    return mean, std


def _fold_whitening(head: nn.Linear, f_mean, f_std, y_mean=0.0, y_std=1.0):
    """Rewrite a head trained on whitened inputs/targets as a plain linear map."""
    with torch.no_grad():
        w = head.weight / f_std
        b = head.bias - (head.weight * (f_mean / f_std)).sum(dim=1)
        head.weight.copy_(w * y_std)
        head.bias.copy_(b * y_std + y_mean)
    return head


def _train_head(encoder: ImageEncoder, items, head: nn.Linear,
                cfg: ProbeConfig, finetune: bool, loss_of):
    """Shared head-training loop; items carry whatever loss_of consumes."""
    if finetune:
        named = list(head.named_parameters()) + [
            ("encoder." + n, p) for n, p in encoder.named_parameters()
        ]
        lr = cfg.finetune_lr
    else:
        named = list(head.named_parameters())
        lr = cfg.lr
    state = init_optimizer(named, weight_decay=0.0)
    indices = list(range(len(items)))
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, "probe_shuffle", epoch).permutation(len(indices))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            losses = [loss_of(items[int(i)]) for i in batch]
            losses = [l for l in losses if l is not None]
            if not losses:
                continue
            loss = torch.stack(losses).mean()
            params = [p for _, p in named]
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            grads = {name: g for (name, _), g in zip(named, grads) if g is not None}
            optimizer_step(named, grads, state, lr)
    return head


def _segmentation_items(encoder, manifest, records):
    root = Path(manifest.root)
    items = []
    for record in records:
        sample = load_sample(root, record)
        labels = project_labels(sample)
        rows, cols = np.nonzero(labels >= 0)
        if len(rows) == 0:
            continue
        item = {
            "targets": torch.from_numpy(labels[rows, cols]),
            "rows": torch.from_numpy(rows),
            "cols": torch.from_numpy(cols),
            "condition": record.condition,
            "sample": sample,
        }
        with torch.no_grad():
            fmap = forward_2d(encoder, sample.image)
            item["features"] = fmap[item["rows"], item["cols"]].clone()
        items.append(item)
    return items


def probe_segmentation(encoder: ImageEncoder, manifest: DatasetManifest,
                       probe_cfg: ProbeConfig = ProbeConfig(),
                       finetune: bool = False, num_classes: int | None = None):
    """Train a linear segmentation head; report per-condition val mIoU."""
    probe_cfg.validate()
    if num_classes is None:
        num_classes = num_label_classes(manifest)
    feat_dim = encoder.cfg.feature_dim
    head = make_head(feat_dim, num_classes, derive_seed(probe_cfg.seed, "seg_head"))

    items = _segmentation_items(encoder, manifest, manifest.records("train"))
    if not items:
        raise NumericalError("no labeled pixels in the training split")
    # Whitened features condition the head; the transform is folded back
    # afterwards so the returned head is a plain linear map on raw features.
    f_mean, f_std = _feature_stats(items)

    def loss_of(item):
        if finetune:
            fmap = forward_2d(encoder, item["sample"].image)
            feats = fmap[item["rows"], item["cols"]]
        else:
            feats = item["features"]
        return cross_entropy(head((feats - f_mean) / f_std), item["targets"])

    _train_head(encoder, items, head, probe_cfg, finetune, loss_of)
    _fold_whitening(head, f_mean, f_std)
    metrics = evaluate_segmentation(encoder, head, manifest, num_classes=num_classes)
    return head, metrics


def evaluate_segmentation(encoder, head, manifest, corruption=None,
                          num_classes: int | None = None, split: str = "val"):
    """Per-condition mIoU on a split; optional eval-time image corruption."""
    if num_classes is None:
        num_classes = head.out_features
    confusions = {}
    counts = {}
    root = Path(manifest.root)
    with torch.no_grad():
        for record in manifest.records(split):
            sample = load_sample(root, record)
            labels = project_labels(sample)
            rows, cols = np.nonzero(labels >= 0)
            if len(rows) == 0:
                continue
            fmap = forward_2d(encoder, _maybe_corrupt(sample, corruption))
            logits = head(fmap[torch.from_numpy(rows), torch.from_numpy(cols)])
            pred = logits.argmax(dim=-1).numpy()
            target = labels[rows, cols]
            conf = np.zeros((num_classes, num_classes), dtype=np.int64)
            np.add.at(conf, (target, pred), 1)
            confusions[record.condition] = confusions.get(
                record.condition, np.zeros_like(conf)) + conf
            counts[record.condition] = counts.get(record.condition, 0) + 1

    values = {}
    total = np.zeros((num_classes, num_classes), dtype=np.int64)
    for condition, conf in confusions.items():
        values[condition], _ = miou(conf)
        total += conf
    values["full"] = miou(total)[0] if confusions else float("nan")
    counts["full"] = sum(counts.values())
    return ConditionMetrics(task="segmentation", metric="miou",
                            values=values, counts=counts)


def _depth_items(encoder, manifest, records):
    root = Path(manifest.root)
    items = []
    skipped = 0
    for record in records:
        sample = load_sample(root, record)
        valid = sample.depth_valid
        if not np.any(valid):
            skipped += 1
            continue
        rows, cols = np.nonzero(valid)
        item = {
            "targets": torch.from_numpy(sample.pixel_depth[rows, cols].astype(np.float32)),
            "rows": torch.from_numpy(rows),
            "cols": torch.from_numpy(cols),
            "condition": record.condition,
            "sample": sample,
        }
        with torch.no_grad():
            fmap = forward_2d(encoder, sample.image)
            item["features"] = fmap[item["rows"], item["cols"]].clone()
        items.append(item)
    if skipped:
        import warnings

        warnings.warn(f"skipped {skipped} samples without valid depth pixels")
    return items


def probe_depth(encoder: ImageEncoder, manifest: DatasetManifest,
                probe_cfg: ProbeConfig = ProbeConfig(), finetune: bool = False):
    """Train a linear depth head with MSE; report per-condition val RMSE."""
    probe_cfg.validate()
    head = make_head(encoder.cfg.feature_dim, 1, derive_seed(probe_cfg.seed, "depth_head"))
    items = _depth_items(encoder, manifest, manifest.records("train"))
    if not items:
        raise NumericalError("no valid depth pixels in the training split")
    f_mean, f_std = _feature_stats(items)
    targets = torch.cat([item["targets"] for item in items])
    y_mean = targets.mean()
    y_std = targets.std(unbiased=False).clamp_min(1e-6)

    def loss_of(item):
        if finetune:
            fmap = forward_2d(encoder, item["sample"].image)
            feats = fmap[item["rows"], item["cols"]]
        else:
            feats = item["features"]
        pred = head((feats - f_mean) / f_std).squeeze(-1)
        return mse(pred, (item["targets"] - y_mean) / y_std)

    _train_head(encoder, items, head, probe_cfg, finetune, loss_of)
    _fold_whitening(head, f_mean, f_std, y_mean=float(y_mean), y_std=float(y_std))
    metrics = evaluate_depth(encoder, head, manifest)
    return head, metrics


def evaluate_depth(encoder, head, manifest, corruption=None, split: str = "val"):
    sq_err = {}
    n_px = {}
    counts = {}
    root = Path(manifest.root)
    with torch.no_grad():
        for record in manifest.records(split):
            sample = load_sample(root, record)
            valid = sample.depth_valid
            if not np.any(valid):
                continue
            rows, cols = np.nonzero(valid)
            fmap = forward_2d(encoder, _maybe_corrupt(sample, corruption))
            pred = head(fmap[torch.from_numpy(rows), torch.from_numpy(cols)]).squeeze(-1).numpy()
            err = float(((pred - sample.pixel_depth[rows, cols]) ** 2).sum())
            sq_err[record.condition] = sq_err.get(record.condition, 0.0) + err
            n_px[record.condition] = n_px.get(record.condition, 0) + len(rows)
            counts[record.condition] = counts.get(record.condition, 0) + 1

    values = {c: math.sqrt(sq_err[c] / n_px[c]) for c in sq_err}
    if sq_err:
        values["full"] = math.sqrt(sum(sq_err.values()) / sum(n_px.values()))
    else:
        values["full"] = float("nan")
    counts["full"] = sum(counts.values())
    return ConditionMetrics(task="depth", metric="rmse", values=values, counts=counts)


# --- feature-space diagnostics ----------------------------------------------

def pooled_descriptor(encoder: ImageEncoder, image) -> np.ndarray:
    """Mean of l2-normalized pixel features; one D-vector per image."""
    with torch.no_grad():
        fmap = forward_2d(encoder, image)
        desc = l2_normalize(fmap).reshape(-1, fmap.shape[-1]).mean(dim=0)
    return desc.numpy().astype(np.float64)


def _descriptors(encoder, manifest, split):
    root = Path(manifest.root)
    descs, conditions = [], []
    for record in manifest.records(split):
        sample = load_sample(root, record)
        descs.append(pooled_descriptor(encoder, sample.image))
        conditions.append(record.condition)
    return np.array(descs), conditions


def centroid_distances(descriptors: np.ndarray, conditions) -> ShiftReport:
    """Distances between the day_clear centroid and each adverse centroid."""
    centroids = {}
    for condition in set(conditions):
        mask = [c == condition for c in conditions]
        centroids[condition] = descriptors[mask].mean(axis=0)
    distances, missing = {}, []
    for adverse in ("night", "day_rain"):
        key = f"day_clear|{adverse}"
        if "day_clear" in centroids and adverse in centroids:
            distances[key] = float(np.linalg.norm(centroids["day_clear"] - centroids[adverse]))
        else:
            missing.append(key)
    return ShiftReport(distances=distances, missing=missing)


def feature_shift_stats(encoder: ImageEncoder, manifest: DatasetManifest,
                        split: str = "val",
                        baseline: ImageEncoder | None = None) -> ShiftReport:
    """Per-condition centroid distances; optional before/after comparison."""
    descs, conditions = _descriptors(encoder, manifest, split)
    report = centroid_distances(descs, conditions)
    if baseline is not None:
        before_descs, _ = _descriptors(baseline, manifest, split)
        before = centroid_distances(before_descs, conditions)
        report.before = before.distances
        report.relative_change = {
            key: (report.distances[key] - before.distances[key]) / before.distances[key]
            for key in report.distances if key in before.distances and before.distances[key] > 0
        }
    return report


def collapse_metric(encoder: ImageEncoder, manifest: DatasetManifest,
                    split: str = "val") -> float:
    """Mean over feature dims of the cross-sample descriptor spread."""
    descs, _ = _descriptors(encoder, manifest, split)
    return float(descs.std(axis=0, ddof=0).mean())


def render_feature_pca(feature_map: np.ndarray) -> np.ndarray:
    """Top-3 principal components of the pixel features as an RGB image."""
    fmap = np.asarray(feature_map, dtype=np.float64)
    h, w, d = fmap.shape
    if d < 3:
        raise ValueError("feature dimension must be >= 3 for PCA rendering")
    x = fmap.reshape(-1, d)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / len(x)
    eigvals, eigvecs = np.linalg.eigh(cov)
    top = eigvecs[:, ::-1][:, :3]
    proj = centered @ top
    out = np.empty((h * w, 3))
    for ch in range(3):
        lo, hi = proj[:, ch].min(), proj[:, ch].max()
        if hi - lo < 1e-12:
            out[:, ch] = 0.5
        else:
            out[:, ch] = (proj[:, ch] - lo) / (hi - lo)
    return out.reshape(h, w, 3)


def write_ppm(image: np.ndarray, path: Path):
    """Binary P6 PPM at 8 bits per channel."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


# --- stage-1 convergence monitor ----------------------------------------------

def matched_feature_distance(enc2d: ImageEncoder, enc3d: PointEncoder,
                             manifest: DatasetManifest, split: str = "val",
                             condition: str | None = "day_clear") -> float:
    """Mean distillation distance with pixel anchors over a manifest subset."""
    root = Path(manifest.root)
    values = []
    with torch.no_grad():
        for record in manifest.records(split):
            if condition is not None and record.condition != condition:
                continue
            sample = load_sample(root, record)
            corr = match_correspondences(sample.points, sample.rig)
            if corr.count == 0:
                continue
            fmap = forward_2d(enc2d, sample.image)
            g = fmap[corr.pixel_rows, corr.pixel_cols]
            f = forward_3d(enc3d, sample.points)[torch.from_numpy(corr.point_indices)]
            values.append(float(distill_loss(g, f)))
    if not values:
        raise NumericalError("no samples with correspondences in the requested subset")
    return float(np.mean(values))


# --- metrics files -------------------------------------------------------------

def write_metrics(metrics_list, json_path: Path, csv_path: Path, run_id: str):
    payload = {"run_id": run_id, "tasks": {}}
    rows = []
    for metrics in metrics_list:
        payload["tasks"][metrics.task] = {
            "metric": metrics.metric,
            "values": {k: metrics.values[k] for k in sorted(metrics.values)},
            "counts": {k: metrics.counts[k] for k in sorted(metrics.counts)},
        }
        for condition in sorted(metrics.values):
            rows.append((run_id, condition, f"{metrics.task}_{metrics.metric}",
                         metrics.values[condition]))
    Path(json_path).write_text(json.dumps(payload, sort_keys=True, indent=1))
    with open(csv_path, "w") as fh:
        fh.write("run_id,condition,metric,value\n")
        for run, condition, metric, value in rows:
            fh.write(f"{run},{condition},{metric},{value!r}\n")
