"""Operator surface: dataset generation, staged training, probing, ablation
batteries, and feature diagnostics, all driven by one YAML config.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numerical
failure. Every command announces its output files as a final machine-parseable
line `ARTIFACTS {json}` on stdout, and writes a run_manifest.json with the
config hash, artifact list, and wall-clock timings. Concurrent invocations
must target distinct output roots; a lock file under the root enforces this.
Environment overrides: PIXPOINT_OUT_ROOT (output root), PIXPOINT_THREADS
(torch thread count).
"""

import argparse
import dataclasses
import json
import os
import platform
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .config import ExperimentConfig, load_config
from .dataset import build_dataset, load_manifest
from .errors import ConfigError, DatasetError, NumericalError, PrerequisiteError
from .evalsuite import (collapse_metric, evaluate_depth, evaluate_segmentation,
                        feature_shift_stats, probe_depth, probe_segmentation,
                        render_feature_pca, write_metrics, write_ppm)
from .encoders import forward_2d, params_hash
from .training import (build_encoders, load_checkpoint, train_joint,
                       train_stage1, train_stage2)


class _Lock:
    def __init__(self, root: Path):
        self.path = Path(root) / ".pixpoint.lock"
        self.acquired = False

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PrerequisiteError(
                f"output root is locked by another run: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self.acquired = True
        return self

    def __exit__(self, *exc):
        if self.acquired:
            self.path.unlink(missing_ok=True)


def _announce(paths):
    print("ARTIFACTS " + json.dumps({"outputs": [str(p) for p in paths]}, sort_keys=True))


def _write_run_manifest(out_dir: Path, config: ExperimentConfig, artifacts, started: float):
    manifest = {
        "run_id": out_dir.name,
        "config_hash": config.content_hash(),
        "artifacts": [str(p) for p in artifacts],
        "provenance": f"pixpoint {__version__} / python {platform.python_version()} / {platform.system()}",
        "wall_seconds": round(time.time() - started, 3),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return path


def _resolve_out(args_out, config: ExperimentConfig) -> Path:
    root = os.environ.get("PIXPOINT_OUT_ROOT") or config.output.root
    return Path(args_out) if args_out else Path(root)


def _dataset_dir(args, config) -> Path:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    root = os.environ.get("PIXPOINT_OUT_ROOT") or config.output.root
    return Path(root) / "dataset"


def cmd_generate(args) -> int:
    config = load_config(args.config)
    out_dir = Path(args.out) if args.out else _dataset_dir(args, config)
    started = time.time()
    with _Lock(out_dir):
        manifest = build_dataset(config.dataset, out_dir)
        artifacts = [out_dir / "manifest.json"]
        artifacts.append(_write_run_manifest(out_dir, config, artifacts, started))
    print(f"generated {len(manifest.samples)} samples "
          f"({json.dumps(manifest.counts, sort_keys=True)}) under {out_dir}")
    _announce(artifacts)
    return 0


def _trainer_for(config: ExperimentConfig, overrides: dict | None = None):
    trainer = config.trainer
    if overrides:
        trainer = dataclasses.replace(trainer, **overrides)
    return trainer


def cmd_train(args) -> int:
    config = load_config(args.config)
    out_dir = _resolve_out(args.out, config) / (args.run_name or f"stage{args.stage}")
    dataset_dir = _dataset_dir(args, config)
    manifest = load_manifest(dataset_dir)
    started = time.time()

    with _Lock(out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        if args.stage == "1":
            ckpt = train_stage1(config.trainer, manifest, out_dir, log_path)
        elif args.stage == "2":
            if args.from_ckpt:
                stage1 = load_checkpoint(Path(args.from_ckpt))
            elif config.trainer.skip_stage1:
                stage1 = None
            else:
                raise PrerequisiteError(
                    "stage 2 requires --from <stage1 checkpoint> unless trainer.skip_stage1 is set")
            ckpt = train_stage2(config.trainer, manifest, stage1, out_dir, log_path)
        else:
            trainer = _trainer_for(config, {"joint_one_stage": True})
            ckpt = train_joint(trainer, manifest, out_dir, log_path)
        artifacts = [out_dir / "checkpoint.json", out_dir / "params2d.f32",
                     out_dir / "params3d.f32", log_path]
        artifacts.append(_write_run_manifest(out_dir, config, artifacts, started))
    print(f"trained stage={ckpt.stage} steps={ckpt.step} final_loss="
          f"{ckpt.trace[-1][3]:.6f}" if ckpt.trace else f"trained stage={ckpt.stage}")
    _announce(artifacts)
    return 0


def cmd_probe(args) -> int:
    config = load_config(args.config)
    out_dir = _resolve_out(args.out, config) / (args.run_name or f"probe_{args.task}")
    dataset_dir = _dataset_dir(args, config)
    manifest = load_manifest(dataset_dir)
    ckpt = load_checkpoint(Path(args.encoder))
    started = time.time()

    with _Lock(out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
        encoder = ckpt.enc2d
        hash_before = params_hash(encoder)
        if args.task == "seg":
            _, metrics = probe_segmentation(encoder, manifest, config.probe,
                                            finetune=args.finetune,
                                            num_classes=config.num_classes)
        else:
            _, metrics = probe_depth(encoder, manifest, config.probe,
                                     finetune=args.finetune)
        if not args.finetune and params_hash(encoder) != hash_before:
            raise NumericalError("frozen probe modified the encoder")
        json_path = out_dir / "metrics.json"
        csv_path = out_dir / "metrics.csv"
        write_metrics([metrics], json_path, csv_path, run_id=out_dir.name)
        artifacts = [json_path, csv_path]
        artifacts.append(_write_run_manifest(out_dir, config, artifacts, started))
    values = {k: round(v, 4) for k, v in sorted(metrics.values.items())}
    print(f"{metrics.task} {metrics.metric} per condition: {values}")
    _announce(artifacts)
    return 0


def cmd_diagnose(args) -> int:
    config = load_config(args.config)
    out_dir = _resolve_out(args.out, config) / (args.run_name or "diagnose")
    dataset_dir = _dataset_dir(args, config)
    manifest = load_manifest(dataset_dir)
    ckpt = load_checkpoint(Path(args.encoder))
    baseline = load_checkpoint(Path(args.baseline)) if args.baseline else None
    started = time.time()

    with _Lock(out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
        shift = feature_shift_stats(ckpt.enc2d, manifest,
                                    baseline=baseline.enc2d if baseline else None)
        collapse = collapse_metric(ckpt.enc2d, manifest)
        report = {
            "distances": shift.distances,
            "missing": shift.missing,
            "before": shift.before,
            "relative_change": shift.relative_change,
            "collapse_metric": collapse,
        }
        report_path = out_dir / "diagnostics.json"
        report_path.write_text(json.dumps(report, sort_keys=True, indent=1))
        artifacts = [report_path]

        # One PCA rendering per condition from the val split.
        from .dataset import load_sample
        seen = set()
        for record in manifest.records("val"):
            if record.condition in seen:
                continue
            seen.add(record.condition)
            sample = load_sample(Path(manifest.root), record)
            with torch.no_grad():
                fmap = forward_2d(ckpt.enc2d, sample.image).numpy()
            ppm_path = out_dir / f"pca_{record.condition}.ppm"
            write_ppm(render_feature_pca(fmap), ppm_path)
            artifacts.append(ppm_path)
        artifacts.append(_write_run_manifest(out_dir, config, artifacts, started))
    print(f"centroid distances: {shift.distances} (missing: {shift.missing}); "
          f"collapse metric: {collapse:.6f}")
    _announce(artifacts)
    return 0


# --- ablation suites ---------------------------------------------------------

def _ensure_cd(config: ExperimentConfig, manifest, shared_dir: Path):
    """Stage-1 + stage-2 checkpoints for the suite's CD baseline (cached)."""
    stage1_dir = shared_dir / "cd_stage1"
    stage2_dir = shared_dir / "cd_stage2"
    if (stage1_dir / "checkpoint.json").exists():
        stage1 = load_checkpoint(stage1_dir)
    else:
        stage1 = train_stage1(config.trainer, manifest, stage1_dir)
    if (stage2_dir / "checkpoint.json").exists():
        stage2 = load_checkpoint(stage2_dir)
    else:
        stage2 = train_stage2(config.trainer, manifest, stage1, stage2_dir)
    return stage1, stage2


def _seg_full(config, encoder, manifest):
    _, metrics = probe_segmentation(encoder, manifest, config.probe,
                                    num_classes=config.num_classes)
    return metrics


def _suite_no_stage1(config, manifest, out_dir):
    stage1, stage2 = _ensure_cd(config, manifest, out_dir / "shared")
    skip_trainer = dataclasses.replace(config.trainer, skip_stage1=True)
    skipped = train_stage2(skip_trainer, manifest, None, out_dir / "no_stage1_stage2")
    with_metrics = _seg_full(config, stage2.enc2d, manifest)
    without_metrics = _seg_full(config, skipped.enc2d, manifest)
    rows, deltas = [], {}
    for metric_key in sorted(with_metrics.values):
        name = f"seg_miou_{metric_key}"
        a = with_metrics.values[metric_key]
        b = without_metrics.values[metric_key]
        rows.append({"variant": "with_stage1", "metric": name, "value": a})
        rows.append({"variant": "without_stage1", "metric": name, "value": b})
        deltas[name] = {"delta": a - b, "sign": "+" if a > b else ("-" if a < b else "0")}
    return rows, deltas


def _suite_joint(config, manifest, out_dir):
    _, stage2 = _ensure_cd(config, manifest, out_dir / "shared")
    joint_trainer = dataclasses.replace(config.trainer, joint_one_stage=True)
    joint = train_joint(joint_trainer, manifest, out_dir / "joint")
    cd_collapse = collapse_metric(stage2.enc2d, manifest)
    joint_collapse = collapse_metric(joint.enc2d, manifest)
    rows = [
        {"variant": "two_stage", "metric": "collapse_metric", "value": cd_collapse},
        {"variant": "joint_one_stage", "metric": "collapse_metric", "value": joint_collapse},
    ]
    deltas = {"collapse_metric": {
        "delta": joint_collapse - cd_collapse,
        "sign": "-" if joint_collapse < cd_collapse else "+",
        "ratio": joint_collapse / cd_collapse if cd_collapse > 0 else float("inf"),
    }}
    return rows, deltas


def _suite_epochs(config, manifest, out_dir):
    stage1, _ = _ensure_cd(config, manifest, out_dir / "shared")
    rows, deltas = [], {}
    baseline_value = None
    for epochs in config.ablation.epoch_sweep:
        stage2_cfg = dataclasses.replace(config.trainer.stage2, epochs=int(epochs))
        trainer = dataclasses.replace(config.trainer, stage2=stage2_cfg)
        ckpt = train_stage2(trainer, manifest, stage1, out_dir / f"stage2_e{epochs}")
        metrics = _seg_full(config, ckpt.enc2d, manifest)
        rows.append({"variant": f"epochs_{epochs}", "metric": "seg_miou_full",
                     "value": metrics.values["full"]})
        if baseline_value is None:
            baseline_value = metrics.values["full"]
        else:
            deltas[f"epochs_{epochs}"] = {
                "delta": metrics.values["full"] - baseline_value,
                "sign": "+" if metrics.values["full"] > baseline_value else "-",
            }
    return rows, deltas


def _suite_stage1_data(config, manifest, out_dir):
    stage1_clear, stage2_clear = _ensure_cd(config, manifest, out_dir / "shared")
    full_trainer = dataclasses.replace(config.trainer, stage1_full_data=True)
    stage1_full = train_stage1(full_trainer, manifest, out_dir / "stage1_full")
    stage2_full = train_stage2(full_trainer, manifest, stage1_full, out_dir / "stage2_fullsel")
    clear_metrics = _seg_full(config, stage2_clear.enc2d, manifest)
    full_metrics = _seg_full(config, stage2_full.enc2d, manifest)
    rows, deltas = [], {}
    for key in sorted(clear_metrics.values):
        name = f"seg_miou_{key}"
        a, b = clear_metrics.values[key], full_metrics.values[key]
        rows.append({"variant": "stage1_day_clear", "metric": name, "value": a})
        rows.append({"variant": "stage1_full_data", "metric": name, "value": b})
        deltas[name] = {"delta": a - b, "sign": "+" if a > b else ("-" if a < b else "0")}
    return rows, deltas


def _suite_corruption(config, manifest, out_dir):
    _, stage2 = _ensure_cd(config, manifest, out_dir / "shared")
    baseline2d, _ = build_encoders(config.trainer)
    rows, deltas = [], {}
    heads = {}
    for tag, encoder in (("cd", stage2.enc2d), ("baseline", baseline2d)):
        seg_head, _ = probe_segmentation(encoder, manifest, config.probe,
                                         num_classes=config.num_classes)
        depth_head, _ = probe_depth(encoder, manifest, config.probe)
        heads[tag] = (seg_head, depth_head)
    for kind in config.ablation.corruption_kinds:
        for severity in config.ablation.corruption_severities:
            record = {}
            for tag, encoder in (("cd", stage2.enc2d), ("baseline", baseline2d)):
                seg_head, depth_head = heads[tag]
                seg = evaluate_segmentation(encoder, seg_head, manifest,
                                            corruption=(kind, severity),
                                            num_classes=config.num_classes)
                depth = evaluate_depth(encoder, depth_head, manifest,
                                       corruption=(kind, severity))
                rows.append({"variant": tag, "metric": f"seg_miou_{kind}_s{severity}",
                             "value": seg.values["full"]})
                rows.append({"variant": tag, "metric": f"depth_rmse_{kind}_s{severity}",
                             "value": depth.values["full"]})
                record[tag] = (seg.values["full"], depth.values["full"])
            deltas[f"{kind}_s{severity}"] = {
                "seg_miou_delta": record["cd"][0] - record["baseline"][0],
                "depth_rmse_delta": record["cd"][1] - record["baseline"][1],
                "sign": "+" if record["cd"][0] > record["baseline"][0] else "-",
            }
    return rows, deltas


def _suite_lidar_corruption(config, manifest, out_dir):
    stage1, stage2 = _ensure_cd(config, manifest, out_dir / "shared")
    clean_metrics = _seg_full(config, stage2.enc2d, manifest)
    rows = [{"variant": "clean_anchors", "metric": "seg_miou_full",
             "value": clean_metrics.values["full"]}]
    deltas = {}
    for kind in config.ablation.lidar_kinds:
        for severity in config.ablation.lidar_severities:
            trainer = dataclasses.replace(
                config.trainer, lidar_anchor_corruption=(kind, int(severity)))
            ckpt = train_stage2(trainer, manifest, stage1,
                                out_dir / f"stage2_{kind}_s{severity}")
            metrics = _seg_full(config, ckpt.enc2d, manifest)
            name = f"{kind}_s{severity}"
            rows.append({"variant": name, "metric": "seg_miou_full",
                         "value": metrics.values["full"]})
            deltas[name] = {
                "delta": metrics.values["full"] - clean_metrics.values["full"],
                "sign": "+" if metrics.values["full"] > clean_metrics.values["full"] else "-",
            }
    return rows, deltas


_SUITES = {
    "stage1_data": _suite_stage1_data,
    "no_stage1": _suite_no_stage1,
    "joint": _suite_joint,
    "epochs": _suite_epochs,
    "corruption": _suite_corruption,
    "lidar_corruption": _suite_lidar_corruption,
}


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    out_dir = _resolve_out(args.out, config) / (args.run_name or f"ablate_{args.suite}")
    dataset_dir = _dataset_dir(args, config)
    manifest = load_manifest(dataset_dir)
    started = time.time()

    with _Lock(out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / f"ablation_{args.suite}.json"
        csv_path = out_dir / f"ablation_{args.suite}.csv"
        try:
            rows, deltas = _SUITES[args.suite](config, manifest, out_dir)
        except Exception:
            partial = {"suite": args.suite, "status": "failed",
                       "config_hash": config.content_hash()}
            report_path.write_text(json.dumps(partial, sort_keys=True, indent=1))
            raise
        report = {"suite": args.suite, "status": "ok",
                  "config_hash": config.content_hash(),
                  "rows": rows, "deltas": deltas}
        report_path.write_text(json.dumps(report, sort_keys=True, indent=1))
        with open(csv_path, "w") as fh:
            fh.write("variant,metric,value\n")
            for row in rows:
                fh.write(f"{row['variant']},{row['metric']},{row['value']!r}\n")
        artifacts = [report_path, csv_path]
        artifacts.append(_write_run_manifest(out_dir, config, artifacts, started))
    print(f"suite {args.suite}: {len(rows)} rows, deltas: {json.dumps(deltas, sort_keys=True)}")
    _announce(artifacts)
    return 0


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixpoint",
                                     description="synthetic cross-modal distillation bench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="build the synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="dataset directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", required=True, choices=["1", "2", "joint"])
    p.add_argument("--from", dest="from_ckpt", default=None,
                   help="stage-1 checkpoint directory (stage 2)")
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--run-name", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="train and evaluate a linear probe")
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True, choices=["seg", "depth"])
    p.add_argument("--encoder", required=True, help="checkpoint directory")
    p.add_argument("--finetune", action="store_true")
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--run-name", default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="run a paired ablation suite")
    p.add_argument("--config", required=True)
    p.add_argument("--suite", required=True, choices=sorted(_SUITES))
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--run-name", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="feature-space diagnostics")
    p.add_argument("--config", required=True)
    p.add_argument("--encoder", required=True, help="checkpoint directory")
    p.add_argument("--baseline", default=None, help="pre-stage-2 checkpoint for before/after")
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--run-name", default=None)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("PIXPOINT_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, DatasetError) as exc:
        print(f"numerical/dataset failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
