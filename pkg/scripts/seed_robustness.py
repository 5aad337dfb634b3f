#!/usr/bin/env python3
"""Directional-criteria robustness across seeds on the canonical config.

The acceptance gate pins the default seed; this script reruns the
direction-sensitive measurements (stage-1 alignment ratio, centroid shift,
with/without stage 1, night and gaussian robustness, joint collapse) at other
seeds to show they are not seed luck. Validation aid, not part of the gate.
"""

import argparse
import dataclasses
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from pixpoint.config import load_config
from pixpoint.dataset import build_dataset
from pixpoint.evalsuite import (collapse_metric, evaluate_depth,
                                feature_shift_stats, matched_feature_distance,
                                probe_depth, probe_segmentation)
from pixpoint.training import (build_encoders, train_joint, train_stage1,
                               train_stage2)

ROOT = Path(__file__).resolve().parents[1]


def check(seed: int, config_path: Path):
    t0 = time.time()
    base_cfg = load_config(config_path)
    dataset_cfg = dataclasses.replace(base_cfg.dataset, seed=seed)
    trainer_cfg = dataclasses.replace(base_cfg.trainer, seed=seed)
    probe_cfg = dataclasses.replace(base_cfg.probe, seed=seed)

    tmp = Path(tempfile.mkdtemp(prefix=f"seedcheck{seed}_"))
    manifest = build_dataset(dataset_cfg, tmp / "dataset")

    enc2d0, enc3d0 = build_encoders(trainer_cfg)
    d0 = matched_feature_distance(enc2d0, enc3d0, manifest)
    stage1 = train_stage1(trainer_cfg, manifest)
    d1 = matched_feature_distance(stage1.enc2d, stage1.enc3d, manifest)

    stage2 = train_stage2(trainer_cfg, manifest, stage1)
    skip = train_stage2(dataclasses.replace(trainer_cfg, skip_stage1=True), manifest, None)
    joint = train_joint(dataclasses.replace(trainer_cfg, joint_one_stage=True), manifest)

    shift = feature_shift_stats(stage2.enc2d, manifest, baseline=stage1.enc2d)
    n_classes = base_cfg.num_classes

    _, seg_cd = probe_segmentation(stage2.enc2d, manifest, probe_cfg, num_classes=n_classes)
    _, seg_skip = probe_segmentation(skip.enc2d, manifest, probe_cfg, num_classes=n_classes)
    _, seg_base = probe_segmentation(enc2d0, manifest, probe_cfg, num_classes=n_classes)
    head_cd, _ = probe_depth(stage2.enc2d, manifest, probe_cfg)
    head_base, _ = probe_depth(enc2d0, manifest, probe_cfg)
    g_cd = evaluate_depth(stage2.enc2d, head_cd, manifest, corruption=("gaussian", 3))
    g_base = evaluate_depth(enc2d0, head_base, manifest, corruption=("gaussian", 3))

    c_joint = collapse_metric(joint.enc2d, manifest)
    c_cd = collapse_metric(stage2.enc2d, manifest)

    night_key = "day_clear|night"
    results = {
        "A3 ratio <= 0.5": (d1 / d0, d1 / d0 <= 0.5),
        "A4 shift decrease": (shift.relative_change[night_key],
                              shift.relative_change[night_key] < 0),
        "A5 cd > skip": (seg_cd.values["full"] - seg_skip.values["full"],
                         seg_cd.values["full"] > seg_skip.values["full"]),
        "A6 night >=": (seg_cd.values["night"] - seg_base.values["night"],
                        seg_cd.values["night"] >= seg_base.values["night"]),
        "A6 gauss depth <=": (g_cd.values["full"] - g_base.values["full"],
                              g_cd.values["full"] <= g_base.values["full"]),
        "A7 ratio < 0.25": (c_joint / c_cd, c_joint / c_cd < 0.25),
    }
    print(f"seed {seed} ({time.time()-t0:.0f}s):")
    for name, (value, ok) in results.items():
        print(f"  {name}: {value:+.4f} {'ok' if ok else 'VIOLATED'}")
    return all(ok for _, ok in results.values())


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2])
    parser.add_argument("--config", default=str(ROOT / "configs" / "reproduce_all.yaml"))
    args = parser.parse_args()
    outcomes = [check(seed, Path(args.config)) for seed in args.seeds]
    print("all seeds ok" if all(outcomes) else "some direction violated")
