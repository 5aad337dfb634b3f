#!/usr/bin/env python3
"""Run the full pipeline from the canonical config.

generate -> train stage 1 -> train stage 2 -> seg/depth probes -> diagnostics,
everything under one output root (default: runs/). Equivalent to chaining the
`pixpoint` subcommands by hand; the acceptance suite drives the same steps.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from pixpoint.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def run(argv):
    print("$ pixpoint " + " ".join(argv))
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(ROOT / "configs" / "reproduce_all.yaml"))
    parser.add_argument("--out", default="runs")
    parser.add_argument("--with-ablations", action="store_true",
                        help="also run every ablation suite (slow)")
    args = parser.parse_args()

    out = Path(args.out)
    ds = out / "dataset"
    run(["generate", "--config", args.config, "--out", str(ds)])
    run(["train", "--config", args.config, "--stage", "1",
         "--dataset", str(ds), "--out", str(out)])
    run(["train", "--config", args.config, "--stage", "2",
         "--from", str(out / "stage1"), "--dataset", str(ds), "--out", str(out)])
    for task in ("seg", "depth"):
        run(["probe", "--config", args.config, "--task", task,
             "--encoder", str(out / "stage2"), "--dataset", str(ds),
             "--out", str(out), "--run-name", f"probe_{task}"])
    run(["diagnose", "--config", args.config,
         "--encoder", str(out / "stage2"), "--baseline", str(out / "stage1"),
         "--dataset", str(ds), "--out", str(out), "--run-name", "diagnose"])

    if args.with_ablations:
        for suite in ("stage1_data", "no_stage1", "joint", "epochs",
                      "corruption", "lidar_corruption"):
            run(["ablate", "--config", args.config, "--suite", suite,
                 "--dataset", str(ds), "--out", str(out),
                 "--run-name", f"ablate_{suite}"])


if __name__ == "__main__":
    main()
