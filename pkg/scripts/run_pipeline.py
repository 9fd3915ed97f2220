#!/usr/bin/env python3
"""End-to-end pipeline demo: corpus -> training -> sampling -> metrics.

Runs the CLI with desk-scale settings into a work directory. Use --quick
for a smoke-scale pass (seconds) or the defaults for the full run that the
acceptance suite mirrors (tens of minutes on one core complex).
"""

import argparse
import os
import sys

from roomdiff.cli import main as roomdiff_main


def run(args):
    rc = roomdiff_main(args)
    if rc != 0:
        sys.exit(rc)


def pipeline(work: str, quick: bool, seed: int):
    common = ["--num-slots", "8", "--max-objects", "8", "--seed", str(seed)]
    if quick:
        common += ["--scene-count", "32", "--train-steps", "200",
                   "--width", "32", "--depth", "2", "--heads", "2",
                   "--timesteps", "100", "--codec-epochs", "80",
                   "--checkpoint-interval", "200"]
        n_samples = "32"
    else:
        common += ["--width", "192", "--depth", "4", "--heads", "8",
                   "--size-scale", "1.2", "--lr-init", "3e-4",
                   "--lr-decay-interval", "4000"]
        n_samples = "256"
    corpus = os.path.join(work, "corpus")
    train = os.path.join(work, "run")
    samples = os.path.join(work, "samples")
    metrics = os.path.join(work, "metrics")
    run(["gen-data", "--out", corpus] + common)
    run(["train", "--data", corpus, "--out", train, "--audit"] + common)
    run(["sample", "--model", os.path.join(train, "model.ckpt"),
         "--n", n_samples, "--out", samples, "--render"] + common)
    run(["eval", "--gen", samples, "--ref", corpus, "--out", metrics]
        + common)
    print(f"pipeline complete; metrics in {metrics}/metrics.txt")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="pipeline_out")
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ns = ap.parse_args()
    pipeline(ns.work, ns.quick, ns.seed)
