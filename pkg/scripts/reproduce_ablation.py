"""Run the recognition variants on the toy dataset and print an accuracy table.

    python scripts/reproduce_ablation.py --out runs/ablation --seeds 0 1 2

Each (variant, seed) run lands in its own directory and is skipped when a
finished result for the same config already exists, so the script can be
interrupted and restarted.
"""

import argparse
import json
import logging
from pathlib import Path

import torch

from fesr.datamodel import ExperimentConfig
from fesr.experiments import DESK_CONFIG, run_variant, summary_table, toy_manifest

RECOGNITION_VARIANTS = ["BASELINE", "FESR_SL", "FESR_OneSt", "FESR_JL-IL", "FESR_JL-RDBP",
                        "FESR_Real", "FESR_JL"]


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--config", help="base config JSON (default: the desk config)")
    p.add_argument("--variants", nargs="*", default=RECOGNITION_VARIANTS)
    p.add_argument("--seeds", nargs="*", type=int, default=[0, 1, 2])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    base = DESK_CONFIG if args.config is None else ExperimentConfig.load(args.config)
    out = Path(args.out)
    manifest = toy_manifest(out / "data")
    results = []
    for variant in args.variants:
        for seed in args.seeds:
            r = run_variant(variant, seed, manifest, out / f"{variant}_s{seed}", base)
            logging.info("%s seed %d: accuracy %.4f (%.0f s)", variant, seed, r.accuracy, r.seconds)
            results.append(r)
    table = summary_table(results)
    print(table)
    (out / "summary.txt").write_text(table + "\n")
    (out / "summary.json").write_text(json.dumps(
        [{"variant": r.variant, "seed": r.seed, "accuracy": r.accuracy} for r in results], indent=2) + "\n")


if __name__ == "__main__":
    main()
