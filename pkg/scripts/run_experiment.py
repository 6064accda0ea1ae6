"""Run one experiment at desk scale and print its summary table.

    python scripts/run_experiment.py exp1
    python scripts/run_experiment.py Exp7_Sparsity --config my.json --stitch.epochs=3
"""

import argparse
import logging

from stitchlab.harness import load_config, run_experiment
from stitchlab.harness.config import resolve_name


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("experiment")
    ap.add_argument("--config", help="JSON file with ExperimentConfig fields")
    args, overrides = ap.parse_known_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(args.config, resolve_name(args.experiment), overrides)
    paths = run_experiment(cfg)
    print(paths["summary"].read_text())
    print("records:", paths["records"])


if __name__ == "__main__":
    main()
