"""Run every experiment in sequence with the default desk configuration.

Extra ``--dotted.key=value`` arguments are applied to every experiment, e.g.
``python scripts/run_all.py --output_dir=runs_small --train.epochs=10``.
"""

import logging
import sys
import time

from stitchlab.harness import EXPERIMENTS, load_config, run_experiment


def main(overrides):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    for name in EXPERIMENTS:
        t0 = time.perf_counter()
        paths = run_experiment(load_config(None, name, overrides))
        n_err = sum(1 for line in paths["errors"].read_text().splitlines() if line.strip())
        print(f"{name}: {time.perf_counter() - t0:.0f}s, {n_err} failed cells, {paths['dir']}")


if __name__ == "__main__":
    main(sys.argv[1:])
