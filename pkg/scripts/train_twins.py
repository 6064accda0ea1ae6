"""Train (or fetch from the cache) the two host networks used by the experiments."""

import argparse
import logging

from stitchlab import nnet
from stitchlab.harness import get_twins, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    args, overrides = ap.parse_known_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(args.config, "Exp1_Match", overrides)
    m1, m2, _, test = get_twins(cfg)
    for seed, m in zip(cfg.model_seeds, (m1, m2)):
        print(f"model seed {seed}: test accuracy {nnet.accuracy(m, test):.4f}")


if __name__ == "__main__":
    main()
