"""Sensitivity sweep over a constant exemplar weight alpha and the VAE weight
gamma. Grid points already present in sweep.csv are skipped, so an interrupted
sweep can simply be rerun."""

import argparse
import csv
import logging

from vdd.cli import cmd_sweep
from vdd.config import load_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="configs/synthetic_desk.yaml")
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    path = cmd_sweep(load_config(args.config), args.out)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            print(f"alpha={row['alpha']:>8} gamma={row['gamma']:>4}  os={float(row['os']):.4f}  "
                  f"h={float(row['h_score']):.4f}")


if __name__ == "__main__":
    main()
