"""Digits benchmark (mm, up, sv, sy -> mt) at the published model size.

Expects ``<root>/<domain>/<split>/<digit>/*.png`` for the five domains named
in the config; the target needs both ``train`` and ``test`` splits. This is an
overnight job on CPU. Writes the run directory and ``summary.json`` with the
last-epoch report.
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from vdd.cli import cmd_eval, cmd_train
from vdd.config import load_config

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "digits_mt.yaml"


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=str(DEFAULT_CONFIG))
    p.add_argument("--root", help="override data.root")
    p.add_argument("--out", help="override the run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--device", default="cpu")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    if args.root:
        cfg = replace(cfg, data=replace(cfg.data, root=args.root))
    if not Path(cfg.data.root).is_dir():
        raise SystemExit(f"digits data not found under {cfg.data.root}")
    cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    run_dir = cmd_train(cfg, args.out, device=args.device)
    summary = cmd_eval(run_dir, "last")
    print(f"H-score {summary['h_score']:.4f}  OS {summary['os']:.4f}  OS* {summary['os_star']:.4f}  "
          f"UNK {summary['unk']:.4f}  (published: H 0.7271, OS 0.8490, OS* 0.8965)")


if __name__ == "__main__":
    main()
