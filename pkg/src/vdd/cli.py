"""Command-line entry point: ``vdd {gen-data,train,eval,sweep,gallery}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, load_config, save_config
from .data import (
    DomainDataset,
    StyleSpec,
    build_exemplar_pool,
    export_domain,
    generate_synthetic_domain,
    load_external_domain,
)
from .errors import ConfigError, DataError, EvaluationError, VddError
from .evaluation import EvalReport, evaluate, reconstruction_gallery
from .model import load_checkpoint, model_from_checkpoint
from .protocol import GmdaTask
from .training import draw_fake_domains, train

log = logging.getLogger("vdd")

SWEEP_COLUMNS = ["alpha", "gamma", "os", "os_star", "unk", "h_score"]


# ---------------------------------------------------------------------------
# data plumbing shared by the commands


def _styles(cfg: ExperimentConfig, task: GmdaTask) -> list[StyleSpec]:
    styles = [StyleSpec.from_dict(s) for s in cfg.data.styles]
    if len(styles) < task.num_domains:
        raise ConfigError(f"need {task.num_domains} styles (one per domain), got {len(styles)}")
    return styles


def _synthetic(cfg: ExperimentConfig, task: GmdaTask, domain: int, split: str) -> DomainDataset:
    n = cfg.data.n_per_class if split == "train" else cfg.data.n_test_per_class
    return generate_synthetic_domain(task, domain, _styles(cfg, task)[domain], n,
                                     seed=cfg.data.seed + 1000 * domain, split=split, size=cfg.data.image_size)


def load_domain(cfg: ExperimentConfig, task: GmdaTask, domain: int, split: str) -> DomainDataset:
    if cfg.data.root and Path(cfg.data.root).is_dir():
        return load_external_domain(cfg.data.root, task.domain_names[domain], task, split, cfg.data.image_size)
    if cfg.data.kind == "external":
        raise DataError(f"data root {cfg.data.root} does not exist")
    return _synthetic(cfg, task, domain, split)


def load_train_sets(cfg: ExperimentConfig, task: GmdaTask) -> list[DomainDataset]:
    return [load_domain(cfg, task, i, "train") for i in range(task.num_domains)]


def load_target_test(cfg: ExperimentConfig, task: GmdaTask) -> DomainDataset:
    return load_domain(cfg, task, task.target_index, "test")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, out: str | None = None) -> Path:
    """Write the synthetic domains to the on-disk layout (sources: train; target: train + test)."""
    task = cfg.task.build(cfg.data.seed)  # validates the partition before anything is written
    _styles(cfg, task)  # a short style list fails here, before any write
    root = Path(out or cfg.data.root or Path(cfg.out) / "data")
    sets = [(i, "train") for i in range(task.num_domains)] + [(task.target_index, "test")]
    rendered = [(i, _synthetic(cfg, task, i, split)) for i, split in sets]
    root.mkdir(parents=True, exist_ok=True)
    for i, ds in rendered:
        export_domain(ds, root, task.domain_names[i])
    (root / "task.yaml").write_text(task.dump())
    log.info("wrote %d domains to %s", task.num_domains, root)
    return root


def cmd_train(cfg: ExperimentConfig, out: str | None = None, deterministic: bool = False,
              device: str = "cpu") -> Path:
    run_dir = Path(out or cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    task = cfg.task.build(cfg.data.seed)
    tcfg = cfg.resolved_train()
    snapshot = replace(cfg, out=str(run_dir))
    save_config(snapshot, run_dir / "config.yaml")
    (run_dir / "task.yaml").write_text(task.dump())

    datasets = load_train_sets(cfg, task)
    pool = build_exemplar_pool(datasets[:-1], task, tcfg.seed) if tcfg.use_exemplar else None
    return train(tcfg, task, datasets, pool, run_dir, cfg.model, deterministic=deterministic, device=device)


def _checkpoints(run_dir: Path) -> list[Path]:
    return sorted((run_dir / "checkpoints").glob("epoch_*.pt"))


def cmd_eval(run_dir: str | Path, selector: str = "last") -> dict:
    """Evaluate checkpoints on the target test split.

    ``selector`` is ``last``, ``all`` or ``best:<metric>`` (e.g. ``best:h_score``).
    Reports go to ``<run_dir>/reports/epoch_NNN.json``; the selected one is
    also written to ``<run_dir>/summary.json``.
    """
    run_dir = Path(run_dir)
    ckpts = _checkpoints(run_dir)
    if not ckpts:
        raise EvaluationError(f"no checkpoints in {run_dir / 'checkpoints'}")
    cfg = load_config(run_dir / "config.yaml")
    task = GmdaTask.load((run_dir / "task.yaml").read_text())
    test = load_target_test(cfg, task)

    if selector == "last":
        chosen = ckpts[-1:]
    elif selector == "all" or selector.startswith("best:"):
        chosen = ckpts
    else:
        raise EvaluationError(f"unknown checkpoint selector {selector!r}")
    metric = selector.split(":", 1)[1] if selector.startswith("best:") else None
    if metric is not None and metric not in ("os", "os_star", "unk", "h_score"):
        raise EvaluationError(f"cannot select on metric {metric!r}")

    reports: dict[int, EvalReport] = {}
    (run_dir / "reports").mkdir(exist_ok=True)
    for path in chosen:
        ckpt = load_checkpoint(path)
        rep = evaluate(model_from_checkpoint(ckpt), test, task, cfg.train.delta_unk)
        rep.save(run_dir / "reports" / f"epoch_{ckpt['epoch']:03d}.json", epoch=ckpt["epoch"])
        reports[ckpt["epoch"]] = rep

    if metric is None:
        best_epoch = max(reports)
    else:
        def key(e):
            v = getattr(reports[e], metric)
            return -math.inf if math.isnan(v) else v
        best_epoch = max(reports, key=key)
    summary = {"selector": selector, "epoch": best_epoch, **reports[best_epoch].to_dict()}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _fmt(x: float | None) -> str:
    return "schedule" if x is None else f"{float(x):g}"


def cmd_sweep(cfg: ExperimentConfig, out: str | None = None, deterministic: bool = False,
              device: str = "cpu") -> Path:
    """Train + evaluate each (alpha, gamma) grid point; completed points are skipped on rerun.

    A grid value of ``None`` keeps the base setting (progressive alpha, configured gamma).
    """
    root = Path(out or cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    csv_path = root / "sweep.csv"
    done = set()
    if csv_path.exists():
        with open(csv_path, newline="") as f:
            done = {(r["alpha"], r["gamma"]) for r in csv.DictReader(f)}
    alphas = cfg.sweep.alpha or [None]
    gammas = cfg.sweep.gamma or [None]
    for a in alphas:
        for g in gammas:
            key = (_fmt(a), _fmt(cfg.train.gamma if g is None else g))
            if key in done:
                log.info("skip completed grid point alpha=%s gamma=%s", *key)
                continue
            point = replace(cfg, train=replace(
                cfg.train,
                alpha_constant=cfg.train.alpha_constant if a is None else float(a),
                gamma=cfg.train.gamma if g is None else float(g),
            ))
            run_dir = root / f"alpha_{key[0]}_gamma_{key[1]}"
            cmd_train(point, str(run_dir), deterministic, device)
            s = cmd_eval(run_dir, "last")
            new = not csv_path.exists()
            with open(csv_path, "a", newline="") as f:
                w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
                if new:
                    w.writeheader()
                w.writerow({"alpha": key[0], "gamma": key[1],
                            **{k: s[k] for k in ("os", "os_star", "unk", "h_score")}})
            done.add(key)
    return csv_path


def cmd_gallery(run_dir: str | Path, checkpoint: str = "last", n: int = 8, seed: int = 0) -> Path:
    """Grid of (x, x_hat, x_hat') rows for ``n`` samples from every domain."""
    run_dir = Path(run_dir)
    ckpts = _checkpoints(run_dir)
    if not ckpts:
        raise EvaluationError(f"no checkpoints in {run_dir / 'checkpoints'}")
    path = ckpts[-1] if checkpoint == "last" else run_dir / "checkpoints" / f"epoch_{int(checkpoint):03d}.pt"
    if not path.exists():
        raise EvaluationError(f"missing checkpoint {path}")
    ckpt = load_checkpoint(path)
    cfg = load_config(run_dir / "config.yaml")
    task = GmdaTask.load((run_dir / "task.yaml").read_text())
    rng = np.random.default_rng(seed)
    images, domains = [], []
    for i in range(task.num_domains):
        ds = load_domain(cfg, task, i, "train")
        idx = rng.choice(len(ds), size=min(n, len(ds)), replace=False)
        images.append(ds.images[idx])
        domains += [i] * len(idx)
    domains = np.asarray(domains)
    fake = draw_fake_domains(domains, task.num_sources, rng)
    out = run_dir / "gallery" / f"epoch_{ckpt['epoch']:03d}.png"
    return reconstruction_gallery(model_from_checkpoint(ckpt), np.concatenate(images), domains, fake, out)


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment YAML (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override train.seed (data.seed for gen-data)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    p.add_argument("--disable-exemplar", action="store_true", help="ablation: no exemplar loss")
    p.add_argument("--disable-disentangle", action="store_true",
                   help="ablation: closed-form KL on the domain latent instead of the decomposition")
    p.add_argument("--device", default="cpu")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic domains to disk")
    _common(p)
    p = sub.add_parser("train", help="train a model")
    _common(p)
    p = sub.add_parser("eval", help="evaluate checkpoints of a run")
    p.add_argument("run_dir")
    p.add_argument("--select", default="last", help="last | all | best:<metric>")
    p = sub.add_parser("sweep", help="alpha/gamma sensitivity grid")
    _common(p)
    p = sub.add_parser("gallery", help="reconstruction / fake-domain gallery")
    p.add_argument("run_dir")
    p.add_argument("--checkpoint", default="last")
    p.add_argument("-n", type=int, default=8, help="samples per domain")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        # gen-data renders data, so --seed picks the rendering seed there
        if args.command == "gen-data":
            cfg = replace(cfg, data=replace(cfg.data, seed=args.seed))
        else:
            cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.disable_exemplar or args.disable_disentangle:
        cfg = replace(cfg, flags=replace(
            cfg.flags,
            disable_exemplar=cfg.flags.disable_exemplar or args.disable_exemplar,
            disable_disentangle=cfg.flags.disable_disentangle or args.disable_disentangle,
        ))
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "gen-data":
            print(cmd_gen_data(_config_from_args(args), args.out))
        elif args.command == "train":
            print(cmd_train(_config_from_args(args), args.out, args.deterministic, args.device))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(args.run_dir, args.select), indent=2))
        elif args.command == "sweep":
            print(cmd_sweep(_config_from_args(args), args.out, args.deterministic, args.device))
        elif args.command == "gallery":
            print(cmd_gallery(args.run_dir, args.checkpoint, args.n, args.seed))
    except VddError as exc:
        print(f"vdd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
