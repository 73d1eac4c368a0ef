"""Training loop with online pseudo labeling, schedules and checkpointing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import DomainDataset, ExemplarPool, epoch_batches, lookup_exemplar, steps_per_epoch
from .errors import ConfigError, DataError, TrainingError
from .losses import (
    EstimatorContext,
    LossBreakdown,
    combine_objective,
    exemplar_loss,
    vae_terms,
)
from .model import ModelConfig, VddModel, load_checkpoint, save_checkpoint
from .protocol import GmdaTask

log = logging.getLogger(__name__)

ABSTAIN = -1
PROB_SUM_TOL = 1e-4


@dataclass
class TrainConfig:
    epochs: int = 50  # 100 for CIFAR-style data
    batch_size: int = 32  # 20 for CIFAR-style data
    learning_rate: float = 2e-4
    weight_decay: float = 5e-4
    beta: float = 6.0
    xi: float = 1.0
    lam: float = 2.0
    gamma: float = 1.0
    delta_known: float = 0.9
    delta_unk: float = 0.3
    seed: int = 0
    # ablation / sweep switches
    use_exemplar: bool = True
    disentangle: bool = True
    use_pseudo: bool = True
    alpha_constant: float | None = None  # overrides the progressive schedule
    keep_checkpoints: str = "all"  # or "last"
    classify_sampled: bool = False  # classifier input: sampled z_s instead of its mean

    def __post_init__(self):
        if not 0.0 <= self.delta_unk < self.delta_known <= 1.0:
            raise ConfigError(f"need 0 <= delta_unk < delta_known <= 1, got {self.delta_unk}, {self.delta_known}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.keep_checkpoints not in ("all", "last"):
            raise ConfigError(f"keep_checkpoints must be 'all' or 'last', got {self.keep_checkpoints!r}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train settings: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# pseudo labels and classification losses


@dataclass
class PseudoLabels:
    labels: torch.Tensor  # class index in 0..C, or ABSTAIN
    confidence: torch.Tensor  # max known-class probability

    @property
    def kept(self) -> torch.Tensor:
        return self.labels != ABSTAIN


def _check_rows(probs: torch.Tensor) -> None:
    sums = probs.detach().sum(-1)
    if probs.numel() and not torch.all((sums - 1).abs() <= PROB_SUM_TOL):
        raise ValueError("probability rows must sum to 1")


def known_confidence(probs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Max and argmax over the C known classes (the last column is unknown).

    ``torch.max`` returns the first maximal index, so ties go to the lowest class.
    """
    conf, arg = probs[..., :-1].max(dim=-1)
    return conf, arg


def assign_pseudo_labels(probs: torch.Tensor, delta_known: float = 0.9,
                         delta_unk: float = 0.3) -> PseudoLabels:
    """Confident rows get their argmax, unconfident rows the unknown class, the rest abstain."""
    _check_rows(probs)
    probs = probs.detach()
    unknown = probs.shape[-1] - 1
    conf, arg = known_confidence(probs)
    labels = torch.full_like(arg, ABSTAIN)
    labels = torch.where(conf > delta_known, arg, labels)
    labels = torch.where(conf < delta_unk, torch.full_like(arg, unknown), labels)
    return PseudoLabels(labels, conf)


def _log(probs):
    return torch.log(probs.clamp_min(torch.finfo(probs.dtype).tiny))


def pseudo_loss(probs: torch.Tensor, decisions: PseudoLabels) -> torch.Tensor:
    kept = decisions.kept
    if not bool(kept.any()):
        return probs.sum() * 0.0
    p = probs[kept]
    return -_log(p.gather(1, decisions.labels[kept][:, None])).mean()


def target_entropy(probs: torch.Tensor) -> torch.Tensor:
    """Mean Shannon entropy (nats) of the rows, with 0 log 0 = 0."""
    return -(probs * _log(probs)).sum(-1).mean()


def source_ce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    unknown = probs.shape[-1] - 1
    if bool((labels >= unknown).any()) or bool((labels < 0).any()):
        raise ValueError("source labels must be known classes in [0, C)")
    return -_log(probs.gather(1, labels[:, None])).mean()


def alpha_schedule(step: int, total: int) -> float:
    """Exemplar weight m / (2M), with m the number of completed epochs."""
    if total <= 0:
        raise ValueError("total must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return step / (2.0 * total)


def lr_schedule(progress: float, lr0: float) -> float:
    """Annealed rate lr0 / (1 + 10 p)^0.75 for training progress p in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress {progress} outside [0, 1]")
    return lr0 / (1.0 + 10.0 * progress) ** 0.75


def draw_fake_domains(true_domains: np.ndarray, num_sources: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform fake source domain d' != d for each sample (any source for target samples)."""
    d = np.asarray(true_domains)
    if num_sources < 2:
        return rng.integers(0, num_sources, size=d.shape)
    is_source = d < num_sources
    # draw from num_sources-1 values and skip over the true domain
    off = rng.integers(0, num_sources - 1, size=d.shape)
    off = off + (is_source & (off >= d))
    anywhere = rng.integers(0, num_sources, size=d.shape)
    return np.where(is_source, off, anywhere)


# ---------------------------------------------------------------------------
# training


METRIC_COLUMNS = (
    ["epoch", "step"]
    + [f.name for f in fields(LossBreakdown)]
    + ["n_known", "n_unknown", "n_abstain", "n_exemplar", "lr", "alpha"]
)


class Trainer:
    """Owns the model, optimizer and RNG streams of one run."""

    def __init__(self, config: TrainConfig, task: GmdaTask, datasets: Sequence[DomainDataset],
                 pool: ExemplarPool | None, run_dir: str | Path, model_config: ModelConfig | None = None,
                 deterministic: bool = False, device: str = "cpu", monitor: DomainDataset | None = None):
        self.cfg = config
        self.monitor = monitor
        self.task = task
        self.datasets = list(datasets)
        self.pool = pool
        self.run_dir = Path(run_dir)
        self.device = torch.device(device)
        if len(self.datasets) != task.num_domains:
            raise DataError(f"expected {task.num_domains} datasets (sources then target), got {len(self.datasets)}")
        for i, ds in enumerate(self.datasets):
            if ds.domain_index != i:
                raise DataError(f"dataset {i} has domain index {ds.domain_index}")
            ds.validate(task)
        if config.use_exemplar and pool is None:
            raise DataError("exemplar loss enabled but no exemplar pool given")
        if deterministic:
            torch.use_deterministic_algorithms(True)

        self.steps_per_epoch = steps_per_epoch(self.datasets, config.batch_size)
        self.ctx = EstimatorContext(
            dataset_size=sum(len(ds) for ds in self.datasets),
            batch_size=config.batch_size * task.num_domains,
        )

        torch.manual_seed(config.seed)
        self.model = VddModel(model_config or ModelConfig(), task.num_domains, task.num_known).to(self.device)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
        )
        self.gen_latent = torch.Generator().manual_seed(config.seed + 1)
        self.gen_fake = torch.Generator().manual_seed(config.seed + 2)
        self.rng_fake = np.random.default_rng([config.seed, 0xFA4E])
        self.start_epoch = 0
        self._exemplar_table()

    # -- exemplar lookup as tensors
    def _exemplar_table(self):
        if self.pool is None:
            return
        keys = sorted(self.pool.exemplars)
        self._ex_keys = {k: i for i, k in enumerate(keys)}
        self._ex_images = torch.from_numpy(np.stack([self.pool.exemplars[k] for k in keys])).to(self.device)

    def _resolve_exemplars(self, fake, classes, true_domains):
        """Resolve (d', c) per row; returns (exemplar images, resolved d', mask)."""
        n = len(fake)
        resolved = fake.copy()
        rows = np.zeros(n, dtype=np.int64)
        mask = np.zeros(n, dtype=bool)
        for i in range(n):
            c = int(classes[i])
            if c < 0 or c >= self.task.num_known:
                continue
            hit = lookup_exemplar(self.pool, int(fake[i]), c, self.rng_fake, int(true_domains[i]))
            if hit is None:
                continue
            resolved[i] = hit[1]
            rows[i] = self._ex_keys[(hit[1], c)]
            mask[i] = True
        return self._ex_images[torch.from_numpy(rows).to(self.device)], resolved, torch.from_numpy(mask).to(self.device)

    # -- one optimisation step
    def train_step(self, batch, alpha: float) -> tuple[LossBreakdown, dict]:
        cfg, task, model = self.cfg, self.task, self.model
        model.train()
        subs = batch.sources + [batch.target]
        x = torch.from_numpy(np.concatenate([s.images for s in subs])).to(self.device)
        domains = np.concatenate([np.full(len(s.images), s.domain) for s in subs])
        n_src = sum(len(s.images) for s in batch.sources)
        y_src = torch.from_numpy(np.concatenate([s.labels for s in batch.sources])).to(self.device)

        z_s = model.encode_sample(x, self.gen_latent)
        z_d = model.encode_domain(torch.from_numpy(domains), self.gen_latent)
        probs = model.classify(z_s.value if cfg.classify_sampled else z_s.mean)
        p_src, p_tgt = probs[:n_src], probs[n_src:]

        l_src = source_ce(p_src, y_src)
        l_ent = target_entropy(p_tgt)
        decisions = assign_pseudo_labels(p_tgt, cfg.delta_known, cfg.delta_unk)
        l_pseudo = pseudo_loss(p_tgt, decisions) if cfg.use_pseudo else probs.new_zeros(())
        if cfg.gamma:
            x_hat = model.decode(z_s.value, z_d.value)
            vt = vae_terms(x, x_hat, z_s, z_d, cfg.beta, cfg.xi, self.ctx, cfg.disentangle)
        else:  # no reconstruction pathway at all (no-adaptation control)
            vt = dict.fromkeys(("recon", "kl_sample", "mi", "tc", "dimkl", "kl_domain", "total"), probs.new_zeros(()))

        # fake domains are drawn every step so ablations keep identical RNG streams
        fake = draw_fake_domains(domains, task.num_sources, self.rng_fake)
        l_exe, n_ex = probs.new_zeros(()), 0
        if cfg.use_exemplar:
            classes = np.concatenate([y_src.cpu().numpy(), decisions.labels.cpu().numpy()])
            v, resolved, mask = self._resolve_exemplars(fake, classes, domains)
            n_ex = int(mask.sum())
            if n_ex:
                z_dp = model.encode_domain(torch.from_numpy(resolved), self.gen_fake)
                x_fake = model.decode(z_s.value, z_dp.value)
                l_exe, _ = exemplar_loss(v, x_fake, z_s, z_dp, cfg.beta, cfg.xi, self.ctx, mask, cfg.disentangle)

        parts = {"source_ce": l_src, "target_entropy": l_ent, "vae": vt["total"],
                 "exemplar": l_exe, "pseudo_ce": l_pseudo}
        total = combine_objective(parts, cfg.lam, cfg.gamma, alpha)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

        lb = LossBreakdown(
            recon=vt["recon"].item(), kl_sample=vt["kl_sample"].item(), mi_domain=vt["mi"].item(),
            tc_domain=vt["tc"].item(), dimkl_domain=vt["dimkl"].item(), kl_domain=vt["kl_domain"].item(),
            vae=vt["total"].item(), exemplar=float(l_exe.item()), source_ce=l_src.item(),
            target_entropy=l_ent.item(), pseudo_ce=float(l_pseudo.item()), total=total.item(),
        )
        labels = decisions.labels
        counts = {
            "n_known": int(((labels >= 0) & (labels < task.num_known)).sum()),
            "n_unknown": int((labels == task.num_known).sum()),
            "n_abstain": int((labels == ABSTAIN).sum()),
            "n_exemplar": n_ex,
        }
        return lb, counts

    def alpha_for(self, epoch: int) -> float:
        if not self.cfg.use_exemplar:
            return 0.0
        if self.cfg.alpha_constant is not None:
            return float(self.cfg.alpha_constant)
        return alpha_schedule(epoch, self.cfg.epochs)

    # -- persistence
    @property
    def ckpt_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / "metrics.csv"

    def _rng_state(self) -> dict:
        return {
            "torch": torch.get_rng_state(),
            "latent": self.gen_latent.get_state(),
            "fake": self.gen_fake.get_state(),
            "numpy_fake": self.rng_fake.bit_generator.state,
        }

    def _save(self, epoch: int) -> None:
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        path = self.ckpt_dir / f"epoch_{epoch:03d}.pt"
        save_checkpoint(path, self.model, self.optimizer, epoch=epoch, rng=self._rng_state(),
                        train_config=self.cfg.to_dict(), task=self.task.to_dict())
        if self.cfg.keep_checkpoints == "last":
            for old in self.ckpt_dir.glob("epoch_*.pt"):
                if old != path:
                    old.unlink()

    def try_resume(self) -> bool:
        ckpts = sorted(self.ckpt_dir.glob("epoch_*.pt")) if self.ckpt_dir.is_dir() else []
        if not ckpts:
            return False
        ckpt = load_checkpoint(ckpts[-1])
        self.model.load_state_dict(ckpt["model"])
        self.optimizer.load_state_dict(ckpt["optimizer"])
        rng = ckpt["rng"]
        torch.set_rng_state(rng["torch"])
        self.gen_latent.set_state(rng["latent"])
        self.gen_fake.set_state(rng["fake"])
        self.rng_fake.bit_generator.state = rng["numpy_fake"]
        self.start_epoch = ckpt["epoch"] + 1
        self._truncate_metrics(ckpt["epoch"])
        log.info("resumed from %s", ckpts[-1])
        return True

    def _truncate_metrics(self, last_epoch: int) -> None:
        if not self.metrics_path.exists():
            return
        with open(self.metrics_path, newline="") as f:
            rows = [r for r in csv.DictReader(f) if int(r["epoch"]) <= last_epoch]
        with open(self.metrics_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            w.writerows(rows)

    def _monitor(self, epoch: int) -> None:
        """Evaluate on a labelled target split and append to monitor.csv (diagnostics only)."""
        from .evaluation import evaluate

        rep = evaluate(self.model, self.monitor, self.task, self.cfg.delta_unk)
        path = self.run_dir / "monitor.csv"
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["epoch", "os", "os_star", "unk", "h_score"])
            w.writerow([epoch, rep.os, rep.os_star, rep.unk, rep.h_score])
        log.info("epoch %d monitor: os=%.3f os*=%.3f unk=%.3f h=%.3f", epoch, rep.os, rep.os_star, rep.unk, rep.h_score)

    # -- main loop
    def fit(self, resume: bool = True) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if not (resume and self.try_resume()):
            self._truncate_metrics(-1)
        new_file = not self.metrics_path.exists()
        with open(self.metrics_path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
            if new_file:
                writer.writeheader()
            for epoch in range(self.start_epoch, self.cfg.epochs):
                lr = lr_schedule(epoch / self.cfg.epochs, self.cfg.learning_rate)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                alpha = self.alpha_for(epoch)
                for batch in epoch_batches(self.datasets, self.cfg.batch_size, self.cfg.seed, epoch):
                    try:
                        lb, counts = self.train_step(batch, alpha)
                    except TrainingError as exc:
                        raise TrainingError(f"epoch {epoch} step {batch.step}: {exc}") from exc
                    if not math.isfinite(lb.total):
                        raise TrainingError(f"epoch {epoch} step {batch.step}: non-finite total loss")
                    writer.writerow({"epoch": epoch, "step": batch.step, **{k: repr(v) for k, v in lb.as_dict().items()},
                                     **counts, "lr": repr(lr), "alpha": repr(alpha)})
                f.flush()
                self._save(epoch)
                if self.monitor is not None:
                    self._monitor(epoch)
                log.info("epoch %d done: total=%.3f src_ce=%.3f", epoch, lb.total, lb.source_ce)
        return self.run_dir


def train(config: TrainConfig, task: GmdaTask, datasets: Sequence[DomainDataset], pool: ExemplarPool | None,
          run_dir: str | Path, model_config: ModelConfig | None = None, deterministic: bool = False,
          device: str = "cpu", resume: bool = True, monitor: DomainDataset | None = None) -> Path:
    """Train a VDD model; returns the run directory holding checkpoints and metrics."""
    return Trainer(config, task, datasets, pool, run_dir, model_config, deterministic, device,
                   monitor).fit(resume)
