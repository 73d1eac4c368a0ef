import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_MODEL, tiny_setup
from vdd.errors import ConfigError, DataError
from vdd.model import ModelConfig, load_checkpoint
from vdd.training import (
    ABSTAIN,
    METRIC_COLUMNS,
    PseudoLabels,
    TrainConfig,
    alpha_schedule,
    assign_pseudo_labels,
    draw_fake_domains,
    lr_schedule,
    pseudo_loss,
    source_ce,
    target_entropy,
    train,
)


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# pseudo labels


def test_pseudo_label_examples():
    probs = torch.tensor([
        [0.95, 0.02, 0.01, 0.01, 0.01],
        [0.25, 0.25, 0.25, 0.0, 0.25],
        [0.5, 0.2, 0.1, 0.1, 0.1],
    ])
    d = assign_pseudo_labels(probs, 0.9, 0.3)
    assert d.labels.tolist() == [0, 4, ABSTAIN]
    assert d.confidence[0].item() == pytest.approx(0.95)


def test_pseudo_label_confidence_ignores_unknown_column():
    d = assign_pseudo_labels(torch.tensor([[0.05, 0.05, 0.9]]))
    assert d.labels.tolist() == [2]  # max known prob 0.05 < 0.3
    assert d.confidence.item() == pytest.approx(0.05)


def test_pseudo_label_ties_go_to_lowest_index():
    d = assign_pseudo_labels(torch.tensor([[0.1, 0.1, 0.1, 0.7]]), 0.05, 0.01)
    assert d.labels.tolist() == [0]


def test_pseudo_label_rejects_bad_rows():
    with pytest.raises(ValueError):
        assign_pseudo_labels(torch.tensor([[0.5, 0.4, 0.0]]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=7).filter(lambda v: sum(v) > 1e-3))
def test_pseudo_labels_partition(weights):
    p = torch.tensor(weights, dtype=torch.float64)
    p = (p / p.sum())[None]
    d = assign_pseudo_labels(p)
    conf = p[0, :-1].max().item()
    lab = d.labels.item()
    assert (lab == ABSTAIN) == (0.3 <= conf <= 0.9)
    assert (lab == p.shape[1] - 1) == (conf < 0.3)


def test_pseudo_loss_examples():
    one = torch.tensor([[0.95, 0.03, 0.02]])
    d = PseudoLabels(torch.tensor([0]), torch.tensor([0.95]))
    assert pseudo_loss(one, d).item() == pytest.approx(-math.log(0.95))
    assert pseudo_loss(one, d).item() == pytest.approx(0.0513, abs=1e-4)
    hot = torch.tensor([[0.0, 1.0, 0.0]])
    assert pseudo_loss(hot, PseudoLabels(torch.tensor([1]), torch.tensor([1.0]))).item() == 0.0
    none = PseudoLabels(torch.tensor([ABSTAIN]), torch.tensor([0.5]))
    assert pseudo_loss(one, none).item() == 0.0


def test_abstained_rows_contribute_no_gradient():
    logits = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([1, ABSTAIN, 4, ABSTAIN])
    d = PseudoLabels(labels, torch.zeros(4))
    pseudo_loss(logits.softmax(1), d).backward()
    full = logits.grad.clone()
    assert torch.all(full[[1, 3]] == 0)
    kept = logits.detach()[[0, 2]].clone().requires_grad_()
    pseudo_loss(kept.softmax(1), PseudoLabels(labels[[0, 2]], torch.zeros(2))).backward()
    assert torch.allclose(full[[0, 2]], kept.grad)


def test_entropy_examples():
    assert target_entropy(torch.eye(6)).item() == 0.0
    assert target_entropy(torch.full((3, 6), 1 / 6)).item() == pytest.approx(math.log(6))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8).filter(lambda v: sum(v) > 1e-3))
def test_entropy_bounded(weights):
    p = torch.tensor(weights, dtype=torch.float64)
    p = (p / p.sum())[None]
    assert -1e-12 <= target_entropy(p).item() <= math.log(p.shape[1]) + 1e-9


def test_source_ce_examples():
    assert source_ce(torch.tensor([[0.0, 1.0, 0.0]]), torch.tensor([1])).item() == 0.0
    assert source_ce(torch.full((2, 6), 1 / 6), torch.tensor([0, 3])).item() == pytest.approx(math.log(6))
    lo = source_ce(torch.tensor([[0.3, 0.5, 0.2]]), torch.tensor([0]))
    hi = source_ce(torch.tensor([[0.6, 0.2, 0.2]]), torch.tensor([0]))
    assert hi < lo
    with pytest.raises(ValueError):
        source_ce(torch.full((1, 3), 1 / 3), torch.tensor([2]))


# schedules


def test_alpha_schedule():
    assert alpha_schedule(0, 50) == 0.0
    assert alpha_schedule(50, 50) == 0.5
    assert alpha_schedule(25, 50) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        alpha_schedule(1, 0)
    with pytest.raises(ValueError):
        alpha_schedule(51, 50)


def test_lr_schedule():
    assert lr_schedule(0.0, 2e-4) == 2e-4
    assert lr_schedule(1.0, 2e-4) == pytest.approx(3.31e-5, rel=1e-3)
    ps = np.linspace(0, 1, 21)
    vals = [lr_schedule(p, 2e-4) for p in ps]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_schedule(1.5, 2e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_fake_domain_differs_from_source_domain(num_sources, seed):
    rng = np.random.default_rng(seed)
    true = rng.integers(0, num_sources + 1, size=64)  # index num_sources is the target
    fake = draw_fake_domains(true, num_sources, rng)
    src = true < num_sources
    assert np.all(fake[src] != true[src])
    assert np.all((fake >= 0) & (fake < num_sources))


def test_fake_domain_uniform_over_others():
    rng = np.random.default_rng(0)
    fake = draw_fake_domains(np.zeros(30000, dtype=int), 4, rng)
    freq = np.bincount(fake, minlength=4) / len(fake)
    assert freq[0] == 0
    assert np.allclose(freq[1:], 1 / 3, atol=0.01)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(delta_unk=0.9, delta_known=0.3)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rte": 1e-3})
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.weight_decay) == (50, 32, 2e-4, 5e-4)
    assert (cfg.beta, cfg.xi, cfg.lam, cfg.gamma, cfg.delta_known, cfg.delta_unk) == (6, 1, 2, 1, 0.9, 0.3)


# training loop


def run(tmp_path, name, task, cfg, **kw):
    datasets, pool = tiny_setup(task)
    return train(cfg, task, datasets, pool, tmp_path / name, ModelConfig(**TINY_MODEL), **kw)


def test_train_writes_metrics_and_checkpoints(tmp_path, small_task):
    run_dir = run(tmp_path, "r", small_task, TrainConfig(epochs=2, batch_size=4))
    rows = read_rows(run_dir / "metrics.csv")
    assert list(rows[0]) == list(METRIC_COLUMNS)
    assert len(rows) == 2 * 6
    assert all(math.isfinite(float(r["total"])) for r in rows)
    assert sorted(p.name for p in (run_dir / "checkpoints").iterdir()) == ["epoch_000.pt", "epoch_001.pt"]
    ckpt = load_checkpoint(run_dir / "checkpoints" / "epoch_001.pt")
    assert ckpt["epoch"] == 1 and "optimizer" in ckpt and "rng" in ckpt
    alphas = [float(r["alpha"]) for r in rows]
    lrs = [float(r["lr"]) for r in rows]
    assert alphas == sorted(alphas) and lrs == sorted(lrs, reverse=True)
    assert set(alphas) == {0.0, 0.25}


def test_deterministic_runs_match(tmp_path, small_task):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=3)
    a = run(tmp_path, "a", small_task, cfg, deterministic=True)
    b = run(tmp_path, "b", small_task, cfg, deterministic=True)
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path, small_task):
    full = run(tmp_path, "full", small_task, TrainConfig(epochs=3, batch_size=4))
    run(tmp_path, "part", small_task, TrainConfig(epochs=1, batch_size=4))
    resumed = run(tmp_path, "part", small_task, TrainConfig(epochs=3, batch_size=4))
    assert (full / "metrics.csv").read_bytes() == (resumed / "metrics.csv").read_bytes()


def test_keep_last_checkpoint_only(tmp_path, small_task):
    run_dir = run(tmp_path, "r", small_task, TrainConfig(epochs=2, batch_size=4, keep_checkpoints="last"))
    assert [p.name for p in (run_dir / "checkpoints").iterdir()] == ["epoch_001.pt"]


def test_disabling_exemplar_changes_only_exemplar_column(tmp_path, small_task):
    a = read_rows(run(tmp_path, "a", small_task, TrainConfig(epochs=1, batch_size=4)) / "metrics.csv")
    b = read_rows(run(tmp_path, "b", small_task, TrainConfig(epochs=1, batch_size=4, use_exemplar=False))
                  / "metrics.csv")
    # at step 0 the parameters are identical and alpha is 0, so only the exemplar term differs
    diff = {k for k in METRIC_COLUMNS if a[0][k] != b[0][k]}
    assert diff <= {"exemplar", "n_exemplar"}
    assert float(b[0]["exemplar"]) == 0.0 and float(a[0]["exemplar"]) > 0.0


def test_disabling_disentangle_uses_closed_form(tmp_path, small_task):
    rows = read_rows(run(tmp_path, "r", small_task, TrainConfig(epochs=1, batch_size=4, disentangle=False))
                     / "metrics.csv")
    assert all(float(r["tc_domain"]) == 0.0 and float(r["mi_domain"]) == 0.0 for r in rows)
    assert all(float(r["kl_domain"]) > 0.0 for r in rows)


def test_dataset_count_mismatch(tmp_path, small_task):
    datasets, pool = tiny_setup(small_task)
    with pytest.raises(DataError):
        train(TrainConfig(epochs=1, batch_size=4), small_task, datasets[:-1], pool, tmp_path / "x",
              ModelConfig(**TINY_MODEL))


def test_pseudo_counts_cover_target_batch(tmp_path, small_task):
    rows = read_rows(run(tmp_path, "r", small_task, TrainConfig(epochs=1, batch_size=4)) / "metrics.csv")
    for r in rows:
        assert int(r["n_known"]) + int(r["n_unknown"]) + int(r["n_abstain"]) == 4
