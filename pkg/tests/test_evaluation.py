import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import TINY_MODEL
from vdd.data import DomainDataset
from vdd.errors import EvaluationError
from vdd.evaluation import (
    EvalReport,
    confusion_matrix,
    evaluate,
    h_score,
    os_scores,
    predict_open_set,
    reconstruction_gallery,
)
from vdd.model import ModelConfig, VddModel
from vdd.protocol import build_task


def test_confusion_examples():
    t = np.array([0, 1, 2, 2])
    assert np.array_equal(confusion_matrix(t, t, 2), np.diag([1, 1, 2]))
    cm = confusion_matrix(np.full(4, 2), t, 2)
    assert cm[:, 2].sum() == 4 and cm[:, :2].sum() == 0


def test_confusion_matches_hand_count():
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 5, 100), rng.integers(0, 5, 100)
    ref = np.zeros((5, 5), dtype=int)
    for a, b in zip(t, p):
        ref[a, b] += 1
    assert np.array_equal(confusion_matrix(p, t, 4), ref)


def test_confusion_rejects_out_of_range():
    with pytest.raises(EvaluationError):
        confusion_matrix([0, 3], [0, 1], 2)
    with pytest.raises(EvaluationError):
        confusion_matrix([0], [0, 1], 2)


def test_os_scores_examples():
    assert os_scores(np.diag([3, 4, 5])) == (1.0, 1.0, 1.0)
    cm = np.array([[2, 0, 0], [2, 0, 0], [0, 0, 3]])
    os_, os_star, unk = os_scores(cm)
    assert (os_star, unk) == (0.5, 1.0)
    assert os_ == pytest.approx(2 / 3)


def test_os_scores_declared_present_but_empty():
    cm = np.array([[2, 0, 0], [0, 0, 0], [0, 0, 3]])
    with pytest.raises(EvaluationError):
        os_scores(cm, present=[0, 1, 2])
    os_, os_star, unk = os_scores(cm)  # absent class 1 is excluded
    assert (os_, os_star, unk) == (1.0, 1.0, 1.0)


def test_table_row_implied_unknown_accuracy():
    unk = 6 * 0.8490 - 5 * 0.8965
    assert unk == pytest.approx(0.6115, abs=1e-9)
    assert h_score(0.8965, unk) == pytest.approx(0.7271, abs=1e-3)


def test_h_score_examples():
    assert h_score(0.7, 0.7) == pytest.approx(0.7)
    assert h_score(1.0, 0.0) == 0.0
    assert h_score(0.0, 0.0) == 0.0
    assert math.isnan(h_score(math.nan, 1.0))


@settings(max_examples=200)
@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_harmonic_mean_ordering(a, b):
    h = h_score(a, b)
    lo, hi = min(a, b), max(a, b)
    assert h <= 2 * lo / (1 + lo / hi) + 1e-12
    assert h <= math.sqrt(a * b) + 1e-12 <= (a + b) / 2 + 2e-12


@settings(max_examples=100)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_report_os_identity(c, seed):
    rng = np.random.default_rng(seed)
    cm = rng.integers(1, 20, size=(c + 1, c + 1))
    rep = EvalReport.from_confusion(cm)
    assert (c * rep.os_star + rep.unk) / (c + 1) == pytest.approx(rep.os, abs=1e-9)
    assert np.array_equal(rep.confusion.sum(1), cm.sum(1))


def test_report_round_trip(tmp_path):
    cm = np.array([[2, 1, 0], [0, 0, 0], [1, 0, 3]])
    rep = EvalReport.from_confusion(cm)
    rep.save(tmp_path / "r.json", tag="x")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["tag"] == "x" and d["per_class_acc"][1] is None
    back = EvalReport.from_dict(d)
    assert back.os == rep.os and np.array_equal(back.confusion, cm)


def test_open_set_rule_never_abstains():
    probs = torch.tensor([[0.5, 0.3, 0.2], [0.2, 0.1, 0.7], [0.95, 0.05, 0.0]])
    assert predict_open_set(probs, 0.3).tolist() == [0, 2, 0]


def _tiny_model(task, seed):
    torch.manual_seed(seed)
    cfg = ModelConfig(**TINY_MODEL)
    return VddModel(cfg, task.num_domains, task.num_known)


def _test_split(task, per_class, rng, size=8):
    c = task.num_known
    labels = np.repeat(np.arange(c + 1), per_class)
    images = rng.uniform(0, 1, (len(labels), 3, size, size)).astype(np.float32)
    return DomainDataset(task.target_index, images, None, "test", hidden_labels=labels)


def test_untrained_model_is_near_chance():
    task = build_task([{0, 1, 2}, {2, 3, 4}], unknown_classes=[5])
    rng = np.random.default_rng(0)
    test = _test_split(task, 40, rng)
    # chance oracle: a model with no information hits each class 1/(C+1) of the time on average
    scores = [evaluate(_tiny_model(task, s), test, task, delta_unk=0.1).os for s in range(10)]
    assert np.mean(scores) == pytest.approx(1 / 6, abs=0.08)


def test_evaluate_deterministic_and_requires_labels(small_task):
    rng = np.random.default_rng(1)
    test = _test_split(small_task, 5, rng)
    m = _tiny_model(small_task, 0)
    a, b = evaluate(m, test, small_task), evaluate(m, test, small_task)
    assert a.to_dict() == b.to_dict()
    unlabeled = DomainDataset(small_task.target_index, test.images, None, "test")
    with pytest.raises(EvaluationError):
        evaluate(m, unlabeled, small_task)


def test_all_unknown_test_set(small_task):
    imgs = np.zeros((4, 3, 8, 8), dtype=np.float32)
    test = DomainDataset(small_task.target_index, imgs, None, "test",
                         hidden_labels=np.full(4, small_task.unknown_index))
    m = _tiny_model(small_task, 0)
    rep = evaluate(m, test, small_task, delta_unk=1.0)  # every prediction is unknown
    assert rep.unk == 1.0 and math.isnan(rep.os_star) and rep.os == 1.0


def test_gallery_layout(tmp_path, small_task):
    m = _tiny_model(small_task, 0)
    x = np.random.default_rng(0).uniform(0, 1, (5, 3, 8, 8)).astype(np.float32)
    out = reconstruction_gallery(m, x, [0, 1, 2, 0, 1], [1, 0, 0, 1, 0], tmp_path / "g" / "gallery.png", pad=2)
    img = np.asarray(Image.open(out))
    assert img.shape == (5 * 10 + 2, 3 * 10 + 2, 3)
    tiles = [img[2 + i * 10:10 + i * 10, 2 + j * 10:10 + j * 10] for i in range(5) for j in range(3)]
    assert len(tiles) == 15
    assert np.array_equal(tiles[0], (x[0].transpose(1, 2, 0) * 255).round().astype(np.uint8))
