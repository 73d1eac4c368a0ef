"""Open-set metrics (OS, OS*, UNK, H-score), target evaluation and galleries."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .data import DomainDataset
from .errors import EvaluationError
from .model import VddModel
from .protocol import GmdaTask
from .training import known_confidence


def confusion_matrix(preds: Sequence[int], truths: Sequence[int], num_known: int) -> np.ndarray:
    """(C+1) x (C+1) counts, rows = truth, columns = prediction."""
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise EvaluationError(f"length mismatch: {preds.shape} vs {truths.shape}")
    k = num_known + 1
    for name, arr in (("prediction", preds), ("truth", truths)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise EvaluationError(f"{name} outside [0, {num_known}]")
    return np.bincount(truths * k + preds, minlength=k * k).reshape(k, k)


def per_class_accuracy(confusion: np.ndarray) -> np.ndarray:
    """Row-normalised diagonal; NaN for classes with no test samples."""
    confusion = np.asarray(confusion)
    rows = confusion.sum(1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(confusion) / rows, np.nan)


def os_scores(confusion: np.ndarray, present: Sequence[int] | None = None) -> tuple[float, float, float]:
    """(OS, OS*, UNK) as mean per-class recall.

    Classes absent from the test set are left out of the averages. When
    ``present`` is given, every listed class must have test samples.
    """
    confusion = np.asarray(confusion)
    rows = confusion.sum(1)
    if present is not None:
        empty = [c for c in present if rows[c] == 0]
        if empty:
            raise EvaluationError(f"classes {empty} declared present but have no test samples")
    acc = per_class_accuracy(confusion)
    c = len(acc) - 1

    def _mean(a):
        a = a[~np.isnan(a)]
        return float(a.mean()) if a.size else math.nan

    return _mean(acc), _mean(acc[:c]), float(acc[c])


def h_score(os_star: float, unk: float) -> float:
    """Harmonic mean of known-class and unknown-class accuracy."""
    if math.isnan(os_star) or math.isnan(unk):
        return math.nan
    if os_star + unk == 0:
        return 0.0
    return 2.0 * os_star * unk / (os_star + unk)


@dataclass
class EvalReport:
    per_class_acc: np.ndarray
    os: float
    os_star: float
    unk: float
    h_score: float
    confusion: np.ndarray
    n_samples: int

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "EvalReport":
        os_, os_star, unk = os_scores(confusion)
        return cls(per_class_accuracy(confusion), os_, os_star, unk, h_score(os_star, unk),
                   np.asarray(confusion), int(np.asarray(confusion).sum()))

    def to_dict(self) -> dict:
        def _f(x):
            return None if math.isnan(x) else float(x)

        return {
            "os": _f(self.os), "os_star": _f(self.os_star), "unk": _f(self.unk),
            "h_score": _f(self.h_score), "n_samples": self.n_samples,
            "per_class_acc": [_f(a) for a in self.per_class_acc],
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        def _f(x):
            return math.nan if x is None else float(x)

        return cls(np.array([_f(a) for a in d["per_class_acc"]]), _f(d["os"]), _f(d["os_star"]),
                   _f(d["unk"]), _f(d["h_score"]), np.array(d["confusion"], dtype=np.int64), d["n_samples"])

    def save(self, path: str | Path, **extra) -> None:
        Path(path).write_text(json.dumps({**extra, **self.to_dict()}, indent=2))


def predict_open_set(probs: torch.Tensor, delta_unk: float = 0.3) -> torch.Tensor:
    """Argmax over known classes, or unknown when the best known probability < delta_unk."""
    conf, arg = known_confidence(probs)
    unknown = probs.shape[-1] - 1
    return torch.where(conf < delta_unk, torch.full_like(arg, unknown), arg)


@torch.no_grad()
def predict(model: VddModel, images: np.ndarray, delta_unk: float = 0.3, batch_size: int = 256) -> np.ndarray:
    model.eval()
    device = next(model.parameters()).device
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch_size])).to(device)
        z = model.encode_sample(x, sample=False)
        out.append(predict_open_set(model.classify(z.mean), delta_unk).cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: VddModel, target_test: DomainDataset, task: GmdaTask, delta_unk: float = 0.3) -> EvalReport:
    if target_test.hidden_labels is None:
        raise EvaluationError("target test split carries no hidden labels")
    preds = predict(model, target_test.images, delta_unk)
    return EvalReport.from_confusion(confusion_matrix(preds, target_test.hidden_labels, task.num_known))


# ---------------------------------------------------------------------------
# reconstruction gallery


def _to_tiles(t: torch.Tensor) -> np.ndarray:
    return (t.clamp(0, 1).cpu().numpy().transpose(0, 2, 3, 1) * 255).round().astype(np.uint8)


@torch.no_grad()
def reconstruction_triplets(model: VddModel, samples: np.ndarray, domains: Sequence[int],
                            fake_domains: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x, x_hat, x_hat') with deterministic (mean) latents."""
    model.eval()
    device = next(model.parameters()).device
    x = torch.from_numpy(np.ascontiguousarray(samples)).to(device)
    z_s = model.encode_sample(x, sample=False).mean
    z_d = model.encode_domain(torch.as_tensor(list(domains)), sample=False).mean
    z_f = model.encode_domain(torch.as_tensor(list(fake_domains)), sample=False).mean
    return x.cpu().numpy(), model.decode(z_s, z_d).cpu().numpy(), model.decode(z_s, z_f).cpu().numpy()


def reconstruction_gallery(model: VddModel, samples: np.ndarray, domains: Sequence[int],
                           fake_domains: Sequence[int], out_path: str | Path, pad: int = 2) -> Path:
    """One row per sample: original, reconstruction, fake-domain reconstruction."""
    x, x_hat, x_fake = reconstruction_triplets(model, samples, domains, fake_domains)
    tiles = [_to_tiles(torch.from_numpy(a)) for a in (x, x_hat, x_fake)]
    b, h, w = len(x), x.shape[2], x.shape[3]
    grid = np.full((b * (h + pad) + pad, 3 * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i in range(b):
        for j in range(3):
            r, c = pad + i * (h + pad), pad + j * (w + pad)
            grid[r:r + h, c:c + w] = tiles[j][i]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(out_path)
    return out_path
