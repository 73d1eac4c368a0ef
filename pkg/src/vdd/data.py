"""Multi-domain image data: synthetic glyph domains, on-disk ingestion,
per-domain batch streams and the exemplar pool."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import DataError
from .protocol import GmdaTask

IMAGE_SIZE = 32
IMAGE_EXTENSIONS = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm")

# instance ids of test images start here so train/test glyphs never coincide
TEST_INSTANCE_OFFSET = 1_000_000


@dataclass
class DomainDataset:
    """Images of one domain and split.

    ``labels`` are remapped class indices and exist only for sources.
    ``hidden_labels`` carries target ground truth (unknowns = C) for the
    test split and is read only by evaluation. ``raw_labels`` keeps the
    original class ids so a dataset can be exported back to disk.
    """

    domain_index: int
    images: np.ndarray  # (n, 3, H, W) float32 in [0, 1]
    labels: np.ndarray | None = None
    split: str = "train"
    hidden_labels: np.ndarray | None = None
    raw_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"images must be (n, 3, H, W), got {self.images.shape}")
        if self.split not in ("train", "test"):
            raise DataError(f"unknown split {self.split!r}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values outside [0, 1]")
        for name in ("labels", "hidden_labels", "raw_labels"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != len(self.images):
                raise DataError(f"{name} length {len(arr)} != {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    def validate(self, task: GmdaTask) -> None:
        is_source = self.domain_index < task.num_sources
        if (self.labels is not None) != is_source:
            raise DataError(f"domain {self.domain_index}: labels must be present iff it is a source")
        if self.labels is not None:
            owned = set(task.classes_of(self.domain_index))
            bad = set(np.unique(self.labels).tolist()) - owned
            if bad:
                raise DataError(f"domain {self.domain_index} has labels {sorted(bad)} it does not own")


# ---------------------------------------------------------------------------
# synthetic glyph domains


@dataclass(frozen=True)
class StyleSpec:
    """Deterministic rendering style: what makes a domain a domain."""

    background: tuple[float, float, float] = (0.1, 0.1, 0.1)
    stroke: tuple[float, float, float] = (0.9, 0.9, 0.9)
    texture: int = 0  # 0 none, 1 stripes, 2 checker, 3 dots
    texture_amp: float = 0.0
    noise: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "StyleSpec":
        return cls(
            background=tuple(float(v) for v in d.get("background", cls.background)),
            stroke=tuple(float(v) for v in d.get("stroke", cls.stroke)),
            texture=int(d.get("texture", 0)),
            texture_amp=float(d.get("texture_amp", 0.0)),
            noise=float(d.get("noise", 0.0)),
        )


def _segments(shape: int) -> list[tuple[float, float, float, float]]:
    """Unit-scale line segments for glyphs built from strokes."""
    r = 1.0
    if shape == 1:  # square outline
        p = [(-r, -r), (r, -r), (r, r), (-r, r)]
        return [(*p[i], *p[(i + 1) % 4]) for i in range(4)]
    if shape == 2:  # triangle outline
        p = [(0.0, -r), (r * 0.95, r * 0.75), (-r * 0.95, r * 0.75)]
        return [(*p[i], *p[(i + 1) % 3]) for i in range(3)]
    if shape == 3:  # plus
        return [(-r, 0.0, r, 0.0), (0.0, -r, 0.0, r)]
    if shape == 4:  # X
        return [(-r, -r, r, r), (-r, r, r, -r)]
    if shape == 5:  # two horizontal bars
        return [(-r, -0.45, r, -0.45), (-r, 0.45, r, 0.45)]
    if shape == 7:  # diamond outline
        p = [(0.0, -r), (r, 0.0), (0.0, r), (-r, 0.0)]
        return [(*p[i], *p[(i + 1) % 4]) for i in range(4)]
    if shape == 8:  # T
        return [(-r, -r, r, -r), (0.0, -r, 0.0, r)]
    if shape == 9:  # vertical bar with a foot
        return [(0.0, -r, 0.0, r), (0.0, r, r * 0.7, r)]
    raise ValueError(shape)


def _segment_distance(u, v, segs) -> np.ndarray:
    d = np.full(u.shape, np.inf)
    for x0, y0, x1, y1 in segs:
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((u - x0) * dx + (v - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        d = np.minimum(d, np.hypot(u - x0 - t * dx, v - y0 - t * dy))
    return d


NUM_GLYPHS = 10


def render_glyph(raw_class: int, instance: int, seed: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Geometry mask in [0, 1] for one glyph instance.

    Depends only on ``(raw_class, instance, seed)``; styling is applied
    afterwards, so the same instance rendered in two domains shares its
    geometry exactly.
    """
    shape = raw_class % NUM_GLYPHS
    rng = np.random.default_rng([seed, raw_class, instance])
    dx, dy = rng.uniform(-0.09, 0.09, size=2) * size
    scale = rng.uniform(0.28, 0.38) * size
    angle = rng.uniform(-0.35, 0.35)
    thick = rng.uniform(0.10, 0.15) * size

    c = (np.arange(size) + 0.5 - size / 2.0)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    xx, yy = xx - dx, yy - dy
    ca, sa = math.cos(angle), math.sin(angle)
    u = (ca * xx + sa * yy) / scale
    v = (-sa * xx + ca * yy) / scale

    if shape == 0:  # ring
        dist = np.abs(np.hypot(u, v) - 0.85) * scale
    elif shape == 6:  # filled disk
        dist = np.maximum(np.hypot(u, v) - 0.7, 0.0) * scale
    else:
        dist = _segment_distance(u, v, _segments(shape)) * scale
    return np.clip(thick / 2.0 - dist + 0.5, 0.0, 1.0)


def _texture(kind: int, size: int, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:
        return np.zeros((size, size))
    if kind == 1:
        return 0.5 + 0.5 * np.sin((xx + yy) * 0.9 + phase)
    if kind == 2:
        return ((np.floor((xx + phase) / 4) + np.floor(yy / 4)) % 2).astype(np.float64)
    if kind == 3:
        return (np.hypot((xx + phase) % 6 - 3, yy % 6 - 3) < 1.4).astype(np.float64)
    raise ValueError(f"unknown texture id {kind}")


def stylize(mask: np.ndarray, style: StyleSpec, rng: np.random.Generator) -> np.ndarray:
    size = mask.shape[-1]
    bg = np.asarray(style.background, dtype=np.float64)[:, None, None]
    fg = np.asarray(style.stroke, dtype=np.float64)[:, None, None]
    img = bg * (1.0 - mask) + fg * mask
    if style.texture and style.texture_amp:
        tex = _texture(style.texture, size, rng.uniform(0, 6))
        img = img + style.texture_amp * (tex - 0.5) * (1.0 - mask)
    if style.noise:
        img = img + rng.normal(0.0, style.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_domain(
    task: GmdaTask,
    domain_index: int,
    style_spec: StyleSpec,
    n_per_class: int,
    seed: int,
    split: str = "train",
    size: int = IMAGE_SIZE,
) -> DomainDataset:
    """Render ``n_per_class`` images for each class the domain holds.

    The target holds every known class plus, when the task says so, its
    unknown raw classes; their hidden label is ``task.unknown_index``.
    """
    if not 0 <= domain_index < task.num_domains:
        raise DataError(f"domain index {domain_index} not in task (0..{task.num_domains - 1})")
    if n_per_class <= 0:
        raise DataError(f"n_per_class must be positive, got {n_per_class}")

    is_target = domain_index == task.target_index
    raw_classes = [task.to_raw(c) for c in task.classes_of(domain_index)]
    if is_target and task.target_extra_unknown:
        raw_classes += list(task.unknown_raw_classes)

    offset = TEST_INSTANCE_OFFSET if split == "test" else 0
    style_rng = np.random.default_rng([seed, domain_index, offset, 0x5717E])
    images, raw = [], []
    for rc in raw_classes:
        for k in range(n_per_class):
            mask = render_glyph(rc, offset + k, seed, size)
            images.append(stylize(mask[None], style_spec, style_rng))
            raw.append(rc)
    raw = np.asarray(raw, dtype=np.int64)
    mapped = np.asarray([task.to_index(int(r)) for r in raw], dtype=np.int64)
    return DomainDataset(
        domain_index=domain_index,
        images=np.stack(images),
        labels=None if is_target else mapped,
        split=split,
        hidden_labels=mapped if (is_target and split == "test") else None,
        raw_labels=raw,
    )


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<domain_name>/<split>/<raw_class_id>/<image files>


def _load_image(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_external_domain(
    root_path: str | Path,
    domain_name: str,
    task: GmdaTask,
    split: str = "train",
    size: int = IMAGE_SIZE,
) -> DomainDataset:
    """Read one domain/split from the standard directory layout.

    Sources keep only the classes the task assigns them. The target keeps
    known and declared-unknown classes (every non-source class collapses to
    unknown when none are declared); labels are dropped from its train
    split and kept hidden in its test split.
    """
    if domain_name not in task.domain_names:
        raise DataError(f"domain {domain_name!r} is not part of the task {list(task.domain_names)}")
    domain_index = task.domain_names.index(domain_name)
    is_target = domain_index == task.target_index
    split_dir = Path(root_path) / domain_name / split
    if not split_dir.is_dir():
        raise DataError(f"missing data directory: {split_dir}")

    owned = set(task.classes_of(domain_index))
    images, raw = [], []
    for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        try:
            rc = int(class_dir.name)
        except ValueError:
            raise DataError(f"class directory is not a decimal id: {class_dir}") from None
        if is_target:
            if rc not in task.raw_to_index:
                if task.unknown_raw_classes and rc not in task.unknown_raw_classes:
                    raise DataError(f"target class {rc} in {class_dir} is neither known nor declared unknown")
                if not task.target_extra_unknown:
                    continue
        elif rc not in task.raw_to_index or task.raw_to_index[rc] not in owned:
            continue
        files = sorted(f for f in class_dir.iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS)
        for f in files:
            images.append(_load_image(f, size))
            raw.append(rc)
    if not images:
        raise DataError(f"no images found under {split_dir}")

    raw = np.asarray(raw, dtype=np.int64)
    mapped = np.asarray(
        [task.raw_to_index.get(int(r), task.unknown_index) for r in raw], dtype=np.int64
    )
    return DomainDataset(
        domain_index=domain_index,
        images=np.stack(images).astype(np.float32),
        labels=None if is_target else mapped,
        split=split,
        hidden_labels=mapped if (is_target and split == "test") else None,
        raw_labels=raw,
    )


def export_domain(ds: DomainDataset, root: str | Path, domain_name: str) -> None:
    """Write a dataset to the standard layout as 8-bit PNGs."""
    if ds.raw_labels is None:
        raise DataError("dataset has no raw labels to export by class")
    base = Path(root) / domain_name / ds.split
    counters: dict[int, int] = {}
    for img, rc in zip(ds.images, ds.raw_labels.tolist()):
        k = counters.get(rc, 0)
        counters[rc] = k + 1
        d = base / str(rc)
        d.mkdir(parents=True, exist_ok=True)
        arr = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(d / f"{k:06d}.png")


# ---------------------------------------------------------------------------
# batches


@dataclass
class SubBatch:
    images: np.ndarray
    labels: np.ndarray | None
    domain: int
    indices: np.ndarray  # positions in the owning dataset


@dataclass
class TrainBatch:
    epoch: int
    step: int
    sources: list[SubBatch]
    target: SubBatch


def steps_per_epoch(datasets: Sequence[DomainDataset], batch_size: int) -> int:
    smallest = min(len(ds) for ds in datasets)
    if batch_size > smallest:
        raise DataError(f"batch size {batch_size} exceeds the smallest domain ({smallest} samples)")
    return smallest // batch_size


def epoch_batches(
    datasets: Sequence[DomainDataset], batch_size: int, seed: int, epoch: int
) -> Iterator[TrainBatch]:
    """One epoch: each domain independently shuffled, one sub-batch per domain per step.

    The permutation depends only on ``(seed, epoch)`` so a resumed run
    replays exactly the batches it would have seen.
    """
    n_steps = steps_per_epoch(datasets, batch_size)
    rng = np.random.default_rng([seed, epoch, 0xBA7C])
    perms = [rng.permutation(len(ds)) for ds in datasets]
    for step in range(n_steps):
        subs = []
        for ds, perm in zip(datasets, perms):
            idx = np.sort(perm[step * batch_size:(step + 1) * batch_size])
            subs.append(
                SubBatch(
                    images=ds.images[idx],
                    labels=None if ds.labels is None else ds.labels[idx],
                    domain=ds.domain_index,
                    indices=idx,
                )
            )
        yield TrainBatch(epoch=epoch, step=step, sources=subs[:-1], target=subs[-1])


def make_batches(
    datasets: Sequence[DomainDataset], batch_size: int, seed: int, start_epoch: int = 0
) -> Iterator[TrainBatch]:
    """Endless stream of batches; datasets ordered sources first, target last."""
    if len(datasets) < 2:
        raise DataError("need at least one source and the target")
    if any(ds.split != "train" for ds in datasets):
        raise DataError("batches are drawn from train splits only")
    steps_per_epoch(datasets, batch_size)
    epoch = start_epoch
    while True:
        yield from epoch_batches(datasets, batch_size, seed, epoch)
        epoch += 1


# ---------------------------------------------------------------------------
# exemplar pool


@dataclass
class ExemplarPool:
    exemplars: dict[tuple[int, int], np.ndarray]
    source_index: dict[tuple[int, int], int] = field(default_factory=dict)

    def owners(self, class_index: int) -> list[int]:
        return sorted(i for (i, c) in self.exemplars if c == class_index)

    def __len__(self) -> int:
        return len(self.exemplars)


def build_exemplar_pool(sources: Sequence[DomainDataset], task: GmdaTask, seed: int) -> ExemplarPool:
    """Pick one exemplar uniformly at random per populated (domain, class) pair."""
    rng = np.random.default_rng([seed, 0xE8E])
    exemplars, where = {}, {}
    for ds in sources:
        if ds.labels is None:
            raise DataError(f"domain {ds.domain_index} has no labels; exemplars need labeled sources")
        for c in task.classes_of(ds.domain_index):
            idx = np.flatnonzero(ds.labels == c)
            if idx.size == 0:
                raise DataError(f"domain {ds.domain_index} owns class {c} but has no samples of it")
            k = int(idx[rng.integers(idx.size)])
            exemplars[(ds.domain_index, c)] = ds.images[k]
            where[(ds.domain_index, c)] = k
    return ExemplarPool(exemplars, where)


def lookup_exemplar(
    pool: ExemplarPool,
    fake_domain: int,
    class_index: int,
    rng: np.random.Generator,
    true_domain: int | None = None,
) -> tuple[np.ndarray, int] | None:
    """Exemplar for ``(fake_domain, class_index)``.

    On a miss the fake domain is re-drawn uniformly among the other sources
    owning the class; ``None`` when no such source exists.
    """
    hit = pool.exemplars.get((fake_domain, class_index))
    if hit is not None:
        return hit, fake_domain
    owners = [i for i in pool.owners(class_index) if i != true_domain]
    if not owners:
        return None
    d = owners[int(rng.integers(len(owners)))]
    return pool.exemplars[(d, class_index)], d
