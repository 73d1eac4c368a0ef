"""GMDA task definition: source label sets, shared/private classes, unknown index."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import yaml

from .errors import ProtocolError


@dataclass(frozen=True)
class LabelSpace:
    known_classes: tuple[int, ...]  # remapped, always 0..C-1

    def __post_init__(self):
        if not self.known_classes:
            raise ProtocolError("label space has no known classes")
        if len(set(self.known_classes)) != len(self.known_classes):
            raise ProtocolError("duplicate classes in label space")
        if list(self.known_classes) != sorted(self.known_classes):
            raise ProtocolError("known classes must be sorted")

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    @property
    def unknown_index(self) -> int:
        return len(self.known_classes)


@dataclass(frozen=True)
class GmdaTask:
    """A validated GMDA task.

    Class ids are remapped once to contiguous indices ``0..C-1``; every
    downstream component works with remapped ids. ``raw_to_index`` and
    ``index_to_raw`` hold the bijection. Raw ids listed in
    ``unknown_raw_classes`` all collapse onto ``label_space.unknown_index``.
    Domain indices ``0..N-1`` are the sources and ``N`` is the target.
    """

    source_label_sets: tuple[frozenset[int], ...]  # remapped ids
    target_known_classes: tuple[int, ...]
    domain_names: tuple[str, ...]
    label_space: LabelSpace
    raw_to_index: dict[int, int] = field(hash=False)
    index_to_raw: dict[int, int] = field(hash=False)
    unknown_raw_classes: tuple[int, ...] = ()
    target_extra_unknown: bool = True
    seed: int = 0

    @property
    def num_sources(self) -> int:
        return len(self.source_label_sets)

    @property
    def num_domains(self) -> int:
        return len(self.source_label_sets) + 1

    @property
    def target_index(self) -> int:
        return len(self.source_label_sets)

    @property
    def num_known(self) -> int:
        return self.label_space.num_known

    @property
    def unknown_index(self) -> int:
        return self.label_space.unknown_index

    def classes_of(self, domain_index: int) -> tuple[int, ...]:
        """Remapped known classes owned by a domain (the target owns all of them)."""
        if domain_index == self.target_index:
            return self.target_known_classes
        self._check_source(domain_index)
        return tuple(sorted(self.source_label_sets[domain_index]))

    def owners_of(self, class_index: int) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.source_label_sets) if class_index in s)

    def to_raw(self, class_index: int) -> int:
        return self.index_to_raw[class_index]

    def to_index(self, raw_class: int) -> int:
        """Map a raw class id to its remapped index; declared unknowns map to C."""
        if raw_class in self.raw_to_index:
            return self.raw_to_index[raw_class]
        if raw_class in self.unknown_raw_classes:
            return self.unknown_index
        raise ProtocolError(f"raw class {raw_class} is not part of the task")

    def _check_source(self, i: int) -> None:
        if not 0 <= i < self.num_sources:
            raise ProtocolError(f"source index {i} out of range [0, {self.num_sources})")

    def to_dict(self) -> dict:
        return {
            "source_label_sets": [sorted(self.to_raw(c) for c in s) for s in self.source_label_sets],
            "unknown_classes": list(self.unknown_raw_classes),
            "target_extra_unknown": self.target_extra_unknown,
            "domain_names": list(self.domain_names),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmdaTask":
        return build_task(
            d["source_label_sets"],
            target_extra_unknown=d.get("target_extra_unknown", True),
            seed=d.get("seed", 0),
            domain_names=d.get("domain_names"),
            unknown_classes=d.get("unknown_classes", ()),
        )

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def load(cls, text: str) -> "GmdaTask":
        return cls.from_dict(yaml.safe_load(text))


def build_task(
    source_label_sets: Sequence[Iterable[int]],
    target_extra_unknown: bool = True,
    seed: int = 0,
    domain_names: Sequence[str] | None = None,
    unknown_classes: Iterable[int] = (),
) -> GmdaTask:
    """Validate raw source label sets and build a remapped task.

    ``unknown_classes`` lists raw ids that appear only in the target; they
    must not occur in any source.
    """
    sets = [frozenset(int(c) for c in s) for s in source_label_sets]
    if len(sets) < 2:
        raise ProtocolError(f"need at least 2 source domains, got {len(sets)}")
    for i, s in enumerate(sets):
        if not s:
            raise ProtocolError(f"source domain {i} has an empty label set")
    known_raw = sorted(frozenset().union(*sets))
    unknown_raw = tuple(sorted({int(c) for c in unknown_classes}))
    leaked = set(unknown_raw) & set(known_raw)
    if leaked:
        raise ProtocolError(f"unknown classes {sorted(leaked)} appear in a source domain")

    n = len(sets)
    if domain_names is None:
        domain_names = [f"source{i}" for i in range(n)] + ["target"]
    domain_names = tuple(str(x) for x in domain_names)
    if len(domain_names) != n + 1:
        raise ProtocolError(f"expected {n + 1} domain names (sources + target), got {len(domain_names)}")
    if len(set(domain_names)) != len(domain_names):
        raise ProtocolError(f"duplicate domain names: {list(domain_names)}")

    raw_to_index = {raw: i for i, raw in enumerate(known_raw)}
    index_to_raw = {i: raw for raw, i in raw_to_index.items()}
    label_space = LabelSpace(tuple(range(len(known_raw))))
    return GmdaTask(
        source_label_sets=tuple(frozenset(raw_to_index[c] for c in s) for s in sets),
        target_known_classes=label_space.known_classes,
        domain_names=domain_names,
        label_space=label_space,
        raw_to_index=raw_to_index,
        index_to_raw=index_to_raw,
        unknown_raw_classes=unknown_raw,
        target_extra_unknown=bool(target_extra_unknown),
        seed=int(seed),
    )


def shared_and_private(task: GmdaTask, i: int, j: int) -> tuple[frozenset[int], frozenset[int]]:
    """Classes shared by sources ``i`` and ``j``, and those private to ``i``."""
    task._check_source(i)
    task._check_source(j)
    if i == j:
        raise ProtocolError("shared_and_private needs two distinct sources")
    si, sj = task.source_label_sets[i], task.source_label_sets[j]
    shared = si & sj
    return shared, si - shared
