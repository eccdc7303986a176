"""Hierarchical stratified epoch sampling and file-level split management.

Epochs are streamed: per-class counts come from largest-remainder
apportionment of exact rational class fractions, the emission order is
globally shuffled, and class streams cycle (with reshuffle) when
exhausted, so sampling is with replacement across epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .jetdata import LABEL_NAMES, ClassLabel, generate_toy_jet, read_jets

# 1/3 QCD, 1/3 qqb+bcs, 1/3 signal split as bb 1/9, qq 1/9, each di-tau 1/27
DEFAULT_FRACTIONS = {
    ClassLabel.QCD: Fraction(1, 3),
    ClassLabel.QQB_BCS: Fraction(1, 3),
    ClassLabel.BB: Fraction(1, 9),
    ClassLabel.QQ: Fraction(1, 9),
    ClassLabel.TAU_H_TAU_E: Fraction(1, 27),
    ClassLabel.TAU_H_TAU_MU: Fraction(1, 27),
    ClassLabel.TAU_H_TAU_H: Fraction(1, 27),
}


class SamplerError(Exception):
    pass


class SamplerConfigError(SamplerError):
    pass


@dataclass(frozen=True)
class SamplingPolicy:
    """Per-class target fractions (exact rationals) plus the epoch size."""

    epoch_size: int
    fractions: dict = field(default_factory=lambda: dict(DEFAULT_FRACTIONS))

    def __post_init__(self):
        total = sum(self.fractions.values())
        if total != 1:
            raise SamplerConfigError(f"class fractions must sum to 1 exactly, got {total}")
        if self.epoch_size < len(self.fractions):
            raise SamplerConfigError(
                f"epoch_size {self.epoch_size} smaller than class count {len(self.fractions)}")

    def class_counts(self):
        """Largest-remainder apportionment of fractions * epoch_size."""
        labels = sorted(self.fractions, key=int)
        quotas = {c: self.fractions[c] * self.epoch_size for c in labels}
        counts = {c: int(quotas[c]) for c in labels}  # Fraction floor for q >= 0
        shortfall = self.epoch_size - sum(counts.values())
        by_remainder = sorted(labels, key=lambda c: (-(quotas[c] - counts[c]), int(c)))
        for c in by_remainder[:shortfall]:
            counts[c] += 1
        return counts


def toy_source(label, seed):
    """Infinite stream of class-conditional toy jets."""
    rng = np.random.default_rng(seed)
    label = ClassLabel(label)
    while True:
        yield generate_toy_jet(label, rng)


def file_source(label, paths, seed):
    """Infinite stream over a class's files; reshuffles order each full pass."""
    if not paths:
        raise SamplerConfigError(f"no files for class {LABEL_NAMES[ClassLabel(label)]!r}")
    rng = np.random.default_rng(seed)
    order = list(paths)
    label = ClassLabel(label)
    while True:
        for path in order:
            for jet in read_jets(path):
                if jet.label != int(label):
                    raise SamplerConfigError(
                        f"file {path} contains label {jet.label}, expected "
                        f"{LABEL_NAMES[label]!r}")
                yield jet
        rng.shuffle(order)


def draw_epoch(policy: SamplingPolicy, sources, rng):
    """Yield exactly epoch_size jets with exact per-class counts.

    `sources` maps class label -> infinite jet iterator. Counts are
    deterministic (largest remainder); only the global emission order is
    random.
    """
    counts = policy.class_counts()
    for label, count in counts.items():
        if count > 0 and label not in sources:
            raise SamplerConfigError(
                f"no jet stream configured for class {LABEL_NAMES[ClassLabel(label)]!r}")
    labels = np.concatenate([np.full(c, int(l), dtype=np.int8)
                             for l, c in counts.items() if c > 0])
    rng.shuffle(labels)
    iters = {int(l): sources[l] for l in counts if counts[l] > 0}
    for l in labels:
        yield next(iters[int(l)])


def iterate_files(paths):
    """Natural (unreweighted) stream: every jet of every file exactly once."""
    for path in paths:
        yield from read_jets(path)


# ---------------------------------------------------------------------------
# file-level splits
# ---------------------------------------------------------------------------

@dataclass
class SplitManifest:
    train: list
    val: list
    test: list

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if (sets[0] & sets[1]) or (sets[0] & sets[2]) or (sets[1] & sets[2]):
            raise SamplerConfigError("split manifests must be pairwise disjoint")

    def all_files(self):
        return list(self.train) + list(self.val) + list(self.test)


def split_files(files, ratios, rng) -> SplitManifest:
    """Deterministically partition files into disjoint train/val/test sets."""
    if len(ratios) != 3:
        raise SamplerConfigError(f"expected 3 split ratios, got {len(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SamplerConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    files = list(files)
    if len(files) < 3:
        raise SamplerConfigError(f"need at least 3 files to split, got {len(files)}")
    order = np.array(files, dtype=object)
    rng.shuffle(order)
    quotas = [r * len(files) for r in ratios]
    sizes = [int(q) for q in quotas]
    for i in sorted(range(3), key=lambda i: (-(quotas[i] - sizes[i]), i))[:len(files) - sum(sizes)]:
        sizes[i] += 1
    a, b = sizes[0], sizes[0] + sizes[1]
    return SplitManifest(list(order[:a]), list(order[a:b]), list(order[b:]))


def save_manifest(path, manifest: SplitManifest):
    with open(path, "w") as f:
        for name in ("train", "val", "test"):
            f.write(f"[{name}]\n")
            for p in getattr(manifest, name):
                f.write(f"{p}\n")


def load_manifest(path) -> SplitManifest:
    sections = {"train": [], "val": [], "test": []}
    current = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in sections:
                    raise SamplerConfigError(f"unknown manifest section {current!r}")
            elif current is None:
                raise SamplerConfigError("manifest entries before any section header")
            else:
                sections[current].append(line)
    return SplitManifest(**sections)
