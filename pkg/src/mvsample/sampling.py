"""Spatial sample selection on a partition's first principal component.

``sample_random`` draws uniformly without replacement. ``sample_feature``
spreads the budget evenly over an equal-width value histogram, filling the
sparsest bins first so rare values are kept in full; for a fixed budget this
maximizes the entropy of the sampled value histogram. ``sample_combined``
blends the two.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

RANDOM = 0
FEATURE = 1


@dataclass(frozen=True)
class SamplePlan:
    rate_random: float = 0.025
    rate_feature: float = 0.025
    histogram_bins: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("rate_random", "rate_feature"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.rate_random + self.rate_feature > 1 + 1e-12:
            raise ValueError("rate_random + rate_feature must not exceed 1")
        if self.histogram_bins < 2:
            raise ValueError("histogram_bins must be >= 2")

    @property
    def total_rate(self) -> float:
        return self.rate_random + self.rate_feature


@dataclass(frozen=True)
class SampleSet:
    indices: np.ndarray  # sorted, unique, local to the partition
    provenance: np.ndarray  # RANDOM or FEATURE per index

    def __len__(self) -> int:
        return int(self.indices.size)


def budget(n: int, rate: float) -> int:
    """Round-half-up sample count, at least one when ``rate > 0`` and ``n > 0``."""
    if n <= 0 or rate <= 0:
        return 0
    # the epsilon absorbs representation error, e.g. 0.05 * 10
    return min(n, max(1, math.floor(rate * n + 0.5 + 1e-9)))


def _rng(seed, stream: int) -> np.random.Generator:
    return np.random.default_rng(seed if stream == 0 else [seed, stream])


def _make_set(idx: np.ndarray, tag: int) -> SampleSet:
    idx = np.sort(np.asarray(idx, dtype=np.int64))
    return SampleSet(idx, np.full(idx.size, tag, dtype=np.uint8))


def sample_random(n: int, rate: float, seed: int = 0) -> SampleSet:
    if not 0 <= rate <= 1:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    t = budget(n, rate)
    idx = _rng(seed, 0).choice(n, size=t, replace=False) if t < n else np.arange(n)
    return _make_set(idx, RANDOM)


def allocate_bins(counts: np.ndarray, total: int) -> np.ndarray:
    """Water-fill ``total`` picks over histogram bins, sparsest bins first.

    Every bin receives ``min(count, level)`` for a common level, with the
    leftover from integer division handed to the lowest-index unfilled bins.
    """
    counts = np.asarray(counts, dtype=np.int64)
    alloc = np.zeros_like(counts)
    remaining = int(min(total, counts.sum()))
    open_bins = [b for b in np.argsort(counts, kind="stable") if counts[b] > 0]
    while open_bins and remaining > 0:
        share = remaining // len(open_bins)
        small = [b for b in open_bins if counts[b] - alloc[b] <= share]
        if small:
            for b in small:
                remaining -= counts[b] - alloc[b]
                alloc[b] = counts[b]
            open_bins = [b for b in open_bins if alloc[b] < counts[b]]
            continue
        for b in open_bins:
            alloc[b] += share
        remaining -= share * len(open_bins)
        for b in sorted(open_bins)[:remaining]:
            alloc[b] += 1
        remaining = 0
    return alloc


def histogram_bins(values: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bin index of each value over ``[min, max]``."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.size, dtype=np.int64)
    b = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(b, 0, bins - 1)


def sample_feature(pc1_values, rate: float, bins: int = 32, seed: int = 0) -> SampleSet:
    values = np.asarray(pc1_values, dtype=np.float64).ravel()
    n = values.size
    if not 0 <= rate <= 1:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    t = budget(n, rate)
    if t == n:
        return _make_set(np.arange(n), FEATURE)
    if t == 0:
        return _make_set(np.empty(0, dtype=np.int64), FEATURE)
    if values.max() <= values.min():
        warnings.warn("constant first-PC values; falling back to random sampling", stacklevel=2)
        s = sample_random(n, rate, seed)
        return SampleSet(s.indices, np.full(len(s), FEATURE, dtype=np.uint8))

    which = histogram_bins(values, bins)
    counts = np.bincount(which, minlength=bins)
    alloc = allocate_bins(counts, t)
    rng = _rng(seed, 1)
    order = np.argsort(which, kind="stable")
    members = np.split(order, np.cumsum(counts)[:-1])
    picks = [
        m if a == m.size else rng.choice(m, size=a, replace=False)
        for m, a in zip(members, alloc) if a > 0
    ]
    return _make_set(np.concatenate(picks), FEATURE)


def sample_combined(pc1_values, plan: SamplePlan) -> SampleSet:
    """Union of random and feature picks, sized to the plan's total rate.

    Points picked by both samplers are tagged as feature picks. Shortfalls
    from collisions are topped up with further random picks; a surplus from
    per-sampler rounding is trimmed from the random picks.
    """
    values = np.asarray(pc1_values, dtype=np.float64).ravel()
    n = values.size
    target = budget(n, plan.total_rate)
    if plan.rate_feature == 0:
        rand = sample_random(n, plan.rate_random, plan.seed)
        return rand
    feat = sample_feature(values, plan.rate_feature, plan.histogram_bins, plan.seed)
    if plan.rate_random == 0:
        return feat
    rand = sample_random(n, plan.rate_random, plan.seed)

    tag = np.full(n, -1, dtype=np.int8)
    tag[rand.indices] = RANDOM
    tag[feat.indices] = FEATURE
    chosen = np.flatnonzero(tag >= 0)
    if chosen.size < target:
        pool = np.flatnonzero(tag < 0)
        extra = _rng(plan.seed, 2).choice(pool, size=target - chosen.size, replace=False)
        tag[extra] = RANDOM
    elif chosen.size > target:
        surplus = chosen.size - target
        rand_only = np.flatnonzero(tag == RANDOM)
        drop = _rng(plan.seed, 3).choice(rand_only, size=min(surplus, rand_only.size), replace=False)
        tag[drop] = -1
        if surplus > rand_only.size:
            feat_only = np.flatnonzero(tag == FEATURE)
            tag[_rng(plan.seed, 4).choice(feat_only, size=surplus - rand_only.size, replace=False)] = -1
    idx = np.flatnonzero(tag >= 0)
    return SampleSet(idx, tag[idx].astype(np.uint8))
