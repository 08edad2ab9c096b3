"""Test-stream construction: IS/DS ordering crossed with CB/CI class balance.

Randomness comes from numpy's ``default_rng`` (PCG64), seeded per call.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

DEFAULT_PIECES = 10


@dataclass(frozen=True)
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise InputError("x must be N x D with one label per row")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise InputError("labels outside [0, K)")

    def __len__(self):
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.x[idx], self.y[idx], self.num_classes)


class Sampling(str, enum.Enum):
    IS = "is"
    DS = "ds"


class Balance(str, enum.Enum):
    CB = "cb"
    CI = "ci"


@dataclass(frozen=True)
class ScenarioSpec:
    sampling: Sampling = Sampling.IS
    balance: Balance = Balance.CB
    rho: float | None = None
    pi: float | None = None
    pieces: int = DEFAULT_PIECES
    seed: int = 0
    n_max: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        object.__setattr__(self, "balance", Balance(self.balance))
        if self.sampling is Sampling.DS:
            if self.rho is None or not self.rho > 0:
                raise ConfigError("DS streams need a concentration rho > 0")
            if self.pieces < 1:
                raise ConfigError("piece count J must be >= 1")
        elif self.rho is not None:
            raise ConfigError("rho only applies to DS streams")
        if self.balance is Balance.CI:
            if self.pi is None or not 0 < self.pi <= 1:
                raise ConfigError("CI streams need an imbalance factor pi in (0, 1]")
        elif self.pi is not None:
            raise ConfigError("pi only applies to CI streams")

    @classmethod
    def parse(cls, name: str, rho=None, pi=None, **kw) -> "ScenarioSpec":
        """Build from a name like ``"ds+ci"``; irrelevant rho/pi are dropped."""
        try:
            s, b = name.lower().split("+")
            sampling, balance = Sampling(s), Balance(b)
        except ValueError:
            raise ConfigError(f"unknown scenario {name!r}; expected is|ds + cb|ci") from None
        return cls(sampling, balance,
                   rho=rho if sampling is Sampling.DS else None,
                   pi=pi if balance is Balance.CI else None, **kw)

    @property
    def name(self) -> str:
        return f"{self.sampling.value}+{self.balance.value}"


def order_is(dataset, seed):
    n = len(dataset)
    if n == 0:
        raise InputError("empty dataset")
    return np.random.default_rng(seed).permutation(n)


def largest_remainder(q, total):
    """Integer counts proportional to ``q`` summing exactly to ``total``."""
    raw = np.asarray(q, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = int(total - counts.sum())
    if short > 0:
        # stable sort keeps ties at the lowest index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet(rng, rho, size):
    """One Dirichlet(rho, ..., rho) draw via normalized Gamma(rho, 1) variates."""
    g = rng.gamma(rho, 1.0, size)
    s = g.sum()
    if s == 0.0:
        # every gamma underflowed: all mass goes to one uniformly chosen piece
        g = np.zeros(size)
        g[rng.integers(size)] = 1.0
        s = 1.0
    return g / s


def order_ds(dataset, rho, pieces=DEFAULT_PIECES, seed=0):
    """Dirichlet-concentrated ordering.

    Each class is split over ``pieces`` according to its own Dirichlet draw,
    the pieces are concatenated in index order and shuffled internally.
    """
    if not rho > 0:
        raise ConfigError("rho must be positive")
    if pieces < 1:
        raise ConfigError("need at least one piece")
    n = len(dataset)
    if n == 0:
        raise InputError("empty dataset")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(pieces)]
    for k in range(dataset.num_classes):
        members = np.flatnonzero(dataset.y == k)
        q = dirichlet(rng, rho, pieces)
        members = rng.permutation(members)
        counts = largest_remainder(q, members.size)
        for j, chunk in enumerate(np.split(members, np.cumsum(counts)[:-1])):
            buckets[j].append(chunk)
    out = [rng.permutation(np.concatenate(b)) for b in buckets]
    return np.concatenate(out).astype(np.int64)


def ci_counts(num_classes, pi, n_max):
    """``round(n_max * pi**(k / (K - 1)))`` with halves rounded up."""
    k = np.arange(num_classes)
    return np.floor(n_max * pi ** (k / (num_classes - 1)) + 0.5).astype(np.int64)


def resample_ci(dataset, pi, n_max=None, seed=0):
    """Exponentially imbalanced subset; class 0 is the most frequent.

    Returns ``(subset, indices)`` where ``indices`` point into ``dataset``.
    """
    if not 0 < pi <= 1:
        raise ConfigError("pi must lie in (0, 1]")
    support = np.bincount(dataset.y, minlength=dataset.num_classes)
    if n_max is None:
        n_max = int(support.min())
    counts = ci_counts(dataset.num_classes, pi, n_max)
    rng = np.random.default_rng(seed)
    chosen = []
    for k, need in enumerate(counts):
        if need > support[k]:
            raise InputError(f"class {k} has {support[k]} samples, {need} required")
        members = np.flatnonzero(dataset.y == k)
        chosen.append(np.sort(rng.choice(members, size=int(need), replace=False)))
    # original order is kept so that pi=1 returns the dataset unchanged
    idx = np.sort(np.concatenate(chosen)).astype(np.int64)
    return dataset.subset(idx), idx


@dataclass(frozen=True)
class Stream:
    """Ordered test samples. ``index`` points into the source dataset."""

    x: np.ndarray
    y: np.ndarray
    index: np.ndarray
    num_classes: int
    spec: ScenarioSpec | None = None

    def __len__(self):
        return self.index.shape[0]

    def manifest(self):
        """``(position, sample index, label)`` records."""
        return [(pos, int(i), int(lbl)) for pos, (i, lbl) in enumerate(zip(self.index, self.y))]


def make_scenario(dataset, spec: ScenarioSpec) -> Stream:
    base_idx = np.arange(len(dataset))
    data = dataset
    if spec.balance is Balance.CI:
        # derived seed keeps the resampling draws apart from the ordering draws
        ci_seed = int(np.random.SeedSequence(spec.seed).generate_state(1)[0])
        data, base_idx = resample_ci(dataset, spec.pi, spec.n_max, seed=ci_seed)
    if spec.sampling is Sampling.IS:
        order = order_is(data, spec.seed)
    else:
        order = order_ds(data, spec.rho, spec.pieces, seed=spec.seed)
    return Stream(data.x[order], data.y[order], base_idx[order], dataset.num_classes, spec)


def run_lengths(labels):
    """Lengths of maximal runs of equal consecutive labels."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return np.zeros(0, dtype=np.int64)
    edges = np.flatnonzero(np.diff(labels) != 0)
    bounds = np.concatenate(([-1], edges, [labels.size - 1]))
    return np.diff(bounds)


def piece_entropy(labels, num_classes, pieces=DEFAULT_PIECES):
    """Mean label entropy over ``pieces`` equal-length windows of a stream."""
    out = []
    for chunk in np.array_split(np.asarray(labels), pieces):
        if chunk.size == 0:
            continue
        p = np.bincount(chunk, minlength=num_classes) / chunk.size
        p = p[p > 0]
        out.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(out))
