"""Quantization cells of feature space and how often a low-rank manifold reaches them.

Per-axis quantization with a shared dictionary tiles R^d into |D|^d boxes
whose centres are dictionary vectors. A student whose features live on a
k-dimensional affine manifold can reproduce a centre exactly only if the
manifold passes through it, but after quantization it is enough for the
manifold to cross the centre's cell. ``matching_relaxation_report`` measures
both.
"""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .quantize import assign_indices

_MAX_CELLS = 2**63


class EmptyIntersectionWarning(UserWarning):
    pass


def cell_count(d: int, dictionary) -> int:
    n = len(dictionary)
    if d < 1 or n < 1:
        raise ValueError("need d >= 1 and a non-empty dictionary")
    count = n**d
    if count > _MAX_CELLS:
        raise OverflowError(f"{n}^{d} cells exceeds 2^63")
    return count


def quantize_point(v, dictionary) -> np.ndarray:
    """Per-axis dictionary assignment: the centre of the cell containing ``v``."""
    entries = np.asarray(sorted(dictionary), dtype=np.float64)
    return entries[assign_indices(np.asarray(v, dtype=np.float64), entries)]


@dataclass(frozen=True)
class CellPartition:
    d: int
    dictionary: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "dictionary", tuple(sorted(float(x) for x in self.dictionary)))
        cell_count(self.d, self.dictionary)

    @property
    def count(self) -> int:
        return cell_count(self.d, self.dictionary)

    @property
    def bounds(self) -> tuple[float, float]:
        """Per-axis extent: outer cells reach half a neighbouring gap past the end entries."""
        e = self.dictionary
        if len(e) == 1:
            return e[0] - 0.5, e[0] + 0.5
        return e[0] - (e[1] - e[0]) / 2, e[-1] + (e[-1] - e[-2]) / 2

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        """Integer index vectors of the cells holding ``points`` ([M, d])."""
        return assign_indices(np.asarray(points, dtype=np.float64), self.dictionary)

    def center(self, index) -> np.ndarray:
        return np.asarray(self.dictionary)[np.asarray(index)]

    def centers(self) -> np.ndarray:
        return np.array(list(itertools.product(self.dictionary, repeat=self.d)))

    def inside(self, points: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds
        return np.all((points >= lo) & (points <= hi), axis=-1)


@dataclass(frozen=True)
class LinearManifold:
    """Affine set ``offset + span(basis)`` with ``basis`` of shape [k, d]."""

    basis: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float64).reshape(-1, len(self.offset))
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))
        if basis.shape[0] >= basis.shape[1]:
            raise ValueError(f"manifold rank {basis.shape[0]} must be below the ambient dimension {basis.shape[1]}")
        if basis.shape[0] and np.linalg.matrix_rank(basis) < basis.shape[0]:
            raise ValueError("manifold basis vectors are linearly dependent")

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.offset.shape[0]

    def orthonormal(self) -> np.ndarray:
        if self.rank == 0:
            return self.basis
        q, _ = np.linalg.qr(self.basis.T)
        return q.T

    def distance(self, points: np.ndarray) -> np.ndarray:
        rel = np.asarray(points, dtype=np.float64) - self.offset
        q = self.orthonormal()
        return np.linalg.norm(rel - (rel @ q.T) @ q, axis=-1)

    @classmethod
    def random(cls, d: int, k: int, rng: np.random.Generator, anchor=None) -> "LinearManifold":
        if not 0 <= k < d:
            raise ValueError(f"need 0 <= k < d, got k={k}, d={d}")
        while True:
            basis = rng.standard_normal((k, d))
            if k == 0 or np.linalg.matrix_rank(basis) == k:
                break
        offset = rng.standard_normal(d) if anchor is None else np.asarray(anchor, dtype=np.float64)
        return cls(basis, offset)


def _coefficient_radius(m: LinearManifold, partition: CellPartition) -> float:
    lo, hi = partition.bounds
    corner_far = np.maximum(np.abs(m.offset - lo), np.abs(m.offset - hi))
    return float(np.linalg.norm(corner_far))


def intersected_cells(m: LinearManifold, partition: CellPartition, samples: int = 5000, seed: int = 0,
                      chunk: int = 4096, max_draws: int = 2_000_000) -> set[tuple[int, ...]]:
    """Monte-Carlo lower bound on the cells the manifold passes through.

    Points are drawn uniformly on the manifold patch inside the partition's
    bounding box (rejection from a coefficient cube) until ``samples`` land
    inside. The draw stream depends only on ``seed``, so more samples can
    only add cells.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if m.dim != partition.d:
        raise ValueError(f"manifold lives in R^{m.dim} but the partition is {partition.d}-dimensional")
    if m.rank == 0:
        if not partition.inside(m.offset[None])[0]:
            warnings.warn("point lies outside the partition's bounding box", EmptyIntersectionWarning, stacklevel=2)
            return set()
        return {tuple(int(i) for i in partition.cell_of(m.offset))}
    q = m.orthonormal()
    radius = _coefficient_radius(m, partition)
    rng = np.random.default_rng(seed)
    hits: set[tuple[int, ...]] = set()
    accepted = drawn = 0
    while accepted < samples and drawn < max_draws:
        coef = rng.uniform(-radius, radius, size=(chunk, m.rank))
        pts = m.offset + coef @ q
        drawn += chunk
        pts = pts[partition.inside(pts)][: samples - accepted]
        accepted += len(pts)
        hits.update(map(tuple, partition.cell_of(pts).tolist()))
    if not hits:
        warnings.warn("manifold does not meet the partition's bounding box", EmptyIntersectionWarning, stacklevel=2)
    return hits


@dataclass
class TrialResult:
    trial: int
    d: int
    k: int
    cells_total: int
    cells_hit: int
    strict_match: float
    relaxed_fraction: float


@dataclass
class RelaxationReport:
    trials: list[TrialResult]

    @property
    def mean_strict(self) -> float:
        return float(np.mean([t.strict_match for t in self.trials])) if self.trials else 0.0

    @property
    def mean_relaxed(self) -> float:
        return float(np.mean([t.relaxed_fraction for t in self.trials])) if self.trials else 0.0

    @property
    def full_strict(self) -> float:
        """Fraction of trials whose manifold passes through every centre."""
        return float(np.mean([t.strict_match == 1.0 for t in self.trials])) if self.trials else 0.0

    @property
    def full_relaxed(self) -> float:
        """Fraction of trials whose manifold crosses every cell."""
        return float(np.mean([t.relaxed_fraction == 1.0 for t in self.trials])) if self.trials else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "d", "k", "cells_total", "cells_hit", "strict_match", "relaxed_fraction"])
            for t in self.trials:
                w.writerow([t.trial, t.d, t.k, t.cells_total, t.cells_hit, repr(t.strict_match), repr(t.relaxed_fraction)])


def matching_relaxation_report(trials: int, d: int, k: int, dictionary, seed: int = 0, samples: int = 5000,
                               tol: float = 1e-9) -> RelaxationReport:
    """Strict (centres on the manifold) vs relaxed (cells crossed) coverage for random manifolds.

    Each manifold is anchored at a random cell centre, i.e. it already fits
    one target exactly, and gets a random k-dimensional direction set.
    """
    if not 0 <= k < d:
        raise ValueError(f"need 0 <= k < d, got k={k}, d={d}")
    part = CellPartition(d, tuple(dictionary))
    centers = part.centers()
    total = part.count
    out = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        anchor = centers[rng.integers(len(centers))]
        m = LinearManifold.random(d, k, rng, anchor=anchor)
        scale = max(1.0, float(np.max(np.abs(centers))))
        on_manifold = m.distance(centers) <= tol * scale
        hits = intersected_cells(m, part, samples, seed=int(rng.integers(2**63)))
        # a centre on the manifold is an exact intersection even if sampling missed its cell
        hits.update(map(tuple, part.cell_of(centers[on_manifold]).tolist()))
        on = int(on_manifold.sum())
        out.append(TrialResult(trial, d, k, total, len(hits), on / total, len(hits) / total))
    return RelaxationReport(out)
