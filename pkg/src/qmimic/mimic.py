"""RoI mimic loss, the joint training loss and the matching-ratio diagnostic."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Node, ShapeError
from .quantize import QuantizationScheme, make_uniform, quantize, quantized_relu

LAMBDA_SWEEP = (0.1, 1.0, 10.0)
MATCH_THRESHOLD = 0.3


class EmptyRoIWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MimicConfig:
    lam: float = 1.0
    quantize_teacher: bool = True
    quantize_student: bool = True
    scheme: QuantizationScheme = field(default_factory=lambda: make_uniform(1.0, 32.0))
    match_threshold: float = MATCH_THRESHOLD

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"mimic loss weight must be >= 0, got {self.lam}")
        if not self.match_threshold > 0:
            raise ValueError(f"match threshold must be > 0, got {self.match_threshold}")

    def teacher_transform(self, t: np.ndarray) -> np.ndarray:
        return quantize(t, self.scheme) if self.quantize_teacher else t

    def student_transform(self, s: Node) -> Node:
        return quantized_relu(s, self.scheme) if self.quantize_student else s


def mimic_loss(teacher_rois, student_rois_adapted: Node, cfg: MimicConfig) -> Node:
    """``1/(2R) * sum_i ||T(t_i) - S(s_i)||^2`` over R RoIs.

    The teacher side is treated as a constant. ``S`` is the quantized ReLU
    (straight-through gradient) when the student is quantized.
    """
    t = teacher_rois.value if isinstance(teacher_rois, Node) else np.asarray(teacher_rois)
    if t.shape != student_rois_adapted.shape:
        raise ShapeError(f"mimic_loss: teacher RoIs {t.shape} vs student RoIs {student_rois_adapted.shape}")
    r = t.shape[0]
    if r == 0:
        warnings.warn("mimic_loss called with zero RoIs; returning 0", EmptyRoIWarning, stacklevel=2)
        return nc.constant(np.zeros((), student_rois_adapted.value.dtype))
    target = nc.constant(cfg.teacher_transform(t).astype(student_rois_adapted.value.dtype))
    diff = nc.sub(cfg.student_transform(student_rois_adapted), target)
    return nc.scale(nc.sum_squares(diff), 1.0 / (2 * r))


def joint_loss(cls: Node, reg: Node, mimic: Node, lam: float) -> Node:
    """Detector classification + regression + lam * mimic."""
    return nc.add(nc.add(cls, reg), nc.scale(mimic, lam))


def matching_ratio(teacher_roi, student_roi, threshold: float = MATCH_THRESHOLD) -> float:
    """Fraction of elements with ``|t - s| < threshold``."""
    t = np.asarray(teacher_roi)
    s = np.asarray(student_roi)
    if t.shape != s.shape:
        raise ShapeError(f"matching_ratio: shapes {t.shape} and {s.shape} differ")
    if t.size == 0:
        raise ValueError("matching_ratio of an empty RoI is undefined")
    return float(np.mean(np.abs(t.astype(np.float64) - s.astype(np.float64)) < threshold))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def frequencies(self) -> np.ndarray:
        n = self.counts.sum()
        return self.counts / n if n else np.zeros(len(self.counts))

    def rows(self):
        for lo, hi, c, f in zip(self.edges[:-1], self.edges[1:], self.counts, self.frequencies):
            yield float(lo), float(hi), int(c), float(f)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count", "frequency"])
            w.writerows(self.rows())


def ratio_histogram(ratios, bins: int = 10) -> Histogram:
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    counts, edges = np.histogram(np.asarray(ratios, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return Histogram(edges, counts)


def matching_histogram(pairs, threshold: float = MATCH_THRESHOLD, bins: int = 10) -> Histogram:
    """Histogram of per-RoI matching ratios over ``[0, 1]`` (last bin closed)."""
    return ratio_histogram([matching_ratio(t, s, threshold) for t, s in pairs], bins)
