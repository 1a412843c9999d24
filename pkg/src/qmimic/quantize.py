"""Code dictionaries, the interval quantizer and the quantized ReLU."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import Node, custom_op


@dataclass(frozen=True)
class QuantizationScheme:
    """A sorted code dictionary plus how it was generated.

    ``kind`` is ``"uniform"``, ``"pow2"`` or ``"explicit"``; ``params`` holds
    the generator arguments (stride/max_value or k_min/k_max).
    """

    entries: tuple[float, ...]
    kind: str = "explicit"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        entries = tuple(float(e) for e in self.entries)
        if not entries:
            raise ValueError("code dictionary must have at least one entry")
        if any(not math.isfinite(e) for e in entries):
            raise ValueError("code dictionary entries must be finite")
        if any(b <= a for a, b in zip(entries, entries[1:])):
            raise ValueError(f"code dictionary must be strictly increasing, got {entries}")
        if entries[0] < 0:
            raise ValueError("code dictionary entries must be non-negative")
        object.__setattr__(self, "entries", entries)

    @property
    def midpoints(self) -> np.ndarray:
        e = np.asarray(self.entries)
        return (e[:-1] + e[1:]) / 2

    def __len__(self) -> int:
        return len(self.entries)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "entries": list(self.entries)}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizationScheme":
        return cls(tuple(d["entries"]), d.get("kind", "explicit"), dict(d.get("params", {})))


def make_uniform(stride: float, max_value: float) -> QuantizationScheme:
    """Dictionary ``{0, s, 2s, ...}`` up to the largest multiple of s not above max_value."""
    if not stride > 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if max_value < 0:
        raise ValueError(f"max_value must be non-negative, got {max_value}")
    # tolerate max_value/stride landing a hair under an integer
    count = int(math.floor(max_value / stride + 1e-9)) + 1
    entries = tuple(stride * i for i in range(count))
    return QuantizationScheme(entries, "uniform", {"stride": stride, "max_value": max_value})


def make_pow2(k_min: int, k_max: int) -> QuantizationScheme:
    """Dictionary ``{0} U {2**k : k_min <= k <= k_max}``."""
    if k_min > k_max:
        raise ValueError(f"inverted exponent range: k_min={k_min} > k_max={k_max}")
    entries = (0.0,) + tuple(2.0**k for k in range(k_min, k_max + 1))
    return QuantizationScheme(entries, "pow2", {"k_min": k_min, "k_max": k_max})


def make_explicit(entries) -> QuantizationScheme:
    return QuantizationScheme(tuple(entries), "explicit", {})


def calibrate_uniform(activations: np.ndarray, stride: float = 1.0, percentile: float = 99.0) -> QuantizationScheme:
    """Uniform scheme capped at the activation percentile, rounded up to a stride multiple."""
    top = float(np.percentile(np.asarray(activations, dtype=np.float64), percentile)) if np.size(activations) else 0.0
    cap = max(stride, math.ceil(top / stride - 1e-9) * stride)
    scheme = make_uniform(stride, cap)
    return QuantizationScheme(scheme.entries, "uniform", {"stride": stride, "max_value": cap, "percentile": percentile})


def assign_indices(values: np.ndarray, entries) -> np.ndarray:
    """Index of the dictionary entry each value falls to (midpoints resolve downward).

    Values below the first midpoint get index 0 and values above the last get
    the last index, whatever their sign.
    """
    e = np.asarray(entries, dtype=np.float64)
    mids = (e[:-1] + e[1:]) / 2
    # side="left" counts midpoints strictly below v, so v == midpoint stays in the lower cell
    return np.searchsorted(mids, values, side="left")


def quantize(f: np.ndarray, scheme: QuantizationScheme) -> np.ndarray:
    """Map every element of a non-negative array to its dictionary entry."""
    f = np.asarray(f)
    if f.size and np.min(f) < 0:
        raise ValueError(f"quantize expects non-negative input, got minimum {np.min(f)}")
    dtype = f.dtype if f.dtype in (np.float32, np.float64) else np.float64
    table = np.asarray(scheme.entries, dtype=dtype)
    return table[assign_indices(f, scheme.entries)]


def quantized_relu(x: Node, scheme: QuantizationScheme) -> Node:
    """``Q(relu(x))`` forward; plain ReLU gradient backward (straight-through)."""
    mask = x.value > 0
    out = quantize(np.where(mask, x.value, 0).astype(x.value.dtype), scheme)
    return custom_op(out, (x,), lambda g: (g * mask,), name="quantized_relu")
