"""Tiny CNN backbones, the channel adapter, RoI max pooling and the detection head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Node, ShapeError
from .quantize import QuantizationScheme, quantized_relu


def reduced_width(channels: int, divisor: int) -> int:
    """Channel count of a "-1-n" variant: ceil(c/n), at least 1."""
    return max(1, math.ceil(channels / divisor))


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    divisor: int = 1
    in_channels: int = 1
    strides: tuple[int, ...] = (2, 2, 2)
    head_hidden: int = 128
    num_classes: int = 3
    input_scale: float = 1.0  # fixed multiplier on pixels before the first conv

    def __post_init__(self):
        if not self.input_scale > 0:
            raise ValueError(f"input_scale must be positive, got {self.input_scale}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.divisor < 1:
            raise ValueError(f"width divisor must be a positive integer, got {self.divisor}")
        if len(self.strides) != len(self.channels):
            raise ValueError("strides and channels must have one entry per stage")
        for i, c in enumerate(self.channels):
            if c < 1:
                raise ValueError(f"stage {i} has {c} channels; every stage needs at least one")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(reduced_width(c, self.divisor) for c in self.channels)

    @property
    def hidden(self) -> int:
        return reduced_width(self.head_hidden, self.divisor)

    @property
    def feature_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**{**d, "channels": tuple(d["channels"]), "strides": tuple(d["strides"])})


@dataclass(frozen=True)
class RoI:
    """Axis-aligned box ``[x0, x1) x [y0, y1)`` on image ``batch_index``."""

    x0: float
    y0: float
    x1: float
    y1: float
    batch_index: int = 0

    def scaled(self, factor: float) -> "RoI":
        return RoI(self.x0 * factor, self.y0 * factor, self.x1 * factor, self.y1 * factor, self.batch_index)

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1])


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Backbone:
    """Stack of 3x3 conv + ReLU stages; the last activation is the mimic feature map."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=nc.DTYPE):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0])
        self.params: dict[str, Node] = {}
        c_in = cfg.in_channels
        for i, c in enumerate(cfg.stage_channels):
            self.params[f"conv{i}.weight"] = nc.parameter(_he(rng, (c, c_in, 3, 3), c_in * 9, dtype), f"conv{i}.weight")
            self.params[f"conv{i}.bias"] = nc.parameter(np.zeros(c, dtype), f"conv{i}.bias")
            c_in = c

    def __call__(self, images: Node, scheme: QuantizationScheme | None = None) -> Node:
        """Feature map for a batch ``[N,1,H,W]``; ``scheme`` quantizes the final activation."""
        x = images if self.cfg.input_scale == 1.0 else nc.scale(images, self.cfg.input_scale)
        last = len(self.cfg.stage_channels) - 1
        for i, s in enumerate(self.cfg.strides):
            x = nc.conv2d(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], stride=s, pad=1)
            x = quantized_relu(x, scheme) if (i == last and scheme is not None) else nc.relu(x)
        return x


def build_backbone(cfg: BackboneConfig, seed: int = 0, dtype=nc.DTYPE) -> Backbone:
    return Backbone(cfg, seed, dtype)


class Adapter:
    """Learned 1x1 convolution mapping student channels onto teacher channels."""

    def __init__(self, in_channels: int, out_channels: int, seed: int = 0, enabled: bool = True,
                 identity_init: bool = False, dtype=nc.DTYPE):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.enabled = enabled
        if not enabled and in_channels != out_channels:
            raise ValueError("a disabled adapter needs matching channel counts")
        if identity_init:
            if in_channels != out_channels:
                raise ValueError("identity init needs a square adapter")
            w = np.eye(in_channels, dtype=dtype)[:, :, None, None]
        else:
            rng = np.random.default_rng([seed, 1])
            w = _he(rng, (out_channels, in_channels, 1, 1), in_channels, dtype)
        self.params = {
            "adapter.weight": nc.parameter(w, "adapter.weight"),
            "adapter.bias": nc.parameter(np.zeros(out_channels, dtype), "adapter.bias"),
        }

    def __call__(self, fm: Node) -> Node:
        if fm.shape[1] != self.in_channels:
            raise ShapeError(f"adapter expects {self.in_channels} input channels, got {fm.shape[1]}")
        if not self.enabled:
            return fm
        return nc.conv2d(fm, self.params["adapter.weight"], self.params["adapter.bias"])


def adapter_r(student_fm: Node, adapter: Adapter, teacher_fm_shape: tuple[int, ...] | None = None) -> Node:
    """Map a student feature map to teacher size; spatial sizes must already agree."""
    if teacher_fm_shape is not None:
        if tuple(student_fm.shape[2:]) != tuple(teacher_fm_shape[2:]):
            raise ShapeError(
                f"student feature map is {student_fm.shape[2:]} but teacher is {tuple(teacher_fm_shape[2:])}; "
                "backbones must share their downsample factor"
            )
        if adapter.out_channels != teacher_fm_shape[1]:
            raise ShapeError(f"adapter outputs {adapter.out_channels} channels, teacher has {teacher_fm_shape[1]}")
    return adapter(student_fm)


def rois_to_array(rois) -> np.ndarray:
    """``[R, 5]`` float array of (x0, y0, x1, y1, batch_index)."""
    if isinstance(rois, np.ndarray):
        return rois.reshape(-1, 5).astype(np.float64)
    return np.array([[r.x0, r.y0, r.x1, r.y1, r.batch_index] for r in rois], dtype=np.float64).reshape(-1, 5)


def roi_cells(rois, height: int, width: int) -> np.ndarray:
    """Integer cell ranges ``[xs, ys, xe, ye]`` per RoI (half-open, at least one cell)."""
    a = rois_to_array([rois] if isinstance(rois, RoI) else rois)
    xs = np.clip(np.floor(a[:, 0]), 0, width - 1).astype(np.intp)
    ys = np.clip(np.floor(a[:, 1]), 0, height - 1).astype(np.intp)
    xe = np.minimum(np.maximum(np.ceil(a[:, 2]).astype(np.intp), xs + 1), width)
    ye = np.minimum(np.maximum(np.ceil(a[:, 3]).astype(np.intp), ys + 1), height)
    return np.stack([xs, ys, xe, ye], axis=1)


def _bin_edges(lo: np.ndarray, hi: np.ndarray, out: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal subdivision of ``[lo, hi)`` into ``out`` integer bins, each at least one cell."""
    span = (hi - lo)[:, None]
    j = np.arange(out)[None, :]
    start = lo[:, None] + (j * span) // out
    stop = lo[:, None] - ((-(j + 1) * span) // out)
    return start, np.maximum(stop, start + 1)


@dataclass(frozen=True)
class RoIBins:
    """Cell indices of every (RoI, bin), reusable across feature maps of one size."""

    batch: np.ndarray  # [R]
    index: np.ndarray  # [R*out*out, L] flat cell index, padded with height*width
    out_size: int
    height: int
    width: int

    @classmethod
    def build(cls, rois, height: int, width: int, out_size: int) -> "RoIBins":
        a = rois_to_array(rois)
        cells = roi_cells(a, height, width)
        y0, y1 = _bin_edges(cells[:, 1], cells[:, 3], out_size)
        x0, x1 = _bin_edges(cells[:, 0], cells[:, 2], out_size)
        hm = int((y1 - y0).max(initial=1))
        wm = int((x1 - x0).max(initial=1))
        dy = np.arange(hm)[None, None, None, :, None]
        dx = np.arange(wm)[None, None, None, None, :]
        yy = y0[:, :, None, None, None] + dy
        xx = x0[:, None, :, None, None] + dx
        valid = (yy < y1[:, :, None, None, None]) & (xx < x1[:, None, :, None, None])
        flat = np.where(valid, yy * width + xx, height * width)
        # rows follow row-major scan inside each bin, so argmax picks the first maximum
        index = flat.reshape(len(a) * out_size * out_size, hm * wm)
        return cls(a[:, 4].astype(np.intp), index, out_size, height, width)


def roi_bin_index(rois, height: int, width: int, out_size: int) -> np.ndarray:
    return RoIBins.build(rois, height, width, out_size).index


def roi_max_pool(fm: Node, rois, out_size: int = 3) -> Node:
    """Max-pool each RoI (feature-map coordinates) into an ``out_size`` square grid.

    ``rois`` is a list of ``RoI``, an ``[R, 5]`` array, or a prebuilt ``RoIBins``.
    Backward routes each bin's gradient to its argmax cell.
    """
    n, c, h, w = fm.shape
    bins = rois if isinstance(rois, RoIBins) else RoIBins.build(rois, h, w, out_size)
    if (bins.height, bins.width) != (h, w):
        raise ShapeError(f"RoI bins were built for a {bins.height}x{bins.width} map, got {h}x{w}")
    out_size = bins.out_size
    r = len(bins.batch)
    if r == 0:
        return Node(np.zeros((0, c, out_size, out_size), fm.value.dtype), (fm,),
                    lambda g: (np.zeros_like(fm.value),), name="roi_max_pool")
    if bins.batch.min() < 0 or bins.batch.max() >= n:
        raise ShapeError(f"RoI batch index out of range for a batch of {n}")
    index = bins.index
    padded = np.concatenate(
        [fm.value.reshape(n, c, h * w), np.full((n, c, 1), -np.inf, dtype=fm.value.dtype)], axis=2
    )
    rb = np.repeat(bins.batch, out_size * out_size)
    gathered = padded[rb[:, None], :, index]  # (R*bins, L, C)
    arg = np.argmax(gathered, axis=1)  # (R*bins, C)
    out = np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0, :]
    cell = np.take_along_axis(index, arg, axis=1)
    out = out.reshape(r, out_size, out_size, c).transpose(0, 3, 1, 2)
    lin = ((rb[:, None] * c + np.arange(c)[None, :]) * (h * w) + cell).ravel()

    def bw(g):
        gv = g.transpose(0, 2, 3, 1).reshape(-1)
        dx = np.bincount(lin, weights=gv, minlength=n * c * h * w)
        return (dx.reshape(n, c, h, w).astype(fm.value.dtype),)

    return Node(np.ascontiguousarray(out), (fm,), bw, name="roi_max_pool")


class DetectionHead:
    """flatten -> linear+ReLU -> (class logits over K+1, 4 box deltas)."""

    def __init__(self, in_features: int, hidden: int, num_classes: int, seed: int = 0, dtype=nc.DTYPE):
        rng = np.random.default_rng([seed, 2])
        self.num_classes = num_classes
        self.params = {
            "head.fc.weight": nc.parameter(_he(rng, (hidden, in_features), in_features, dtype), "head.fc.weight"),
            "head.fc.bias": nc.parameter(np.zeros(hidden, dtype), "head.fc.bias"),
            "head.cls.weight": nc.parameter((rng.standard_normal((num_classes + 1, hidden)) * 0.01).astype(dtype), "head.cls.weight"),
            "head.cls.bias": nc.parameter(np.zeros(num_classes + 1, dtype), "head.cls.bias"),
            "head.reg.weight": nc.parameter((rng.standard_normal((4, hidden)) * 0.001).astype(dtype), "head.reg.weight"),
            "head.reg.bias": nc.parameter(np.zeros(4, dtype), "head.reg.bias"),
        }

    def __call__(self, pooled: Node) -> tuple[Node, Node]:
        p = self.params
        flat = nc.reshape(pooled, (pooled.shape[0], -1))
        hidden = nc.relu(nc.linear(flat, p["head.fc.weight"], p["head.fc.bias"]))
        return (
            nc.linear(hidden, p["head.cls.weight"], p["head.cls.bias"]),
            nc.linear(hidden, p["head.reg.weight"], p["head.reg.bias"]),
        )


def detection_head(pooled: Node, head: DetectionHead) -> tuple[Node, Node]:
    return head(pooled)


@dataclass
class Detector:
    """Backbone + detection head; the unit that gets trained and checkpointed."""

    cfg: BackboneConfig
    seed: int = 0
    roi_size: int = 3
    scheme: QuantizationScheme | None = None
    dtype: type = nc.DTYPE
    backbone: Backbone = field(init=False)
    head: DetectionHead = field(init=False)

    def __post_init__(self):
        self.backbone = Backbone(self.cfg, self.seed, self.dtype)
        in_features = self.cfg.feature_channels * self.roi_size * self.roi_size
        self.head = DetectionHead(in_features, self.cfg.hidden, self.cfg.num_classes, self.seed, self.dtype)

    @property
    def params(self) -> dict[str, Node]:
        return {**self.backbone.params, **self.head.params}

    def features(self, images, quantized: bool = False) -> Node:
        if not isinstance(images, Node):
            images = nc.constant(np.asarray(images, dtype=self.dtype))
        if quantized and self.scheme is None:
            raise ValueError("quantized features requested but the model has no quantization scheme")
        return self.backbone(images, self.scheme if quantized else None)

    def detect(self, fm: Node, feature_rois) -> tuple[Node, Node, Node]:
        pooled = roi_max_pool(fm, feature_rois, self.roi_size)
        logits, deltas = self.head(pooled)
        return pooled, logits, deltas
