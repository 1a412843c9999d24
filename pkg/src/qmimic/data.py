"""Synthetic shape-detection data: generation, proposals and the QMDS file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .nets import RoI

CLASS_NAMES = ("square", "disk", "triangle")
MAGIC = b"QMDS"
VERSION = 1
_PLACEMENT_TRIES = 50


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 64
    num_images: int = 100
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 0.15
    max_size: float = 0.4
    noise: float = 0.25
    seed: int = 0
    num_classes: int = len(CLASS_NAMES)

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ValueError("object sizes must satisfy 0 < min_size <= max_size <= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")


@dataclass
class DetectionSample:
    image: np.ndarray  # [1, H, W] float32
    classes: np.ndarray  # [M] int
    boxes: np.ndarray  # [M, 4] float32 (x0, y0, x1, y1), pixel edges
    proposals: list = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def __eq__(self, other):
        if not isinstance(other, DetectionSample):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.classes, other.classes)
            and np.array_equal(self.boxes, other.boxes)
        )


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def _shape_mask(cls: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if cls == 0:
        return np.ones((size, size), dtype=bool)
    if cls == 1:
        r = size / 2
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    # upward triangle: apex at top centre, base on the bottom edge
    half = size / 2
    return np.abs(xx - half) <= (yy / size) * half + 0.5


def _render(spec: DatasetSpec, index: int) -> DetectionSample:
    rng = np.random.default_rng([spec.seed, index])
    s = spec.image_size
    image = rng.standard_normal((s, s)) * spec.noise
    lo = max(2, int(round(spec.min_size * s)))
    hi = max(lo, int(round(spec.max_size * s)))
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[tuple[int, int, int, int]] = []
    classes: list[int] = []
    for k in range(count):
        cls = int(rng.integers(spec.num_classes))
        size = int(rng.integers(lo, hi + 1))
        intensity = rng.uniform(0.6, 1.0)
        for _ in range(_PLACEMENT_TRIES):
            x0 = int(rng.integers(0, s - size + 1))
            y0 = int(rng.integers(0, s - size + 1))
            box = (x0, y0, x0 + size, y0 + size)
            # keep a one-pixel gap between objects
            if all(box[0] >= b[2] + 1 or b[0] >= box[2] + 1 or box[1] >= b[3] + 1 or b[1] >= box[3] + 1 for b in boxes):
                break
        else:
            if boxes:
                continue
            raise RuntimeError("could not place the first object")  # unreachable: an empty image always fits one
        mask = _shape_mask(cls, size)
        image[box[1] : box[3], box[0] : box[2]][mask] = intensity
        boxes.append(box)
        classes.append(cls)
    return DetectionSample(
        image=image.astype(np.float32)[None],
        classes=np.array(classes, dtype=np.int64),
        boxes=np.array(boxes, dtype=np.float32).reshape(-1, 4),
    )


def generate(spec: DatasetSpec) -> list[DetectionSample]:
    """Deterministic dataset; image i depends only on ``(spec, i)``."""
    return [_render(spec, i) for i in range(spec.num_images)]


def proposal_boxes(sample: DetectionSample, per_object: int, jitter: float, seed) -> np.ndarray:
    """``[P, 4]`` proposal boxes: jittered ground truth followed by random background boxes.

    Centre and size are perturbed by up to ``jitter`` times the box size; all
    boxes are clipped to the image.
    """
    if per_object < 1:
        raise ValueError(f"per_object must be >= 1, got {per_object}")
    rng = np.random.default_rng(seed)
    h, w = sample.height, sample.width
    gt = sample.boxes.astype(np.float64)
    m = len(gt) * per_object
    src = np.repeat(gt, per_object, axis=0)
    bw, bh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    u = rng.uniform(-jitter, jitter, size=(m, 4))
    cx = src[:, 0] + bw / 2 + u[:, 0] * bw
    cy = src[:, 1] + bh / 2 + u[:, 1] * bh
    nw, nh = bw * (1 + u[:, 2]), bh * (1 + u[:, 3])
    fg = np.stack([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2], axis=1)
    size = rng.uniform(0.1, 0.45, size=(m, 2)) * min(h, w)
    x0 = rng.uniform(0, 1, size=m) * (w - size[:, 0])
    y0 = rng.uniform(0, 1, size=m) * (h - size[:, 1])
    bg = np.stack([x0, y0, x0 + size[:, 0], y0 + size[:, 1]], axis=1)
    return clip_boxes(np.concatenate([fg, bg]), w, h)


def clip_boxes(boxes: np.ndarray, w: int, h: int) -> np.ndarray:
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    b[:, 0] = np.clip(b[:, 0], 0, w - 1)
    b[:, 1] = np.clip(b[:, 1], 0, h - 1)
    b[:, 2] = np.clip(b[:, 2], 1, w)
    b[:, 3] = np.clip(b[:, 3], 1, h)
    b[:, 2] = np.where(b[:, 2] <= b[:, 0], np.minimum(w, b[:, 0] + 1), b[:, 2])
    b[:, 3] = np.where(b[:, 3] <= b[:, 1], np.minimum(h, b[:, 1] + 1), b[:, 3])
    return b


def make_proposals(sample: DetectionSample, per_object: int, jitter: float, seed) -> list[RoI]:
    """Proposals as ``RoI`` objects in image coordinates (see ``proposal_boxes``)."""
    return [RoI(*map(float, b)) for b in proposal_boxes(sample, per_object, jitter, seed)]


def assign_labels(rois, sample: DetectionSample, fg_iou: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Class label per proposal (0 = background, c+1 = class c) and index of its best ground truth."""
    if isinstance(rois, np.ndarray):
        boxes = rois.reshape(-1, 4)
    else:
        boxes = np.array([[r.x0, r.y0, r.x1, r.y1] for r in rois]).reshape(-1, 4)
    if len(sample.boxes) == 0 or len(boxes) == 0:
        return np.zeros(len(boxes), dtype=np.int64), np.zeros(len(boxes), dtype=np.int64)
    m = iou_matrix(boxes, sample.boxes)
    best = m.argmax(axis=1)
    labels = np.where(m[np.arange(len(boxes)), best] >= fg_iou, sample.classes[best] + 1, 0)
    return labels.astype(np.int64), best


# --- persistence ----------------------------------------------------------------


def save(samples, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(samples)))
        for smp in samples:
            _, h, w = smp.image.shape
            fh.write(struct.pack("<HH", h, w))
            fh.write(np.ascontiguousarray(smp.image, dtype="<f4").tobytes())
            fh.write(struct.pack("<H", len(smp.classes)))
            for cls, box in zip(smp.classes, smp.boxes):
                fh.write(struct.pack("<B", int(cls)))
                fh.write(np.asarray(box, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"truncated file: needed {n} bytes for {what} at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load(path) -> list[DetectionSample]:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    version, count = rd.unpack("<II", "header")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} at offset 4 (expected {VERSION})")
    samples = []
    for i in range(count):
        h, w = rd.unpack("<HH", f"sample {i} size")
        image = np.frombuffer(rd.take(4 * h * w, f"sample {i} pixels"), dtype="<f4").astype(np.float32).reshape(1, h, w)
        (m,) = rd.unpack("<H", f"sample {i} object count")
        classes, boxes = [], []
        for j in range(m):
            (cls,) = rd.unpack("<B", f"sample {i} object {j} class")
            boxes.append(np.frombuffer(rd.take(16, f"sample {i} object {j} box"), dtype="<f4"))
            classes.append(cls)
        samples.append(
            DetectionSample(image, np.array(classes, dtype=np.int64), np.array(boxes, dtype=np.float32).reshape(-1, 4))
        )
    if rd.pos != len(rd.buf):
        raise DatasetFormatError(f"{len(rd.buf) - rd.pos} trailing bytes at offset {rd.pos}")
    return samples
