"""Training stages (teacher, quantized finetune, student), evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import numcore as nc
from .data import DetectionSample, assign_labels, iou_matrix, proposal_boxes
from .mimic import MimicConfig, joint_loss, matching_ratio, mimic_loss
from .nets import Adapter, BackboneConfig, Detector, RoIBins, roi_max_pool
from .numcore import NonFiniteError, ShapeError
from .quantize import QuantizationScheme, calibrate_uniform

log = logging.getLogger(__name__)

STAGES = (
    "teacher",
    "quantize-finetune",
    "student-scratch",
    "student-quant-only",
    "student-mimic-only",
    "student-qmimic",
    "student-mimic",
)
BOX_SCALE = np.array([0.1, 0.1, 0.2, 0.2])
CKPT_MAGIC = b"QMIM"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainRun:
    stage: str = "teacher"
    iterations: int = 1000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_at: float = 0.75
    mimic: MimicConfig = field(default_factory=lambda: MimicConfig(lam=0.0, quantize_teacher=False, quantize_student=False))
    seed: int = 0
    proposals_per_object: int = 4
    jitter: float = 0.3
    calib_images: int = 256
    quant_stride: float = 1.0
    quant_percentile: float = 99.0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")

    def lr_at(self, it: int) -> float:
        return self.lr if it < int(self.lr_drop_at * self.iterations) else self.lr * 0.1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict
    history: list = field(default_factory=list, compare=False, repr=False)

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig.from_dict(self.meta["backbone"])

    @property
    def scheme(self) -> QuantizationScheme | None:
        s = self.meta.get("scheme")
        return QuantizationScheme.from_dict(s) if s else None

    @property
    def mimic(self) -> MimicConfig | None:
        m = self.meta.get("mimic")
        if not m:
            return None
        return MimicConfig(
            lam=m["lam"],
            quantize_teacher=m["quantize_teacher"],
            quantize_student=m["quantize_student"],
            scheme=QuantizationScheme.from_dict(m["scheme"]),
            match_threshold=m["match_threshold"],
        )


def mimic_to_dict(cfg: MimicConfig) -> dict:
    return {
        "lam": cfg.lam,
        "quantize_teacher": cfg.quantize_teacher,
        "quantize_student": cfg.quantize_student,
        "scheme": cfg.scheme.to_dict(),
        "match_threshold": cfg.match_threshold,
    }


# --- model <-> checkpoint ---------------------------------------------------------


def load_tensors(params: dict[str, nc.Node], tensors: dict[str, np.ndarray]) -> None:
    for name, node in params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint has no tensor {name!r}")
        t = tensors[name]
        if t.shape != node.shape:
            raise CheckpointError(f"shape mismatch for tensor {name!r}: checkpoint {t.shape}, model {node.shape}")
        node.value = np.array(t, dtype=node.value.dtype)
        node.velocity = None
        node.grad = np.zeros_like(node.value)


def detector_from_checkpoint(ckpt: Checkpoint, cfg: BackboneConfig | None = None) -> Detector:
    """Rebuild a detector; ``cfg`` forces a config and triggers shape checks against it."""
    model = Detector(cfg or ckpt.backbone_config, roi_size=ckpt.meta.get("roi_size", 3), scheme=ckpt.scheme)
    load_tensors(model.params, ckpt.tensors)
    return model


def adapter_from_checkpoint(ckpt: Checkpoint) -> Adapter | None:
    if "adapter.weight" not in ckpt.tensors:
        return None
    w = ckpt.tensors["adapter.weight"]
    ad = Adapter(w.shape[1], w.shape[0])
    load_tensors(ad.params, ckpt.tensors)
    return ad


def make_checkpoint(model: Detector, stage: str, run: TrainRun, adapter: Adapter | None = None,
                    mimic: MimicConfig | None = None, history=None) -> Checkpoint:
    tensors = {k: v.value.copy() for k, v in model.params.items()}
    if adapter is not None:
        tensors.update({k: v.value.copy() for k, v in adapter.params.items()})
    meta = {
        "stage": stage,
        "backbone": model.cfg.to_dict(),
        "roi_size": model.roi_size,
        "scheme": model.scheme.to_dict() if model.scheme else None,
        "mimic": mimic_to_dict(mimic) if mimic else None,
        "iteration": run.iterations,
        "seed": run.seed,
    }
    return Checkpoint(tensors, meta, history or [])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(meta)) + meta)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            t = ckpt.tensors[name]
            key = name.encode()
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint reading {what} at offset {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0 (expected {CKPT_MAGIC!r})")
    version, mlen = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(take(mlen, "metadata").decode())
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "tensor name").decode()
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes at offset {pos}")
    return Checkpoint(tensors, meta)


# --- box coding ---------------------------------------------------------------------


def encode_boxes(proposals: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pw, ph = proposals[:, 2] - proposals[:, 0], proposals[:, 3] - proposals[:, 1]
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    d = np.stack(
        [
            (gt[:, 0] + gw / 2 - proposals[:, 0] - pw / 2) / pw,
            (gt[:, 1] + gh / 2 - proposals[:, 1] - ph / 2) / ph,
            np.log(gw / pw),
            np.log(gh / ph),
        ],
        axis=1,
    )
    return d / BOX_SCALE


def decode_boxes(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    d = deltas * BOX_SCALE
    pw, ph = proposals[:, 2] - proposals[:, 0], proposals[:, 3] - proposals[:, 1]
    cx = proposals[:, 0] + pw / 2 + d[:, 0] * pw
    cy = proposals[:, 1] + ph / 2 + d[:, 1] * ph
    w = pw * np.exp(np.clip(d[:, 2], -4, 4))
    h = ph * np.exp(np.clip(d[:, 3], -4, 4))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


# --- training ---------------------------------------------------------------------


@dataclass
class _Batch:
    images: np.ndarray
    rois: np.ndarray  # [R, 5] feature-map coordinates + batch index
    labels: np.ndarray
    fg: np.ndarray
    targets: np.ndarray


def _proposal_seed(sample: DetectionSample, salt: int) -> list[int]:
    return [zlib.crc32(sample.image.tobytes()), salt]


def _make_batch(samples, indices, run: TrainRun, salt: int, downsample: int) -> _Batch:
    rois, labels, targets = [], [], []
    for j, idx in enumerate(indices):
        smp = samples[idx]
        props = proposal_boxes(smp, run.proposals_per_object, run.jitter, [run.seed, salt, int(idx)])
        lab, best = assign_labels(props, smp)
        targets.append(encode_boxes(props, smp.boxes[best].astype(np.float64))[lab > 0])
        labels.append(lab)
        rois.append(np.concatenate([props / downsample, np.full((len(props), 1), j)], axis=1))
    labels = np.concatenate(labels)
    return _Batch(
        images=np.stack([samples[i].image for i in indices]),
        rois=np.concatenate(rois),
        labels=labels,
        fg=np.flatnonzero(labels > 0),
        targets=np.concatenate(targets).astype(np.float32),
    )


class _TeacherCache:
    """Frozen-teacher feature maps, computed once per training image."""

    def __init__(self, teacher: Detector, samples, quantized: bool):
        self.teacher = teacher
        self.samples = samples
        self.quantized = quantized
        self.maps: dict[int, np.ndarray] = {}

    def __call__(self, indices) -> np.ndarray:
        missing = [int(i) for i in indices if int(i) not in self.maps]
        if missing:
            fm = self.teacher.features(np.stack([self.samples[i].image for i in missing]), quantized=self.quantized).value
            for i, m in zip(missing, fm):
                self.maps[i] = m
        return np.stack([self.maps[int(i)] for i in indices])


def _fit(model: Detector, run: TrainRun, samples, quantize_features: bool = False,
         teacher: Detector | None = None, adapter: Adapter | None = None) -> list[dict]:
    if not samples:
        raise ValueError("training set is empty")
    cfg = run.mimic
    params = list(model.params.values()) + (list(adapter.params.values()) if adapter else [])
    order_rng = np.random.default_rng([run.seed, 3])
    cache = _TeacherCache(teacher, samples, cfg.quantize_teacher) if teacher is not None else None
    perm, cursor = order_rng.permutation(len(samples)), 0
    history = []
    ds = model.cfg.downsample
    for it in range(run.iterations):
        if cursor + run.batch_size > len(perm):
            perm, cursor = order_rng.permutation(len(samples)), 0
        idx = perm[cursor : cursor + run.batch_size]
        cursor += run.batch_size
        batch = _make_batch(samples, idx, run, it, ds)

        try:
            fm = model.features(batch.images, quantized=quantize_features)
            bins = RoIBins.build(batch.rois, fm.shape[2], fm.shape[3], model.roi_size)
            _, logits, deltas = model.detect(fm, bins)
            cls = nc.softmax_cross_entropy(logits, batch.labels)
            if len(batch.fg):
                reg = nc.smooth_l1(nc.take_rows(deltas, batch.fg), batch.targets)
            else:
                reg = nc.constant(np.zeros((), model.dtype))
            if cache is not None:
                tfm = cache(idx)
                if tfm.shape[2:] != fm.shape[2:]:
                    raise ShapeError(f"teacher feature map {tfm.shape[2:]} vs student {fm.shape[2:]}")
                t_rois = roi_max_pool(nc.constant(tfm), bins)
                s_rois = roi_max_pool(adapter(fm), bins)
                mim = mimic_loss(t_rois, s_rois, cfg)
            else:
                mim = nc.constant(np.zeros((), model.dtype))
            loss = joint_loss(cls, reg, mim, cfg.lam)
            record = {
                "iteration": it,
                "loss": float(loss.value),
                "cls": float(cls.value),
                "reg": float(reg.value),
                "mimic": float(mim.value),
            }
            if not all(math.isfinite(v) for v in record.values()):
                raise TrainingDiverged(it)
            history.append(record)
            nc.backward(loss)
        except NonFiniteError as exc:
            raise TrainingDiverged(it, "activation") from exc
        if run.grad_clip is not None:
            record["grad_norm"] = nc.clip_grad_norm(params, run.grad_clip)
        try:
            nc.sgd_step(params, run.lr_at(it), run.momentum, run.weight_decay)
        except NonFiniteError as exc:
            raise TrainingDiverged(it, "gradient") from exc
        if it % 200 == 0 or it == run.iterations - 1:
            log.info("%s it=%d loss=%.4f cls=%.4f reg=%.4f mimic=%.4f", run.stage, it, *list(record.values())[1:])
    return history


def train_teacher(run: TrainRun, samples, cfg: BackboneConfig, roi_size: int = 3) -> Checkpoint:
    """Full-precision teacher trained on detector losses only."""
    model = Detector(cfg, seed=run.seed, roi_size=roi_size)
    run = replace(run, mimic=replace(run.mimic, lam=0.0))
    history = _fit(model, run, samples)
    return make_checkpoint(model, "teacher", run, history=history)


def teacher_activations(model: Detector, samples, count: int) -> np.ndarray:
    images = np.stack([s.image for s in samples[:count]])
    return np.concatenate([model.features(images[i : i + 64]).value.ravel() for i in range(0, len(images), 64)])


def quantize_finetune(teacher: Checkpoint, run: TrainRun, samples, scheme: QuantizationScheme | None = None) -> Checkpoint:
    """Insert a quantized ReLU on the teacher's feature map and finetune the whole detector."""
    model = detector_from_checkpoint(teacher)
    if scheme is None:
        scheme = calibrate_uniform(teacher_activations(model, samples, run.calib_images), run.quant_stride, run.quant_percentile)
    model.scheme = scheme
    run = replace(run, mimic=replace(run.mimic, lam=0.0))
    history = _fit(model, run, samples, quantize_features=True)
    return make_checkpoint(model, "quantize-finetune", run, history=history)


def train_student(teacher: Checkpoint | None, run: TrainRun, samples, cfg: BackboneConfig, roi_size: int = 3,
                  quantized_features: bool = False) -> Checkpoint:
    """Train a width-reduced student with detector losses plus ``lam`` * RoI mimic loss.

    With ``teacher=None`` (or ``lam == 0``) this is plain training from
    scratch. ``run.mimic`` selects which sides of the mimic loss are
    quantized; the student's own feature map, which feeds its head, stays
    full precision unless ``quantized_features`` is set.
    """
    mcfg = run.mimic
    model = Detector(cfg, seed=run.seed, roi_size=roi_size, scheme=mcfg.scheme if quantized_features else None)
    tmodel = adapter = None
    if teacher is not None:
        tmodel = detector_from_checkpoint(teacher)
        if tmodel.cfg.downsample != cfg.downsample:
            raise ShapeError(
                f"teacher downsample {tmodel.cfg.downsample} != student downsample {cfg.downsample}; feature maps would not align"
            )
        if mcfg.quantize_teacher and tmodel.scheme is None:
            tmodel.scheme = mcfg.scheme
        adapter = Adapter(cfg.feature_channels, tmodel.cfg.feature_channels, seed=run.seed)
    history = _fit(model, run, samples, quantize_features=quantized_features, teacher=tmodel, adapter=adapter)
    return make_checkpoint(model, run.stage, run, adapter=adapter, mimic=mcfg if teacher is not None else None, history=history)


# --- evaluation ------------------------------------------------------------------


@dataclass
class Detections:
    boxes: np.ndarray  # [D, 4]
    classes: np.ndarray  # [D] foreground class ids (0-based)
    scores: np.ndarray  # [D]


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > threshold
    return np.asarray(keep, dtype=np.intp)


def toy_ap(predictions, samples, iou_threshold: float = 0.5) -> float:
    """Fraction of ground-truth objects matched one-to-one by a correct-class detection.

    Detections are visited in descending confidence; each takes the
    highest-IoU unmatched ground truth of its class above ``iou_threshold``.
    """
    matched = total = 0
    for det, smp in zip(predictions, samples):
        total += len(smp.boxes)
        if len(det.scores) == 0 or len(smp.boxes) == 0:
            continue
        taken = np.zeros(len(smp.boxes), dtype=bool)
        ious = iou_matrix(det.boxes, smp.boxes)
        for i in np.lexsort((np.arange(len(det.scores)), -det.scores)):
            cand = np.where((~taken) & (smp.classes == det.classes[i]) & (ious[i] >= iou_threshold), ious[i], -1.0)
            j = int(np.argmax(cand))
            if cand[j] >= 0:
                taken[j] = True
                matched += 1
    return matched / total if total else 0.0


@dataclass
class Metrics:
    toy_ap: float
    roi_accuracy: float
    mean_matching_ratio: float | None = None
    matching_ratios: list = field(default_factory=list, repr=False)


def evaluate(model: Checkpoint | Detector, samples, iou_threshold: float = 0.5, teacher: Checkpoint | None = None,
             quantized_inference: bool | None = None, proposals_per_object: int = 4, jitter: float = 0.3,
             nms_threshold: float = 0.5, chunk: int = 32) -> Metrics:
    """Detect on jittered proposals and score toy-AP; optionally teacher-student matching ratios.

    Proposal randomness is keyed on image content, so results do not depend
    on sample order. ``quantized_inference=None`` quantizes the feature map only
    for a quantize-finetuned teacher; students run at full precision.
    """
    ckpt = model if isinstance(model, Checkpoint) else None
    det = detector_from_checkpoint(ckpt) if ckpt else model
    adapter = adapter_from_checkpoint(ckpt) if ckpt else None
    mcfg = ckpt.mimic if ckpt else None
    tdet = detector_from_checkpoint(teacher) if teacher is not None else None
    if tdet is not None and mcfg is not None and mcfg.quantize_teacher and tdet.scheme is None:
        tdet.scheme = mcfg.scheme
    if quantized_inference is None:
        quantized_inference = ckpt is not None and ckpt.meta["stage"] == "quantize-finetune"
    ds = det.cfg.downsample
    predictions, ratios = [], []
    correct = seen = 0
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        boxes_img, owners, labels = [], [], []
        for j, smp in enumerate(part):
            props = proposal_boxes(smp, proposals_per_object, jitter, _proposal_seed(smp, 0))
            labels.append(assign_labels(props, smp)[0])
            boxes_img.append(props)
            owners.append(np.full(len(props), j))
        labels = np.concatenate(labels)
        owners = np.concatenate(owners)
        pbox = np.concatenate(boxes_img)
        images = np.stack([s.image for s in part])
        fm = det.features(images, quantized=quantized_inference)
        bins = RoIBins.build(np.concatenate([pbox / ds, owners[:, None]], axis=1), fm.shape[2], fm.shape[3], det.roi_size)
        _, logits, deltas = det.detect(fm, bins)
        z = logits.value.astype(np.float64)
        prob = np.exp(z - z.max(axis=1, keepdims=True))
        prob /= prob.sum(axis=1, keepdims=True)
        pred = prob.argmax(axis=1)
        correct += int(np.sum(pred == labels))
        seen += len(labels)
        boxes = decode_boxes(pbox, deltas.value.astype(np.float64))
        for j, smp in enumerate(part):
            sel = np.flatnonzero((owners == j) & (pred > 0))
            b, c, s = boxes[sel], pred[sel] - 1, prob[sel, pred[sel]]
            b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, smp.width)
            b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, smp.height)
            keep = []
            for k in np.unique(c):
                m = np.flatnonzero(c == k)
                keep.extend(m[nms(b[m], s[m], nms_threshold)])
            keep = np.sort(np.asarray(keep, dtype=np.intp))
            predictions.append(Detections(b[keep], c[keep], s[keep]))
        if tdet is not None and adapter is not None and mcfg is not None:
            ratios.extend(_matching_ratios(det, adapter, tdet, mcfg, images, bins))
    return Metrics(
        toy_ap=toy_ap(predictions, samples, iou_threshold),
        roi_accuracy=correct / seen if seen else 0.0,
        mean_matching_ratio=float(np.mean(ratios)) if ratios else None,
        matching_ratios=ratios,
    )


def _matching_ratios(student: Detector, adapter: Adapter, teacher: Detector, mcfg: MimicConfig, images, bins):
    tfm = teacher.features(images, quantized=mcfg.quantize_teacher)
    sfm = student.features(images, quantized=student.scheme is not None)
    t = mcfg.teacher_transform(roi_max_pool(tfm, bins).value)
    s = mcfg.student_transform(roi_max_pool(adapter(sfm), bins)).value
    return [matching_ratio(a, b, mcfg.match_threshold) for a, b in zip(t, s)]


def quantized_feature_values(ckpt: Checkpoint, samples) -> np.ndarray:
    model = detector_from_checkpoint(ckpt)
    return model.features(np.stack([s.image for s in samples]), quantized=True).value


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0

