"""Sliding-window reference detector and the pluggable detector contract.

The hard-box training loop only needs an object satisfying `DetectorBackend`:
train a model on (image, annotations) pairs with an optional per-view
augmentation hook, run inference returning confidence-scored class boxes,
and save/load checkpoints. The bundled `ReferenceDetector` is a classical
implementation of that contract: dense square windows at three scales,
per-window intensity statistics plus an edge-strength histogram, and a
regularized softmax classifier fit by full-batch gradient descent with
hard-negative window sampling. It is deliberately small so the full
training loop runs at desk scale, deterministically.

Checkpoint format (little-endian): magic "FDET", u32 format version,
u32 JSON header length, header bytes (class list, hyperparameters,
metadata, shapes), u32 float count, then f64 values packing the weight
matrix followed by the feature mean and scale vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .boxes import HARD_SAMPLE, LESION, Annotation, BoundingBox, Detection, nms, nms_arrays
from .imgcore import GrayImage, gradient_magnitude, histogram_equalize, normalize01
from .rng import derive_seed, permutation

__all__ = [
    "TrainingError",
    "InferenceError",
    "CheckpointError",
    "DetectorHyper",
    "DetectorModel",
    "DetectorBackend",
    "ReferenceDetector",
    "train",
    "infer",
    "nms",
    "save_model",
    "load_model",
    "extract_features",
]

Dataset = Sequence[tuple[GrayImage, Sequence[Annotation]]]
Augmenter = Callable[[GrayImage, int], GrayImage]

CHECKPOINT_MAGIC = b"FDET"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class InferenceError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorHyper:
    """Window, feature, and optimizer settings of the reference detector."""

    window_sizes: tuple[int, ...] = (40, 64, 96)
    stride: int = 8
    edge_bins: int = 8
    iou_positive: float = 0.5
    iou_background: float = 0.1
    nms_iou: float = 0.5
    learning_rate: float = 0.5
    gd_iters: int = 250
    l2: float = 1e-4
    epochs: int = 3
    bg_per_image: int = 120
    hard_bg_per_image: int = 40
    gaussian_sigma: float = 1.0

    def __post_init__(self):
        if not self.window_sizes or any(s < 4 for s in self.window_sizes):
            raise ValueError("window_sizes must be non-empty with sides >= 4")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.edge_bins < 2:
            raise ValueError("edge_bins must be >= 2")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in (0, 1]")
        if self.epochs < 1 or self.gd_iters < 1:
            raise ValueError("epochs and gd_iters must be >= 1")


@dataclass(frozen=True)
class DetectorModel:
    """Trained window classifier; immutable and safe to share across threads."""

    classes: tuple[str, ...]
    hyper: DetectorHyper
    weights: np.ndarray  # (1 + len(classes), n_features + 1); row 0 is background
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    round: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("weights", "feature_mean", "feature_scale"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.classes:
            raise ValueError("class list must be non-empty")


class DetectorBackend(Protocol):
    """Contract the training loop relies on; adapt external detectors to this."""

    def train(self, dataset: Dataset, augmenter: Optional[Augmenter], seed: int, round_index: int = 0): ...

    def infer(self, model, img: GrayImage, min_confidence: float) -> list[Detection]: ...

    def save(self, model, path) -> None: ...

    def load(self, path): ...


# --- features ---------------------------------------------------------------


@lru_cache(maxsize=32)
def _window_grid(width: int, height: int, window_sizes: tuple[int, ...], stride: int) -> np.ndarray:
    """All (x_min, y_min, x_max, y_max) windows of each scale, row-major order."""
    parts = []
    for size in window_sizes:
        if size > width or size > height:
            continue
        xs = np.arange(0, width - size + 1, stride, dtype=np.int64)
        ys = np.arange(0, height - size + 1, stride, dtype=np.int64)
        gx, gy = np.meshgrid(xs, ys)
        boxes = np.stack([gx.ravel(), gy.ravel(), gx.ravel() + size, gy.ravel() + size], axis=1)
        parts.append(boxes)
    if not parts:
        return np.empty((0, 4), dtype=np.int64)
    return np.concatenate(parts, axis=0)


def _integral(a: np.ndarray) -> np.ndarray:
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=s[1:, 1:])
    return s


def _window_sums(sat: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return sat[y2, x2] - sat[y1, x2] - sat[y2, x1] + sat[y1, x1]


def extract_features(img: GrayImage, hyper: DetectorHyper) -> tuple[np.ndarray, np.ndarray]:
    """Window boxes and per-window features for one image.

    Features are computed on the equalized image: mean and standard
    deviation of intensity (scaled to [0, 1]) plus an `edge_bins`-bin
    histogram of the normalized edge strength, as area fractions. Integral
    images make the cost independent of window size.
    """
    boxes = _window_grid(img.width, img.height, hyper.window_sizes, hyper.stride)
    equalized = histogram_equalize(img)
    intensity = equalized.pixels.astype(np.float64) / 255.0
    edge = normalize01(gradient_magnitude(equalized, hyper.gaussian_sigma)).values
    bin_idx = np.minimum((edge * hyper.edge_bins).astype(np.int64), hyper.edge_bins - 1)

    sat_i = _integral(intensity)
    sat_i2 = _integral(intensity * intensity)
    sat_bins = [_integral((bin_idx == b).astype(np.float64)) for b in range(hyper.edge_bins)]

    area = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).astype(np.float64)
    mean = _window_sums(sat_i, boxes) / area
    var = np.clip(_window_sums(sat_i2, boxes) / area - mean * mean, 0.0, None)
    feats = np.empty((boxes.shape[0], 2 + hyper.edge_bins), dtype=np.float64)
    feats[:, 0] = mean
    feats[:, 1] = np.sqrt(var)
    for b in range(hyper.edge_bins):
        feats[:, 2 + b] = _window_sums(sat_bins[b], boxes) / area
    return boxes, feats


def _pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    ax1, ay1, ax2, ay2 = (a[:, i : i + 1].astype(np.float64) for i in range(4))
    bx1, by1, bx2, by2 = (b[None, :, i].astype(np.float64) for i in range(4))
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    return inter / (area_a + area_b - inter)


def _assign_labels(boxes: np.ndarray, anns: Sequence[Annotation], hyper: DetectorHyper) -> np.ndarray:
    """-1 ignore, 0 background, 1 lesion, 2 hard-sample, per window."""
    lesion = np.array([a.box.as_tuple() for a in anns if a.class_label == LESION], dtype=np.int64)
    hard = np.array([a.box.as_tuple() for a in anns if a.class_label == HARD_SAMPLE], dtype=np.int64)
    lesion = lesion.reshape(-1, 4)
    hard = hard.reshape(-1, 4)
    iou_lesion = _pairwise_iou(boxes, lesion).max(axis=1) if lesion.size else np.zeros(boxes.shape[0])
    iou_hard = _pairwise_iou(boxes, hard).max(axis=1) if hard.size else np.zeros(boxes.shape[0])
    labels = np.full(boxes.shape[0], -1, dtype=np.int64)
    labels[np.maximum(iou_lesion, iou_hard) < hyper.iou_background] = 0
    labels[iou_hard >= hyper.iou_positive] = 2
    labels[iou_lesion >= hyper.iou_positive] = 1
    return labels


# --- training ---------------------------------------------------------------


def _validate_dataset(dataset: Dataset) -> tuple[bool, bool]:
    has_lesion = has_hard = False
    for i, (img, anns) in enumerate(dataset):
        for j, ann in enumerate(anns):
            if not ann.box.within(img.width, img.height):
                raise TrainingError(
                    f"annotation {j} of image {i} is outside the {img.width}x{img.height} raster"
                )
            has_lesion = has_lesion or ann.class_label == LESION
            has_hard = has_hard or ann.class_label == HARD_SAMPLE
    if not has_lesion:
        raise TrainingError("training requires at least one lesion annotation")
    return has_lesion, has_hard


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fit_softmax(x: np.ndarray, y: np.ndarray, n_classes: int, hyper: DetectorHyper):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    z = np.concatenate([(x - mean) / scale, np.ones((x.shape[0], 1))], axis=1)
    k = 1 + n_classes
    counts = np.bincount(y, minlength=k).astype(np.float64)
    present = counts > 0
    class_w = np.zeros(k)
    class_w[present] = y.size / (present.sum() * counts[present])
    sample_w = class_w[y]
    sample_w /= sample_w.sum()
    onehot = np.zeros((y.size, k))
    onehot[np.arange(y.size), y] = 1.0
    w = np.zeros((k, z.shape[1]))
    for _ in range(hyper.gd_iters):
        p = _softmax(z @ w.T)
        grad = ((p - onehot) * sample_w[:, None]).T @ z + 2.0 * hyper.l2 * w
        w -= hyper.learning_rate * grad
    return w, mean, scale


def train(
    dataset: Dataset,
    augmenter: Optional[Augmenter],
    hyper: DetectorHyper = DetectorHyper(),
    seed: int = 0,
    round_index: int = 0,
) -> DetectorModel:
    """Fit the window classifier on the dataset.

    The augmentation hook, when given, produces a fresh view of every image
    each epoch; hard negatives are re-mined from the background window pool
    between epochs. Training is deterministic in (dataset order, hyper,
    seed).
    """
    _, has_hard = _validate_dataset(dataset)
    classes = (LESION, HARD_SAMPLE) if has_hard else (LESION,)
    n_images = len(dataset)

    grids = []
    labels = []
    pos_idx = []
    bg_cand = []
    bg_sel = []
    for i, (img, anns) in enumerate(dataset):
        boxes = _window_grid(img.width, img.height, hyper.window_sizes, hyper.stride)
        if boxes.shape[0] == 0:
            raise TrainingError(f"image {i} ({img.width}x{img.height}) is smaller than every window")
        lab = _assign_labels(boxes, anns, hyper)
        grids.append(boxes)
        labels.append(lab)
        pos_idx.append(np.nonzero(lab > 0)[0])
        cand = np.nonzero(lab == 0)[0]
        bg_cand.append(cand)
        order = permutation(cand.size, derive_seed(seed, "bg-init", i))
        bg_sel.append(np.sort(cand[order[: hyper.bg_per_image]]))

    feats: list[np.ndarray | None] = [None] * n_images
    x_parts: list[np.ndarray] = []
    y_parts: list[np.ndarray] = []
    w = mean = scale = None
    for epoch in range(hyper.epochs):
        refresh = augmenter is not None or epoch == 0
        if refresh:
            for i, (img, _) in enumerate(dataset):
                view = augmenter(img, derive_seed(seed, "view", i, epoch)) if augmenter else img
                feats[i] = extract_features(view, hyper)[1]
            for i in range(n_images):
                rows = np.concatenate([pos_idx[i], bg_sel[i]])
                x_parts.append(feats[i][rows])
                y_parts.append(labels[i][rows])
        w, mean, scale = _fit_softmax(
            np.concatenate(x_parts), np.concatenate(y_parts), len(classes), hyper
        )
        if epoch == hyper.epochs - 1:
            break
        # mine the background windows the current model finds most object-like
        for i in range(n_images):
            cand = bg_cand[i]
            if cand.size == 0:
                continue
            z = np.concatenate(
                [(feats[i][cand] - mean) / scale, np.ones((cand.size, 1))], axis=1
            )
            objectness = 1.0 - _softmax(z @ w.T)[:, 0]
            order = np.argsort(-objectness, kind="stable")
            chosen = []
            selected = set(bg_sel[i].tolist())
            for idx in cand[order]:
                if int(idx) not in selected:
                    chosen.append(int(idx))
                    if len(chosen) == hyper.hard_bg_per_image:
                        break
            if not chosen:
                continue
            chosen_arr = np.array(sorted(chosen), dtype=np.int64)
            bg_sel[i] = np.sort(np.concatenate([bg_sel[i], chosen_arr]))
            if augmenter is None:
                x_parts.append(feats[i][chosen_arr])
                y_parts.append(np.zeros(chosen_arr.size, dtype=np.int64))
    return DetectorModel(classes, hyper, w, mean, scale, round=round_index, seed=seed)


def infer(model: DetectorModel, img: GrayImage, min_confidence: float = 0.0) -> list[Detection]:
    """Score all windows and return per-class detections after NMS.

    Detections are sorted by descending confidence; every confidence is
    >= min_confidence. Hard-sample detections are returned as well; callers
    decide whether to discard them.
    """
    if not 0.0 <= min_confidence <= 1.0:
        raise InferenceError(f"min_confidence must lie in [0, 1], got {min_confidence}")
    if img.width < min(model.hyper.window_sizes) or img.height < min(model.hyper.window_sizes):
        raise InferenceError(
            f"image {img.width}x{img.height} is smaller than the smallest trained window"
        )
    boxes, feats = extract_features(img, model.hyper)
    z = np.concatenate(
        [(feats - model.feature_mean) / model.feature_scale, np.ones((feats.shape[0], 1))], axis=1
    )
    probs = _softmax(z @ model.weights.T)
    cand_boxes = []
    cand_scores = []
    cand_class = []
    for k, label in enumerate(model.classes, start=1):
        keep = probs[:, k] >= min_confidence
        if not keep.any():
            continue
        cand_boxes.append(boxes[keep])
        cand_scores.append(probs[keep, k])
        cand_class.append(np.full(int(keep.sum()), k - 1, dtype=np.int64))
    if not cand_boxes:
        return []
    all_boxes = np.concatenate(cand_boxes)
    all_scores = np.concatenate(cand_scores)
    all_class = np.concatenate(cand_class)
    kept = nms_arrays(all_boxes, all_scores, all_class, model.hyper.nms_iou)
    dets = [
        Detection(
            BoundingBox(*(int(v) for v in all_boxes[i])),
            model.classes[int(all_class[i])],
            float(all_scores[i]),
        )
        for i in kept
    ]
    return dets


# --- checkpoints ------------------------------------------------------------


def save_model(model: DetectorModel, path) -> None:
    header = {
        "classes": list(model.classes),
        "hyper": asdict(model.hyper),
        "n_features": int(model.feature_mean.size),
        "round": model.round,
        "seed": model.seed,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    floats = np.concatenate([model.weights.ravel(), model.feature_mean, model.feature_scale])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", floats.size))
        fh.write(floats.astype("<f8").tobytes())


def load_model(path) -> DetectorModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a detector checkpoint: magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        (n_floats,) = struct.unpack("<I", fh.read(4))
        floats = np.frombuffer(fh.read(8 * n_floats), dtype="<f8").astype(np.float64)
    classes = tuple(header["classes"])
    hyper_kwargs = dict(header["hyper"])
    hyper_kwargs["window_sizes"] = tuple(hyper_kwargs["window_sizes"])
    hyper = DetectorHyper(**hyper_kwargs)
    d = int(header["n_features"])
    k = 1 + len(classes)
    expected = k * (d + 1) + 2 * d
    if floats.size != expected:
        raise CheckpointError(f"checkpoint holds {floats.size} floats, expected {expected}")
    weights = floats[: k * (d + 1)].reshape(k, d + 1)
    mean = floats[k * (d + 1) : k * (d + 1) + d]
    scale = floats[k * (d + 1) + d :]
    return DetectorModel(classes, hyper, weights, mean, scale, round=header["round"], seed=header["seed"])


@dataclass(frozen=True)
class ReferenceDetector:
    """Bundled classical detector satisfying `DetectorBackend`."""

    hyper: DetectorHyper = DetectorHyper()

    def train(self, dataset: Dataset, augmenter: Optional[Augmenter], seed: int, round_index: int = 0):
        return train(dataset, augmenter, self.hyper, seed, round_index)

    def infer(self, model: DetectorModel, img: GrayImage, min_confidence: float) -> list[Detection]:
        return infer(model, img, min_confidence)

    def save(self, model: DetectorModel, path) -> None:
        save_model(model, path)

    def load(self, path) -> DetectorModel:
        return load_model(path)
