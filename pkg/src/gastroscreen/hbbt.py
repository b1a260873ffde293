"""Recursive hard boundary box training.

Round 0 trains the detector on lesion annotations only. Each later round
runs inference over the training and control images, promotes confident
lesion detections that miss every ground-truth box to "hard-sample"
annotations, merges them into a per-image pool with IoU deduplication, and
retrains the two-class problem from scratch with the same seed. Validation
F1 (lesion class only, hard detections discarded) drives stopping: the loop
ends at the round cap or once `patience` rounds pass without strict
improvement, and the best round's model is returned.

Control images have no lesion annotations and are unusable by conventional
training, but they are fully eligible for mining; once a control image owns
hard boxes it joins the training set. Rounds are strictly sequential; state
changes only at round boundaries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .boxes import HARD_SAMPLE, LESION, Annotation, Detection, iou
from .detector import DetectorBackend
from .evalkit import compute_metrics, match_boxes, write_csv_report
from .imgcore import GrayImage
from .rng import derive_seed
from .synthgen import DatasetManifest, ManifestRecord, save_manifest

__all__ = [
    "HbbtConfig",
    "HbbtState",
    "RoundRow",
    "ROUND_LOG_HEADER",
    "training_seed",
    "mine_hard_boxes",
    "run_hbbt",
    "write_round_log",
    "save_hard_pool",
]

ImageSet = Sequence[tuple[GrayImage, Sequence[Annotation]]]

ROUND_LOG_HEADER = (
    "round",
    "train_hard_boxes_total",
    "new_hard_boxes",
    "validation_precision",
    "validation_recall",
    "validation_f1",
    "wall_seconds",
)


@dataclass(frozen=True)
class HbbtConfig:
    """Free parameters of the training loop.

    tau_fp: a lesion detection counts as a false positive when its IoU with
    every lesion annotation stays below this. xi_hard: minimum confidence
    for a false positive to be promoted (kept equal to the working detection
    threshold so exactly the reported false positives get mined). tau_dup:
    IoU at which a candidate duplicates an already-pooled hard box.
    """

    tau_fp: float = 0.5
    xi_hard: float = 0.5
    tau_dup: float = 0.7
    max_rounds: int = 10
    patience: int = 2
    per_image_cap: int = 8
    match_iou: float = 0.5

    def __post_init__(self):
        for name in ("tau_fp", "xi_hard", "tau_dup", "match_iou"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.per_image_cap < 1:
            raise ValueError("per_image_cap must be >= 1")


@dataclass(frozen=True)
class RoundRow:
    round: int
    hard_total: int
    new_hard: int
    precision: float
    recall: float
    f1: float
    wall_seconds: float


@dataclass
class HbbtState:
    round: int
    hard_pool: list[list[Annotation]]
    f1_history: list[tuple[int, float]]
    best_round: int
    best_model: object
    rows: list[RoundRow] = field(default_factory=list)
    round0_model: object = None


def training_seed(seed: int) -> int:
    """Seed handed to the detector each round; constant across rounds so a
    round with an unchanged training set reproduces the identical model."""
    return derive_seed(seed, "detector-train")


def mine_hard_boxes(
    detector: DetectorBackend,
    model,
    images: ImageSet,
    cfg: HbbtConfig,
    pool: Sequence[Sequence[Annotation]],
) -> list[list[Annotation]]:
    """New hard-sample annotations per image.

    Keeps lesion-class detections with confidence >= xi_hard whose IoU with
    every lesion annotation of the image stays below tau_fp, drops any that
    duplicate a pooled hard box at IoU >= tau_dup, and caps the survivors
    per image, highest confidence first. Control images (empty lesion list)
    participate like any other.
    """
    new: list[list[Annotation]] = []
    for (img, anns), pooled in zip(images, pool):
        lesion_boxes = [a.box for a in anns if a.class_label == LESION]
        kept: list[Annotation] = []
        for det in detector.infer(model, img, cfg.xi_hard):
            if det.class_label != LESION:
                continue
            if any(iou(det.box, b) >= cfg.tau_fp for b in lesion_boxes):
                continue
            if any(iou(det.box, p.box) >= cfg.tau_dup for p in pooled):
                continue
            kept.append(Annotation(det.box, HARD_SAMPLE))
            if len(kept) == cfg.per_image_cap:
                break
        new.append(kept)
    return new


def _validation_f1(detector, model, validation_set: ImageSet, cfg: HbbtConfig):
    results = []
    for img, anns in validation_set:
        dets = [d for d in detector.infer(model, img, cfg.xi_hard) if d.class_label == LESION]
        lesion_anns = [a for a in anns if a.class_label == LESION]
        results.append(match_boxes(dets, lesion_anns, cfg.match_iou))
    return compute_metrics(results, cfg.xi_hard)


def run_hbbt(
    train_set: ImageSet,
    control_set: ImageSet,
    validation_set: ImageSet,
    detector: DetectorBackend,
    augmenter=None,
    cfg: HbbtConfig = HbbtConfig(),
    seed: int = 0,
    out_dir=None,
    measure_time: bool = True,
):
    """Run the loop; returns (best model, HbbtState).

    train_set entries must carry lesion annotations for round 0 to be
    trainable; control_set entries are mined only. When out_dir is given,
    per-round checkpoints land there as round_NNN.fdet. With
    measure_time=False the per-round wall_seconds column is written as 0.0
    so emitted logs are byte-reproducible.
    """
    if not any(a.class_label == LESION for _, anns in train_set for a in anns):
        raise ValueError("train_set must contain at least one lesion annotation")
    if not any(a.class_label == LESION for _, anns in validation_set for a in anns):
        raise ValueError("validation_set must contain at least one lesion annotation")

    mineable: list[tuple[GrayImage, Sequence[Annotation]]] = list(train_set) + list(control_set)
    pool: list[list[Annotation]] = [[] for _ in mineable]
    fit_seed = training_seed(seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state = HbbtState(round=0, hard_pool=pool, f1_history=[], best_round=0, best_model=None)
    best_f1 = -1.0
    stale = 0
    model = None
    new_total = -1  # sentinel: always train in round 0

    for rnd in range(cfg.max_rounds):
        t0 = time.perf_counter()
        if new_total != 0:
            training_images = []
            for (img, anns), pooled in zip(mineable, pool):
                merged = list(anns) + list(pooled)
                if merged:
                    training_images.append((img, merged))
            try:
                model = detector.train(training_images, augmenter, fit_seed, round_index=rnd)
            except Exception as exc:
                raise RuntimeError(f"training failed in round {rnd}: {exc}") from exc
        # else: no new hard boxes, so the training set is unchanged and the
        # same seed would reproduce the identical model; reuse it.
        report = _validation_f1(detector, model, validation_set, cfg)
        state.round = rnd
        state.f1_history.append((rnd, report.f1))
        if rnd == 0:
            state.round0_model = model
        if report.f1 > best_f1:
            best_f1 = report.f1
            state.best_round = rnd
            state.best_model = model
            stale = 0
        else:
            stale += 1
        if out is not None:
            detector.save(model, out / f"round_{rnd:03d}.fdet")

        stopping = rnd == cfg.max_rounds - 1 or stale >= cfg.patience
        new_total = 0
        if not stopping:
            new = mine_hard_boxes(detector, model, mineable, cfg, pool)
            for pooled, extra in zip(pool, new):
                pooled.extend(extra)
            new_total = sum(len(n) for n in new)
        wall = time.perf_counter() - t0 if measure_time else 0.0
        state.rows.append(
            RoundRow(
                rnd,
                sum(len(p) for p in pool) - new_total,
                new_total,
                report.precision,
                report.recall,
                report.f1,
                wall,
            )
        )
        if stopping:
            break
    return state.best_model, state


def write_round_log(path, rows: Sequence[RoundRow], config_hash: Optional[str] = None) -> None:
    """Round log CSV: one row per round with the documented header."""
    write_csv_report(
        path,
        ROUND_LOG_HEADER,
        [
            (
                r.round,
                r.hard_total,
                r.new_hard,
                f"{r.precision:.6f}",
                f"{r.recall:.6f}",
                f"{r.f1:.6f}",
                f"{r.wall_seconds:.3f}",
            )
            for r in rows
        ],
        config_hash,
    )


def save_hard_pool(
    path,
    image_ids: Sequence[str],
    sizes: Sequence[tuple[int, int]],
    pool: Sequence[Sequence[Annotation]],
) -> None:
    """Persist the hard pool as a dataset-manifest-shaped annotations file."""
    records = []
    for image_id, (width, height), pooled in zip(image_ids, sizes, pool):
        records.append(
            ManifestRecord(
                path=image_id,
                patient="",
                split="hard-pool",
                width=width,
                height=height,
                annotations=tuple(pooled),
            )
        )
    save_manifest(DatasetManifest(tuple(records)), path)
