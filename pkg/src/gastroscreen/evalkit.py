"""Box-level evaluation kit.

Greedy confidence-ordered matching of detections to ground-truth boxes,
precision/recall/F1 reporting, detection-threshold selection against a
target recall, patient-wise fold splitting, and the slope-parameter sweep
harness. All operations are pure and deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .boxes import LESION, Annotation, BoundingBox, Detection, iou
from .rng import permutation

__all__ = [
    "MatchResult",
    "MetricsReport",
    "XiSelection",
    "FoldSplit",
    "SweepRow",
    "SweepResult",
    "match_boxes",
    "compute_metrics",
    "select_xi",
    "metrics_at",
    "split_by_patient",
    "gamma_sweep",
    "write_csv_report",
    "iou",
]


@dataclass(frozen=True)
class MatchResult:
    """Matching outcome for one image.

    pairs holds (detection index, annotation index, IoU) tuples; unmatched
    detections are false positives and unmatched annotations are false
    negatives at the matching threshold.
    """

    pairs: tuple[tuple[int, int, float], ...]
    unmatched_detections: tuple[int, ...]
    unmatched_annotations: tuple[int, ...]
    iou_threshold: float


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    xi: float


@dataclass(frozen=True)
class XiSelection:
    xi: float
    report: MetricsReport
    target_met: bool


@dataclass(frozen=True)
class FoldSplit:
    """Patient id -> fold index in [0, k)."""

    assignments: dict[str, int]
    k: int

    def fold_of(self, patient: str) -> int:
        return self.assignments[patient]

    def patients_in(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignments.items() if f == fold)


def match_boxes(
    dets: Sequence[Detection],
    anns: Sequence[Annotation],
    iou_threshold: float,
) -> MatchResult:
    """Greedy one-to-one matching in descending confidence order.

    Each detection claims the unmatched annotation with the highest IoU,
    provided that IoU reaches the threshold; equal IoUs break toward the
    lower annotation index. Duplicate detections on one annotation become
    false positives.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken = [False] * len(anns)
    pairs = []
    unmatched_dets = []
    for i in order:
        best_j = -1
        best_iou = 0.0
        for j, ann in enumerate(anns):
            if taken[j]:
                continue
            overlap = iou(dets[i].box, ann.box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou = overlap
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            pairs.append((i, best_j, best_iou))
        else:
            unmatched_dets.append(i)
    unmatched_anns = [j for j, t in enumerate(taken) if not t]
    return MatchResult(tuple(pairs), tuple(unmatched_dets), tuple(unmatched_anns), iou_threshold)


def compute_metrics(matches: MatchResult | Iterable[MatchResult], xi: float) -> MetricsReport:
    """Precision/recall/F1 from one or many per-image match results.

    Empty denominators follow the zero convention: precision is 0 with no
    reported detections, recall is 0 with no annotations, and F1 is 0 unless
    both precision and recall are nonzero.
    """
    if isinstance(matches, MatchResult):
        matches = [matches]
    tp = fp = fn = 0
    for m in matches:
        tp += len(m.pairs)
        fp += len(m.unmatched_detections)
        fn += len(m.unmatched_annotations)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision and recall else 0.0
    return MetricsReport(precision, recall, f1, tp, fp, fn, xi)


PerImage = Sequence[tuple[Sequence[Detection], Sequence[Annotation]]]


def metrics_at(per_image: PerImage, xi: float, iou_threshold: float) -> MetricsReport:
    results = []
    for dets, anns in per_image:
        kept = [d for d in dets if d.class_label == LESION and d.confidence >= xi]
        results.append(match_boxes(kept, list(anns), iou_threshold))
    return compute_metrics(results, xi)


def select_xi(
    per_image: PerImage,
    target_recall: float,
    iou_threshold: float = 0.5,
) -> XiSelection:
    """Choose the largest detection threshold whose recall meets the target.

    Sweeps the distinct confidence values of the pooled lesion detections.
    If no threshold reaches the target, returns the smallest confidence
    (maximal recall) with target_met false; with no detections at all,
    returns xi = 0.
    """
    if not 0.0 < target_recall <= 1.0:
        raise ValueError(f"target_recall must be in (0, 1], got {target_recall}")
    confidences = sorted(
        {d.confidence for dets, _ in per_image for d in dets if d.class_label == LESION},
        reverse=True,
    )
    if not confidences:
        return XiSelection(0.0, metrics_at(per_image, 0.0, iou_threshold), False)
    for xi in confidences:
        report = metrics_at(per_image, xi, iou_threshold)
        if report.recall >= target_recall:
            return XiSelection(xi, report, True)
    xi = confidences[-1]
    return XiSelection(xi, metrics_at(per_image, xi, iou_threshold), False)


def _patient_ids(manifest) -> list[str]:
    records = getattr(manifest, "records", None)
    if records is not None:
        seen: dict[str, None] = {}
        for rec in records:
            seen.setdefault(rec.patient, None)
        return list(seen)
    return list(manifest)


def split_by_patient(manifest, k: int, seed: int) -> FoldSplit:
    """Shuffle patients by seed, then deal them round-robin into k folds.

    Accepts a dataset manifest or any iterable of patient ids; every image
    of a patient inherits the patient's fold.
    """
    patients = _patient_ids(manifest)
    if k < 1 or k > len(patients):
        raise ValueError(f"cannot split {len(patients)} patients into {k} folds")
    order = permutation(len(patients), seed)
    assignments = {patients[int(p)]: i % k for i, p in enumerate(order)}
    return FoldSplit(assignments, k)


@dataclass(frozen=True)
class SweepRow:
    gamma: float
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    best_gamma: float


def gamma_sweep(
    detector,
    gammas: Sequence[float],
    aug_cfg,
    train_set,
    validation_set,
    seed: int,
    xi: float = 0.5,
    iou_threshold: float = 0.5,
) -> SweepResult:
    """Train and evaluate once per sigmoid slope, everything else fixed.

    The same training seed is reused for every candidate so the rows differ
    only through the augmentation slope. Returns the per-slope metrics and
    the argmax-F1 slope (ties fall to the earlier candidate).
    """
    from .rsgaia import make_augmenter

    if not gammas:
        raise ValueError("gamma list must be non-empty")
    rows = []
    for gamma in gammas:
        augmenter = make_augmenter(replace(aug_cfg, gamma=float(gamma)))
        model = detector.train(train_set, augmenter, seed)
        per_image = [(detector.infer(model, img, xi), anns) for img, anns in validation_set]
        report = metrics_at(per_image, xi, iou_threshold)
        rows.append(SweepRow(float(gamma), report.precision, report.recall, report.f1))
    best = max(range(len(rows)), key=lambda i: (rows[i].f1, -i))
    return SweepResult(tuple(rows), rows[best].gamma)


def write_csv_report(path, header: Sequence[str], rows: Iterable[Sequence], config_hash: str | None = None) -> None:
    """CSV with documented header, UTF-8, LF endings; optional provenance line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
