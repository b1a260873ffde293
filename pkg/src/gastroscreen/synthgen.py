"""Deterministic synthetic corpus of fold-textured grayscale images.

Backgrounds are smooth, roughly parallel sinusoidal fold bands with
per-patient orientation, spacing, and contrast, plus additive noise.
Lesions are localized fold-disruption blobs (the bands break phase and
lose contrast inside an irregular support) annotated with tight boxes.
Distractor structures reproduce five classic false-positive patterns:
a straight high-contrast ridge, a converging band bundle, fine transverse
banding, a speckled texture patch, and a band-thickness step. Distractors
carry no annotations; they are recorded in a hidden debug channel so tests
can check where mined hard boxes land. Control images contain distractors
but no lesions.

Everything is keyed off the master seed through independent derived
streams, so the corpus is byte-reproducible and the background statistics
of control and lesion images share one distribution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .boxes import LESION, Annotation, BoundingBox
from .imgcore import GrayImage, write_png, read_png
from .rng import derive_seed, normal_field, uniform

__all__ = [
    "CATEGORIES",
    "CorpusSpec",
    "ManifestRecord",
    "DatasetManifest",
    "CorpusSummary",
    "ManifestError",
    "render_image",
    "generate_corpus",
    "describe_corpus",
    "save_manifest",
    "load_manifest",
    "load_split",
]

CATEGORIES = (
    "vertebral-ridge",
    "gathered-folds",
    "duodenal-banding",
    "speckled-mucosa",
    "wall-step",
)

SPLITS = ("train", "validation", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of the generated corpus; the master seed fixes all bytes."""

    image_size: tuple[int, int] = (512, 512)  # (width, height)
    patients: int = 10
    images_per_patient: int = 8
    lesion_fraction: float = 0.6
    lesion_size_range: tuple[int, int] = (40, 90)
    fold_spacing_range: tuple[float, float] = (18.0, 30.0)
    fold_amplitude_range: tuple[float, float] = (12.0, 26.0)
    base_level_range: tuple[float, float] = (105.0, 150.0)
    distractor_mix: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    distractors_per_image: tuple[int, int] = (1, 3)
    noise_level: float = 3.0
    master_seed: int = 20230
    val_patients: int = 2
    test_patients: int = 2

    def __post_init__(self):
        if self.patients < 0 or self.images_per_patient < 0:
            raise ValueError("patient and image counts must be >= 0")
        if not 0.0 <= self.lesion_fraction <= 1.0:
            raise ValueError("lesion_fraction must lie in [0, 1]")
        if self.lesion_size_range[0] < 8 or self.lesion_size_range[0] > self.lesion_size_range[1]:
            raise ValueError("lesion_size_range must be an increasing range of sides >= 8")
        if len(self.distractor_mix) != len(CATEGORIES):
            raise ValueError(f"distractor_mix needs {len(CATEGORIES)} weights")
        if abs(sum(self.distractor_mix) - 1.0) > 1e-9:
            raise ValueError("distractor_mix must sum to 1")
        if self.distractors_per_image[0] < 0 or self.distractors_per_image[0] > self.distractors_per_image[1]:
            raise ValueError("distractors_per_image must be an increasing non-negative range")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.patients and self.patients <= self.val_patients + self.test_patients:
            raise ValueError("need at least one training patient")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    patient: str
    split: str
    width: int
    height: int
    annotations: tuple[Annotation, ...]
    distractors: tuple[tuple[BoundingBox, str], ...] = ()


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    format_version: int = 1


@dataclass(frozen=True)
class CorpusSummary:
    images: int
    patients: int
    annotations: int
    per_split: dict[str, int]
    box_side_hist: dict[str, int]


def _lerp(lo: float, hi: float, u: float) -> float:
    return lo + (hi - lo) * u


def _has_lesion(spec: CorpusSpec, global_index: int) -> bool:
    # integer quota: exactly floor(n * fraction) lesion images, evenly interleaved
    f = spec.lesion_fraction
    return math.floor((global_index + 1) * f) > math.floor(global_index * f)


def _patch(center: tuple[float, float], radius: float, width: int, height: int):
    cx, cy = center
    x0 = max(0, int(math.floor(cx - radius)))
    x1 = min(width, int(math.ceil(cx + radius)) + 1)
    y0 = max(0, int(math.floor(cy - radius)))
    y1 = min(height, int(math.ceil(cy + radius)) + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return (slice(y0, y1), slice(x0, x1)), xs - cx, ys - cy


def _tight_box(weight: np.ndarray, sl: tuple[slice, slice], threshold: float = 0.02) -> BoundingBox:
    ys, xs = np.nonzero(weight > threshold)
    return BoundingBox(
        int(xs.min()) + sl[1].start,
        int(ys.min()) + sl[0].start,
        int(xs.max()) + sl[1].start + 1,
        int(ys.max()) + sl[0].start + 1,
    )


def _soft_disc(dx: np.ndarray, dy: np.ndarray, radius: float, edge: float = 4.0) -> np.ndarray:
    d = np.hypot(dx, dy)
    return np.clip((radius - d) / edge, 0.0, 1.0)


def _pick_center(seed: int, margin: float, width: int, height: int, avoid, min_dist: float):
    """Deterministic center draw with a few retries away from `avoid`."""
    for attempt in range(8):
        s = derive_seed(seed, "try", attempt)
        cx = _lerp(margin, width - margin, uniform(derive_seed(s, "x")))
        cy = _lerp(margin, height - margin, uniform(derive_seed(s, "y")))
        if avoid is None or math.hypot(cx - avoid[0], cy - avoid[1]) >= min_dist:
            return cx, cy
    return cx, cy


def render_image(spec: CorpusSpec, patient_idx: int, image_idx: int):
    """Render one image; returns (GrayImage, annotations, distractor boxes).

    Fully determined by (spec, patient index, image index); the per-patient
    band parameters are shared by all of a patient's images.
    """
    width, height = spec.image_size
    s_pat = derive_seed(spec.master_seed, "patient", patient_idx)
    angle = math.radians(_lerp(-25.0, 25.0, uniform(derive_seed(s_pat, "angle"))))
    spacing = _lerp(*spec.fold_spacing_range, uniform(derive_seed(s_pat, "spacing")))
    amplitude = _lerp(*spec.fold_amplitude_range, uniform(derive_seed(s_pat, "amplitude")))
    base = _lerp(*spec.base_level_range, uniform(derive_seed(s_pat, "base")))
    wobble_amp = spacing * _lerp(0.3, 0.7, uniform(derive_seed(s_pat, "wobble-amp")))
    wobble_len = height * _lerp(0.4, 1.0, uniform(derive_seed(s_pat, "wobble-len")))

    s_img = derive_seed(spec.master_seed, "image", patient_idx, image_idx)
    phase0 = 2.0 * math.pi * uniform(derive_seed(s_img, "phase"))
    base_jitter = _lerp(-8.0, 8.0, uniform(derive_seed(s_img, "base-jitter")))
    amp_jitter = _lerp(0.85, 1.15, uniform(derive_seed(s_img, "amp-jitter")))
    vignette = _lerp(6.0, 16.0, uniform(derive_seed(s_img, "vignette")))

    xs = np.arange(width, dtype=np.float64)[None, :]
    ys = np.arange(height, dtype=np.float64)[:, None]
    along = -math.sin(angle) * xs + math.cos(angle) * ys
    u_coord = math.cos(angle) * xs + math.sin(angle) * ys
    u_coord = u_coord + wobble_amp * np.sin(2.0 * math.pi * along / wobble_len)

    phase_field = np.full((height, width), phase0)
    amp_scale = np.full((height, width), amp_jitter)
    extra = np.zeros((height, width))

    annotations: list[Annotation] = []
    lesion_center = None
    lesion_reach = 0.0
    global_index = patient_idx * spec.images_per_patient + image_idx
    if _has_lesion(spec, global_index):
        s_les = derive_seed(s_img, "lesion")
        side = _lerp(*spec.lesion_size_range, uniform(derive_seed(s_les, "side")))
        r0 = side / 2.0
        margin = r0 * 1.45 + 6.0
        cx = _lerp(margin, width - margin, uniform(derive_seed(s_les, "cx")))
        cy = _lerp(margin, height - margin, uniform(derive_seed(s_les, "cy")))
        psi1 = 2.0 * math.pi * uniform(derive_seed(s_les, "psi1"))
        psi2 = 2.0 * math.pi * uniform(derive_seed(s_les, "psi2"))
        lift = _lerp(10.0, 22.0, uniform(derive_seed(s_les, "lift")))
        sl, dx, dy = _patch((cx, cy), r0 * 1.45 + 4.0, width, height)
        phi = np.arctan2(dy, dx)
        rr = r0 * (1.0 + 0.22 * np.sin(2.0 * phi + psi1) + 0.14 * np.sin(3.0 * phi + psi2))
        w = np.clip(1.5 * (1.0 - np.hypot(dx, dy) / rr), 0.0, 1.0)
        phase_field[sl] += 2.6 * w
        amp_scale[sl] *= 1.0 - 0.45 * w
        extra[sl] += lift * w
        annotations.append(Annotation(_tight_box(w, sl), LESION))
        lesion_center = (cx, cy)
        lesion_reach = r0 * 1.45

    distractors: list[tuple[BoundingBox, str]] = []
    lo, hi = spec.distractors_per_image
    count = lo + int(uniform(derive_seed(s_img, "distractor-count")) * (hi - lo + 1))
    count = min(count, hi)
    mix = np.cumsum(spec.distractor_mix)
    for k in range(count):
        s_d = derive_seed(s_img, "distractor", k)
        cat = CATEGORIES[int(np.searchsorted(mix, uniform(derive_seed(s_d, "category")), side="right"))]
        radius = _lerp(26.0, 55.0, uniform(derive_seed(s_d, "radius")))
        center = _pick_center(
            derive_seed(s_d, "center"), radius + 6.0, width, height, lesion_center, lesion_reach + radius
        )
        sl, dx, dy = _patch(center, radius + 2.0, width, height)
        w = _soft_disc(dx, dy, radius)
        if cat == "vertebral-ridge":
            beta = math.radians(90.0 + _lerp(-12.0, 12.0, uniform(derive_seed(s_d, "beta"))))
            d_perp = -math.sin(beta) * dx + math.cos(beta) * dy
            d_along = math.cos(beta) * dx + math.sin(beta) * dy
            sigma = _lerp(2.5, 5.0, uniform(derive_seed(s_d, "sigma")))
            amp = _lerp(18.0, 30.0, uniform(derive_seed(s_d, "amp")))
            env = np.clip((radius - np.abs(d_along)) / 8.0, 0.0, 1.0)
            w = np.exp(-((d_perp / sigma) ** 2)) * env
            extra[sl] += amp * w
        elif cat == "gathered-folds":
            omega = 2.0 * math.pi * uniform(derive_seed(s_d, "omega"))
            xx = math.cos(omega) * dx + math.sin(omega) * dy
            local_spacing = spacing * _lerp(0.55, 0.85, uniform(derive_seed(s_d, "spacing")))
            m = 1.0 + 1.2 * (xx + radius) / (2.0 * radius)
            amp = _lerp(12.0, 22.0, uniform(derive_seed(s_d, "amp")))
            amp_scale[sl] *= 1.0 - 0.6 * w
            extra[sl] += w * amp * np.sin(2.0 * math.pi * xx * m / local_spacing)
        elif cat == "duodenal-banding":
            fine = _lerp(5.0, 9.0, uniform(derive_seed(s_d, "fine")))
            amp = _lerp(10.0, 18.0, uniform(derive_seed(s_d, "amp")))
            v_local = along[sl]
            amp_scale[sl] *= 1.0 - 0.3 * w
            extra[sl] += w * amp * np.sin(2.0 * math.pi * v_local / fine)
        elif cat == "speckled-mucosa":
            amp = _lerp(10.0, 18.0, uniform(derive_seed(s_d, "amp")))
            speck = normal_field(derive_seed(s_d, "speckle"), dy.shape[0], dx.shape[1])
            speck = ndimage.gaussian_filter(speck, 1.2, mode="nearest")
            amp_scale[sl] *= 1.0 - 0.7 * w
            extra[sl] += w * amp * speck * 2.2
        else:  # wall-step
            ramp = np.clip(dx / 6.0 + 0.5, 0.0, 1.0)
            amp_scale[sl] *= 1.0 - 0.25 * w
            phase_field[sl] += w * ramp * 0.8 * (2.0 * math.pi * u_coord[sl] / spacing)
        distractors.append((_tight_box(w, sl, 0.05), cat))

    folds = amplitude * amp_scale * np.sin(2.0 * math.pi * u_coord / spacing + phase_field)
    d2 = ((xs - width / 2.0) / width) ** 2 + ((ys - height / 2.0) / height) ** 2
    noise = normal_field(derive_seed(s_img, "noise"), height, width) * spec.noise_level
    img = base + base_jitter - 2.0 * vignette * d2 + folds + extra + noise
    raster = GrayImage(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    return raster, annotations, distractors


def _split_of(spec: CorpusSpec, patient_idx: int) -> str:
    n_train = spec.patients - spec.val_patients - spec.test_patients
    if patient_idx < n_train:
        return "train"
    if patient_idx < n_train + spec.val_patients:
        return "validation"
    return "test"


def generate_corpus(spec: CorpusSpec, out_dir) -> DatasetManifest:
    """Render the corpus under `out_dir` and write corpus/<patient>/<image>.png
    plus manifest.json; returns the manifest."""
    out = Path(out_dir)
    records = []
    for p in range(spec.patients):
        patient = f"p{p:03d}"
        pdir = out / "corpus" / patient
        pdir.mkdir(parents=True, exist_ok=True)
        for i in range(spec.images_per_patient):
            img, anns, distractors = render_image(spec, p, i)
            rel = f"corpus/{patient}/img_{i:03d}.png"
            write_png(out / rel, img)
            records.append(
                ManifestRecord(
                    path=rel,
                    patient=patient,
                    split=_split_of(spec, p),
                    width=img.width,
                    height=img.height,
                    annotations=tuple(anns),
                    distractors=tuple(distractors),
                )
            )
    manifest = DatasetManifest(tuple(records))
    save_manifest(manifest, out / "manifest.json")
    return manifest


# --- manifest I/O -----------------------------------------------------------


def _box_to_dict(box: BoundingBox) -> dict:
    return {"x_min": box.x_min, "y_min": box.y_min, "x_max": box.x_max, "y_max": box.y_max}


def save_manifest(manifest: DatasetManifest, path) -> None:
    payload = {
        "format_version": manifest.format_version,
        "records": [
            {
                "path": r.path,
                "patient": r.patient,
                "split": r.split,
                "width": r.width,
                "height": r.height,
                "annotations": [
                    {**_box_to_dict(a.box), "class_label": a.class_label} for a in r.annotations
                ],
                "distractors": [
                    {**_box_to_dict(b), "category": cat} for b, cat in r.distractors
                ],
            }
            for r in manifest.records
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_record(idx: int, raw: dict) -> ManifestRecord:
    try:
        width = int(raw["width"])
        height = int(raw["height"])
        anns = []
        for a in raw.get("annotations", []):
            box = BoundingBox(int(a["x_min"]), int(a["y_min"]), int(a["x_max"]), int(a["y_max"]))
            anns.append(Annotation(box, a.get("class_label", LESION)))
        distractors = []
        for d in raw.get("distractors", []):
            box = BoundingBox(int(d["x_min"]), int(d["y_min"]), int(d["x_max"]), int(d["y_max"]))
            distractors.append((box, d["category"]))
        rec = ManifestRecord(
            path=raw["path"],
            patient=raw["patient"],
            split=raw["split"],
            width=width,
            height=height,
            annotations=tuple(anns),
            distractors=tuple(distractors),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"record {idx}: {exc}") from exc
    for j, ann in enumerate(rec.annotations):
        if not ann.box.within(width, height):
            raise ManifestError(f"record {idx}: annotation {j} outside {width}x{height} bounds")
    return rec


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    records = [_parse_record(i, raw) for i, raw in enumerate(payload.get("records", []))]
    seen = set()
    for i, rec in enumerate(records):
        if rec.path in seen:
            raise ManifestError(f"record {i}: duplicate path {rec.path!r}")
        seen.add(rec.path)
    return DatasetManifest(tuple(records), format_version=int(payload.get("format_version", 1)))


def describe_corpus(manifest: DatasetManifest) -> CorpusSummary:
    """Counts and a box-size histogram for a manifest."""
    per_split = {s: 0 for s in SPLITS}
    hist = {"<=32": 0, "33-64": 0, "65-96": 0, "97-128": 0, ">128": 0}
    n_ann = 0
    patients = set()
    for rec in manifest.records:
        patients.add(rec.patient)
        per_split[rec.split] = per_split.get(rec.split, 0) + 1
        for ann in rec.annotations:
            n_ann += 1
            side = max(ann.box.x_max - ann.box.x_min, ann.box.y_max - ann.box.y_min)
            if side <= 32:
                hist["<=32"] += 1
            elif side <= 64:
                hist["33-64"] += 1
            elif side <= 96:
                hist["65-96"] += 1
            elif side <= 128:
                hist["97-128"] += 1
            else:
                hist[">128"] += 1
    return CorpusSummary(len(manifest.records), len(patients), n_ann, per_split, hist)


def load_split(manifest: DatasetManifest, base_dir, split: str | None = None):
    """(record, image) pairs for a split (or the whole corpus when None)."""
    base = Path(base_dir)
    out = []
    for rec in manifest.records:
        if split is not None and rec.split != split:
            continue
        out.append((rec, read_png(base / rec.path)))
    return out
