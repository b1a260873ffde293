"""Flat key-value configuration files and provenance hashing.

A config file is plain text: one `key = value` per line, `#` comments and
blank lines ignored. Augmentation keys mirror the AugmentConfig fields;
detector, loop, and evaluation settings use `det_`, `hbbt_`, and `eval_`
prefixes. Ranges are comma pairs (`alpha_range = 0.9,1.0`), lists are comma
separated (`det_window_sizes = 40,64,96`), and the step table is
`bound:probability` pairs (`step_table = 0.2:0,0.6:0.5,1:1`).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .detector import DetectorHyper
from .hbbt import HbbtConfig
from .rsgaia import AugmentConfig
from .synthgen import CorpusSpec

__all__ = [
    "ConfigError",
    "EvalSettings",
    "parse_kv_file",
    "parse_kv_text",
    "build_augment_config",
    "build_detector_hyper",
    "build_hbbt_config",
    "build_eval_settings",
    "build_corpus_spec",
    "config_hash",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSettings:
    xi: float = 0.5
    target_recall: float | None = None
    match_iou: float = 0.5
    folds: int = 5


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def parse_kv_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), source=str(path))


def _float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from exc


def _int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from exc


def _pair(key: str, value: str) -> tuple[float, float]:
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected 'low,high', got {value!r}")
    return (_float(key, parts[0]), _float(key, parts[1]))


def _int_list(key: str, value: str) -> tuple[int, ...]:
    return tuple(_int(key, p.strip()) for p in value.split(",") if p.strip())


def _step_table(key: str, value: str) -> tuple[tuple[float, float], ...]:
    pairs = []
    for chunk in value.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ":" not in chunk:
            raise ConfigError(f"{key}: expected 'bound:probability' pairs, got {chunk!r}")
        bound, _, prob = chunk.partition(":")
        pairs.append((_float(key, bound.strip()), _float(key, prob.strip())))
    if not pairs:
        raise ConfigError(f"{key}: table is empty")
    return tuple(pairs)


_AUG_KEYS = {
    "gamma": ("gamma", _float),
    "theta": ("theta", _float),
    "alpha_range": ("alpha_range", _pair),
    "beta_range": ("beta_range", _pair),
    "open_radius": ("open_radius", _int),
    "probability_mode": ("probability_mode", lambda k, v: v),
    "step_table": ("step_table", _step_table),
    "composition_mode": ("composition_mode", lambda k, v: v),
    "gaussian_sigma": ("gaussian_sigma", _float),
    "butterworth_cutoff": ("butterworth_cutoff", _float),
    "butterworth_order": ("butterworth_order", _int),
}

_DET_KEYS = {
    "det_window_sizes": ("window_sizes", _int_list),
    "det_stride": ("stride", _int),
    "det_edge_bins": ("edge_bins", _int),
    "det_iou_positive": ("iou_positive", _float),
    "det_iou_background": ("iou_background", _float),
    "det_nms_iou": ("nms_iou", _float),
    "det_learning_rate": ("learning_rate", _float),
    "det_gd_iters": ("gd_iters", _int),
    "det_l2": ("l2", _float),
    "det_epochs": ("epochs", _int),
    "det_bg_per_image": ("bg_per_image", _int),
    "det_hard_bg_per_image": ("hard_bg_per_image", _int),
}

_HBBT_KEYS = {
    "hbbt_tau_fp": ("tau_fp", _float),
    "hbbt_xi": ("xi_hard", _float),
    "hbbt_tau_dup": ("tau_dup", _float),
    "hbbt_max_rounds": ("max_rounds", _int),
    "hbbt_patience": ("patience", _int),
    "hbbt_per_image_cap": ("per_image_cap", _int),
}

_EVAL_KEYS = {
    "eval_xi": ("xi", _float),
    "eval_target_recall": ("target_recall", _float),
    "eval_match_iou": ("match_iou", _float),
    "eval_folds": ("folds", _int),
}

_SPEC_KEYS = {
    "image_size": ("image_size", lambda k, v: tuple(int(x) for x in _pair(k, v))),
    "patients": ("patients", _int),
    "images_per_patient": ("images_per_patient", _int),
    "lesion_fraction": ("lesion_fraction", _float),
    "lesion_size_range": ("lesion_size_range", lambda k, v: tuple(int(x) for x in _pair(k, v))),
    "fold_spacing_range": ("fold_spacing_range", _pair),
    "fold_amplitude_range": ("fold_amplitude_range", _pair),
    "base_level_range": ("base_level_range", _pair),
    "distractor_mix": (
        "distractor_mix",
        lambda k, v: tuple(_float(k, p.strip()) for p in v.split(",")),
    ),
    "distractors_per_image": (
        "distractors_per_image",
        lambda k, v: tuple(int(x) for x in _pair(k, v)),
    ),
    "noise_level": ("noise_level", _float),
    "master_seed": ("master_seed", _int),
    "val_patients": ("val_patients", _int),
    "test_patients": ("test_patients", _int),
}

ALL_KEYS = set(_AUG_KEYS) | set(_DET_KEYS) | set(_HBBT_KEYS) | set(_EVAL_KEYS)


def _build(values: dict[str, str], table: dict, cls, strict_unknown: bool = False):
    kwargs = {}
    for key, value in values.items():
        if key in table:
            field_name, conv = table[key]
            kwargs[field_name] = conv(key, value)
        elif strict_unknown:
            raise ConfigError(f"unknown key {key!r}")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def check_known_keys(values: dict[str, str]) -> None:
    unknown = sorted(set(values) - ALL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def build_augment_config(values: dict[str, str]) -> AugmentConfig:
    return _build(values, _AUG_KEYS, AugmentConfig)


def build_detector_hyper(values: dict[str, str]) -> DetectorHyper:
    return _build(values, _DET_KEYS, DetectorHyper)


def build_hbbt_config(values: dict[str, str]) -> HbbtConfig:
    cfg = _build(values, _HBBT_KEYS, HbbtConfig)
    # the loop matches validation boxes at the same IoU the evaluation uses
    if "eval_match_iou" in values:
        from dataclasses import replace

        cfg = replace(cfg, match_iou=_float("eval_match_iou", values["eval_match_iou"]))
    return cfg


def build_eval_settings(values: dict[str, str]) -> EvalSettings:
    return _build(values, _EVAL_KEYS, EvalSettings)


def build_corpus_spec(values: dict[str, str]) -> CorpusSpec:
    unknown = sorted(set(values) - set(_SPEC_KEYS))
    if unknown:
        raise ConfigError(f"unknown corpus spec keys: {', '.join(unknown)}")
    return _build(values, _SPEC_KEYS, CorpusSpec)


def config_hash(values: dict[str, str]) -> str:
    """sha256 over the canonical sorted key=value rendering."""
    canonical = "".join(f"{k}={values[k]}\n" for k in sorted(values))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
