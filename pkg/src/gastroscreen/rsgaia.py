"""Stochastic gastric-fold image augmentation.

The pipeline enhances an X-ray image in four steps: per-pixel edge strength
from the equalized image, a probability map over edge strength, a sampled
binary fold mask cleaned by morphological opening, and a contrast/brightness
enhancement composed inside the mask. Each call with a fresh seed yields a
different enhancement, which is the point: it is an online augmentation for
detector training.

Two probability modes are supported: the refined continuous sigmoid over
edge strength, and the legacy step-table mode with discrete per-bucket
probabilities. Two composition modes are supported: `regional` (default),
which applies the alpha/beta enhancement inside the mask only, and
`literal`, which adds alpha on mask pixels and beta everywhere.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .imgcore import (
    BinaryMask,
    GrayImage,
    RealField,
    butterworth_highpass,
    gradient_magnitude,
    histogram_equalize,
    morphological_open,
    normalize01,
)
from .rng import derive_seed, uniform, uniform_field

__all__ = [
    "SIGMOID",
    "STEP_TABLE",
    "REGIONAL",
    "LITERAL",
    "DEFAULT_STEP_TABLE",
    "AugmentConfig",
    "edge_strength",
    "fold_probability",
    "fold_probability_field",
    "bernoulli_mask",
    "sample_fold_mask",
    "compose_enhanced",
    "augment",
    "make_augmenter",
]

SIGMOID = "sigmoid"
STEP_TABLE = "step-table"
REGIONAL = "regional"
LITERAL = "literal"

# Legacy staircase: five buckets rising over edge strength. The published
# discrete values were never stated, so this is a documented approximation
# of the general shape (near-deterministic at both extremes), not ground
# truth; supply step_table explicitly to reproduce a specific legacy setup.
DEFAULT_STEP_TABLE = ((0.2, 0.0), (0.4, 0.15), (0.6, 0.5), (0.8, 0.85), (1.0, 1.0))


@dataclass(frozen=True)
class AugmentConfig:
    """Parameters of the enhancement pipeline.

    gamma and theta shape the sigmoid probability (slope and 50% midpoint);
    alpha/beta ranges bound the per-call contrast and brightness draw;
    open_radius is the structuring-element radius of the mask cleanup.
    gaussian_sigma / butterworth_cutoff / butterworth_order are forwarded to
    the edge-strength primitives.
    """

    gamma: float = 4.0
    theta: float = 0.55
    alpha_range: tuple[float, float] = (0.9, 1.0)
    beta_range: tuple[float, float] = (-15.0, -5.0)
    open_radius: int = 1
    probability_mode: str = SIGMOID
    step_table: tuple[tuple[float, float], ...] = DEFAULT_STEP_TABLE
    composition_mode: str = REGIONAL
    gaussian_sigma: float = 1.0
    butterworth_cutoff: float = 0.05
    butterworth_order: int = 2

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        lo, hi = self.alpha_range
        if not (lo <= hi and 0.0 <= lo and hi <= 2.0):
            raise ValueError(f"alpha_range must be an interval within [0, 2], got {self.alpha_range}")
        lo, hi = self.beta_range
        if not (lo <= hi and -255.0 <= lo and hi <= 255.0):
            raise ValueError(f"beta_range must be an interval within [-255, 255], got {self.beta_range}")
        if self.open_radius < 1:
            raise ValueError(f"open_radius must be >= 1, got {self.open_radius}")
        if self.probability_mode not in (SIGMOID, STEP_TABLE):
            raise ValueError(f"unknown probability_mode {self.probability_mode!r}")
        if self.composition_mode not in (REGIONAL, LITERAL):
            raise ValueError(f"unknown composition_mode {self.composition_mode!r}")
        bounds = [b for b, _ in self.step_table]
        probs = [p for _, p in self.step_table]
        if not bounds or any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError("step_table bounds must be strictly increasing")
        if bounds[-1] != 1.0:
            raise ValueError("final step_table bound must be 1")
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("step_table probabilities must lie in [0, 1]")


def edge_strength(img: GrayImage, cfg: AugmentConfig = AugmentConfig()) -> RealField:
    """Mean of the normalized gradient magnitude and normalized high-pass
    response of the equalized image; values lie in [0, 1]."""
    equalized = histogram_equalize(img)
    grad = normalize01(gradient_magnitude(equalized, cfg.gaussian_sigma))
    high = normalize01(butterworth_highpass(equalized, cfg.butterworth_cutoff, cfg.butterworth_order))
    return RealField((grad.values + high.values) / 2.0, normalized=True)


def _step_lookup(e: float, table) -> float:
    bounds = [b for b, _ in table]
    idx = bisect.bisect_left(bounds, e)
    idx = min(idx, len(table) - 1)
    return table[idx][1]


def fold_probability(e: float, cfg: AugmentConfig = AugmentConfig()) -> float:
    """Probability that a pixel of edge strength e belongs to a fold edge.

    Sigmoid mode returns 1 / (1 + exp(-gamma * (e - theta))), so the
    probability at e = theta is exactly 0.5 and the curve is strictly
    increasing. Step-table mode returns the bucket value for e.
    """
    if not 0.0 <= e <= 1.0:
        raise ValueError(f"edge strength must lie in [0, 1], got {e}")
    if cfg.probability_mode == STEP_TABLE:
        return _step_lookup(e, cfg.step_table)
    return 1.0 / (1.0 + math.exp(-cfg.gamma * (e - cfg.theta)))


def fold_probability_field(e: RealField, cfg: AugmentConfig = AugmentConfig()) -> RealField:
    """Vectorized fold_probability over a normalized edge-strength field."""
    if not e.normalized:
        raise ValueError("edge-strength field must be tagged normalized")
    if cfg.probability_mode == STEP_TABLE:
        bounds = np.array([b for b, _ in cfg.step_table])
        probs = np.array([p for _, p in cfg.step_table])
        idx = np.minimum(np.searchsorted(bounds, e.values, side="left"), len(bounds) - 1)
        return RealField(probs[idx], normalized=True)
    return RealField(1.0 / (1.0 + np.exp(-cfg.gamma * (e.values - cfg.theta))), normalized=True)


def bernoulli_mask(p: RealField, seed: int) -> BinaryMask:
    """Pixel-by-pixel Bernoulli sample of a probability field (no cleanup).

    The draw at (x, y) depends only on (seed, x, y), so masks are
    reproducible under any iteration order.
    """
    if not p.normalized:
        raise ValueError("probability field must be tagged normalized")
    u = uniform_field(seed, p.height, p.width)
    return BinaryMask(u < p.values)


def sample_fold_mask(p: RealField, seed: int, cfg: AugmentConfig = AugmentConfig()) -> BinaryMask:
    """Sampled fold mask: Bernoulli draw then morphological opening."""
    return morphological_open(bernoulli_mask(p, seed), cfg.open_radius)


def compose_enhanced(
    equalized: GrayImage,
    mask: BinaryMask,
    alpha: float,
    beta: float,
    cfg: AugmentConfig = AugmentConfig(),
) -> GrayImage:
    """Compose the enhanced image from the equalized image and fold mask.

    `regional` mode rescales masked pixels as clamp(round(alpha * v + beta))
    and leaves the rest untouched; `literal` mode computes
    clamp(round(v + alpha * mask + beta)) everywhere.
    """
    if (mask.height, mask.width) != (equalized.height, equalized.width):
        raise ValueError(
            f"mask {mask.width}x{mask.height} does not match image {equalized.width}x{equalized.height}"
        )
    lo, hi = cfg.alpha_range
    if not lo <= alpha <= hi:
        raise ValueError(f"alpha {alpha} outside configured range {cfg.alpha_range}")
    lo, hi = cfg.beta_range
    if not lo <= beta <= hi:
        raise ValueError(f"beta {beta} outside configured range {cfg.beta_range}")
    v = equalized.pixels.astype(np.float64)
    if cfg.composition_mode == LITERAL:
        out = np.clip(np.rint(v + alpha * mask.values + beta), 0, 255)
    else:
        enhanced = np.clip(np.rint(alpha * v + beta), 0, 255)
        out = np.where(mask.values, enhanced, v)
    return GrayImage(out.astype(np.uint8))


def augment(img: GrayImage, cfg: AugmentConfig, seed: int) -> GrayImage:
    """Full enhancement pipeline; (img, cfg, seed) determines the output."""
    equalized = histogram_equalize(img)
    e = edge_strength(img, cfg)
    p = fold_probability_field(e, cfg)
    mask = sample_fold_mask(p, derive_seed(seed, "fold-mask"), cfg)
    a_lo, a_hi = cfg.alpha_range
    b_lo, b_hi = cfg.beta_range
    alpha = a_lo + uniform(derive_seed(seed, "alpha")) * (a_hi - a_lo)
    beta = b_lo + uniform(derive_seed(seed, "beta")) * (b_hi - b_lo)
    return compose_enhanced(equalized, mask, alpha, beta, cfg)


def make_augmenter(cfg: AugmentConfig) -> Callable[[GrayImage, int], GrayImage]:
    """Augmentation hook for detector training: (image, view seed) -> view."""

    def _augmenter(img: GrayImage, seed: int) -> GrayImage:
        return augment(img, cfg, seed)

    return _augmenter
