"""Gastric X-ray screening toolkit.

Fold-enhancing stochastic augmentation, a sliding-window reference detector
behind a pluggable contract, recursive hard boundary box training, a
box-level evaluation kit, and a deterministic synthetic corpus generator.
"""

__version__ = "0.1.0"
