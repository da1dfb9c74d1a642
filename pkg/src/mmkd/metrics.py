"""Sentiment-intensity metrics: MAE, binary accuracy, seven-class accuracy."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def _as_arrays(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ConfigError(f"preds shape {p.shape} != labels shape {y.shape}")
    if p.size == 0:
        raise ConfigError("empty prediction list")
    return p, y


def mae(preds, labels) -> float:
    p, y = _as_arrays(preds, labels)
    return float(np.abs(p - y).mean())


def acc2(preds, labels, positive_includes_zero: bool = False) -> float:
    """Sign accuracy over non-neutral samples (labels exactly 0 excluded).

    A prediction counts as positive iff strictly > 0; the flag switches to
    >= 0 since the boundary convention is unstated upstream.
    """
    p, y = _as_arrays(preds, labels)
    keep = y != 0.0
    if not keep.any():
        raise ConfigError("Acc2 undefined: every sample has neutral (0) intensity")
    pred_pos = p >= 0.0 if positive_includes_zero else p > 0.0
    return float((pred_pos[keep] == (y[keep] > 0.0)).mean())


def intensity_bin(x) -> np.ndarray:
    """Round half away from zero, then clip to the integer range [-3, 3]."""
    x = np.asarray(x, dtype=np.float64)
    rounded = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(rounded, -3.0, 3.0)


def acc7(preds, labels) -> float:
    """Seven-class accuracy after binning both sides to integers in [-3, 3]."""
    p, y = _as_arrays(preds, labels)
    return float((intensity_bin(p) == intensity_bin(y)).mean())
