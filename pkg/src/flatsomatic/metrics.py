"""Reconstruction metrics shared by training-time validation and evaluation."""

import numpy as np

from .errors import ShapeError


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """1 where ``probs >= threshold``, else 0."""
    return (np.asarray(probs) >= threshold).astype(np.int8)


def confusion_counts(y, y_hat) -> tuple[int, int, int]:
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    y = y.astype(bool)
    y_hat = y_hat.astype(bool)
    tp = int(np.count_nonzero(y & y_hat))
    fp = int(np.count_nonzero(~y & y_hat))
    fn = int(np.count_nonzero(y & ~y_hat))
    return tp, fp, fn


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """``(f1, precision, recall)``; a ratio with a zero denominator is 1."""
    return _ratio(2 * tp, 2 * tp + fp + fn), _ratio(tp, tp + fp), _ratio(tp, tp + fn)


def micro_f1(y, y_hat) -> tuple[float, float, float]:
    """Micro-averaged ``(f1, precision, recall)`` pooled over every cell."""
    return f1_from_counts(*confusion_counts(y, y_hat))


def cosine_similarity(x, x_hat) -> float:
    """Mean row-wise cosine similarity. Rows with a zero norm count as 0."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if x.shape[0] == 0:
        return 0.0
    norms = np.linalg.norm(x, axis=1) * np.linalg.norm(x_hat, axis=1)
    dots = np.einsum("ij,ij->i", x, x_hat)
    sims = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    return float(sims.mean())
