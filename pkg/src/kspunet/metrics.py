"""Set-to-set segmentation metrics: IoU, Dice, generalized energy distance."""

from __future__ import annotations

import numpy as np


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; two empty masks count as identical."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(a, b).sum() / total)


def _pairwise(xs, ys, fn) -> np.ndarray:
    return np.array([[fn(x, y) for y in ys] for x in xs])


def ged_squared(samples, truths) -> float:
    """Squared generalized energy distance with ground distance 1 - IoU.

    ``2 E d(S, Y) - E d(S, S') - E d(Y, Y')`` with every expectation taken
    over all ordered pairs (diagonal included).
    """
    dist = lambda a, b: 1.0 - iou(a, b)  # noqa: E731
    cross = _pairwise(samples, truths, dist).mean()
    within_s = _pairwise(samples, samples, dist).mean()
    within_y = _pairwise(truths, truths, dist).mean()
    return float(2 * cross - within_s - within_y)


def diversity(samples) -> float:
    """Mean 1 - IoU over distinct sample pairs (0 for a single sample)."""
    n = len(samples)
    if n < 2:
        return 0.0
    d = [1.0 - iou(samples[i], samples[j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(d))


def image_metrics(samples, truths) -> dict[str, float]:
    ious = _pairwise(samples, truths, iou)
    dices = _pairwise(samples, truths, dice)
    return {
        "best_iou": float(ious.max(axis=1).mean()),
        "dice": float(dices.max(axis=1).mean()),
        "ged2": ged_squared(samples, truths),
        "diversity": diversity(samples),
    }
