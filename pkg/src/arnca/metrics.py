"""Per-frame F1 and ROC-AUC, averaged over the prediction window."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata


def _check(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> None:
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps but {len(masks)} masks")
    for p, y in zip(maps, masks):
        if np.shape(p) != np.shape(y):
            raise ValueError(f"map shape {np.shape(p)} does not match mask shape {np.shape(y)}")


def frame_f1(p: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> float:
    """F1 of ``p >= threshold`` against ``y``; an empty prediction of an empty frame scores 1."""
    pred = np.asarray(p) >= threshold
    y = np.asarray(y, dtype=bool)
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def frame_auc(p: np.ndarray, y: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks for ties; NaN for single-class frames."""
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=bool).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(p)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def f1_score(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], threshold: float = 0.5) -> float:
    _check(maps, masks)
    if len(maps) == 0:
        return float("nan")
    return float(np.mean([frame_f1(p, y, threshold) for p, y in zip(maps, masks)]))


def auc_roc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray],
            return_excluded: bool = False) -> float | tuple[float, int]:
    """Mean per-frame AUC over frames whose mask holds both classes.

    If every frame is single-class the result is NaN. With
    ``return_excluded`` the number of skipped frames is returned as well.
    """
    _check(maps, masks)
    scores = [frame_auc(p, y) for p, y in zip(maps, masks)]
    valid = [s for s in scores if not np.isnan(s)]
    auc = float(np.mean(valid)) if valid else float("nan")
    if return_excluded:
        return auc, len(scores) - len(valid)
    return auc
