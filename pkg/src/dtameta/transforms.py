"""Scale transforms between probabilities, logits, and ROC coordinates."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .model import DataError, Study, Sym2

__all__ = ["logit", "expit", "summarize_counts", "to_roc_space", "sroc_curve"]


def logit(p: float) -> float:
    """Log odds of p. Defined for 0 < p < 1 only."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"logit requires 0 < p < 1, got {p}")
    return math.log(p / (1.0 - p))


def expit(x: float) -> float:
    """Inverse of logit, numerically stable for large |x|."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def summarize_counts(tp: int, fn: int, fp: int, tn: int, cc: float = 0.5, id: str = "") -> Study:
    """Build a logit-scale study summary from a 2x2 table of counts.

    The continuity correction cc is added to all four cells if and only if at
    least one cell is zero. Within-study variances come from the usual
    delta-method formula 1/a + 1/b on each margin.
    """
    counts = (tp, fn, fp, tn)
    if any(c < 0 for c in counts):
        raise ValueError(f"negative count in {counts}")
    if tp + fn == 0 or fp + tn == 0:
        raise DataError(f"study {id!r}: empty margin in counts {counts}")
    if any(c == 0 for c in counts):
        tp, fn, fp, tn = (c + cc for c in counts)
    y_a = logit(tp / (tp + fn))
    s_a = 1.0 / tp + 1.0 / fn
    y_b = logit(tn / (tn + fp))
    s_b = 1.0 / tn + 1.0 / fp
    return Study(y_a=y_a, y_b=y_b, s_a=s_a, s_b=s_b, id=id)


def to_roc_space(points: Sequence[Sequence[float]]) -> list[tuple[float, float]]:
    """Map logit-scale points (u, v) to ROC coordinates (fpr, sensitivity).

    u is logit sensitivity and v logit specificity, so fpr = 1 - expit(v).
    """
    return [(1.0 - expit(float(v)), expit(float(u))) for u, v in points]


def sroc_curve(
    beta: Sequence[float], sigma: Sym2, fpr_grid: Sequence[float]
) -> list[tuple[float, float]]:
    """Summary ROC curve induced by the fitted means and covariance.

    At false positive rate t the specificity logit is mu_b = logit(1 - t) and
    the predicted sensitivity follows the regression of the first component on
    the second: expit(beta_a + (sigma12/sigma22) (mu_b - beta_b)). The curve
    passes through the summary point and is monotone in t when sigma12 > 0.
    """
    if sigma.a22 <= 0:
        raise ValueError("sroc_curve requires a positive specificity variance component")
    slope = sigma.a12 / sigma.a22
    beta_a, beta_b = float(beta[0]), float(beta[1])
    out = []
    for t in fpr_grid:
        t = float(t)
        if not 0.0 < t < 1.0:
            raise ValueError(f"fpr grid point {t} outside (0, 1)")
        mu_b = logit(1.0 - t)
        out.append((t, expit(beta_a + slope * (mu_b - beta_b))))
    return out
