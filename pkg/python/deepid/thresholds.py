"""Error-minimizing threshold search shared by margin updates and verification metrics."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import numpy.typing as npt

# Distance from the extreme values to the outermost candidate thresholds.
BOUNDARY_OFFSET = 1.0


class ThresholdScan(NamedTuple):
    threshold: float
    """The smallest candidate achieving the fewest errors."""

    errors: int
    """Number of misclassified values at `threshold`."""

    accuracy: float
    """Fraction classified correctly at `threshold`."""


def candidate_thresholds(values: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Midpoints of consecutive distinct values plus one candidate beyond each end."""
    distinct = np.unique(np.asarray(values, dtype=np.float64))
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate(
        [[distinct[0] - BOUNDARY_OFFSET], midpoints, [distinct[-1] + BOUNDARY_OFFSET]]
    )


def count_errors(
    values: npt.ArrayLike,
    positives: npt.ArrayLike,
    thresholds: npt.ArrayLike,
    *,
    below: bool,
) -> npt.NDArray[np.int64]:
    """Errors at each threshold.

    With `below`, a value is predicted positive when it is strictly less than the
    threshold (distances); otherwise when it is strictly greater (similarity scores).
    """
    values = np.asarray(values, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    pos = np.sort(values[positives])
    neg = np.sort(values[~positives])
    if below:
        pos_hits = np.searchsorted(pos, thresholds, side="left")
        neg_hits = np.searchsorted(neg, thresholds, side="left")
    else:
        pos_hits = pos.size - np.searchsorted(pos, thresholds, side="right")
        neg_hits = neg.size - np.searchsorted(neg, thresholds, side="right")
    return (pos.size - pos_hits) + neg_hits


def scan_threshold(
    values: npt.ArrayLike, positives: npt.ArrayLike, *, below: bool
) -> ThresholdScan:
    """Find the error-minimizing threshold; ties go to the smallest candidate."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot scan thresholds over an empty set")
    candidates = candidate_thresholds(values)
    errors = count_errors(values, positives, candidates, below=below)
    best = int(np.argmin(errors))
    return ThresholdScan(
        threshold=float(candidates[best]),
        errors=int(errors[best]),
        accuracy=1.0 - float(errors[best]) / values.size,
    )
