"""Diagnostics for learned features: scatter spectra, PCA views and verification ROC."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
import pandas as pd
import sklearn.metrics

from deepid.errors import LabelError, ShapeError
from deepid.pipeline import fit_pca
from deepid.tensor import Matrix, Tensor, as_matrix, sym_eigendecompose
from deepid.thresholds import scan_threshold

logger = logging.getLogger(__name__)

# Fraction of leading ranks excluded from the tail mass.
TAIL_FRACTION = 0.1


class ScatterPair(NamedTuple):
    inter: Matrix
    """Inter-personal scatter `Σ n_i (x̄_i − x̄)(x̄_i − x̄)ᵀ`."""

    intra: Matrix
    """Intra-personal scatter `Σ_i Σ_{x ∈ i} (x − x̄_i)(x − x̄_i)ᵀ`."""

    n_identities: int
    counts: npt.NDArray[np.int64]
    """Samples per identity, in sorted label order."""


class SpectrumReport(NamedTuple):
    inter: Tensor
    """Inter-personal eigenvalues, descending, divided by their mean."""

    intra: Tensor
    """Intra-personal eigenvalues, descending, divided by their mean."""


class RocCurve(NamedTuple):
    fpr: Tensor
    tpr: Tensor
    thresholds: Tensor
    """Score cut-point of each point after the first; scores at or above it are accepted."""


class VerificationMetrics(NamedTuple):
    accuracy: float
    """Accuracy at the error-minimizing threshold."""

    threshold: float
    roc: RocCurve


def _features(features: npt.ArrayLike, labels: npt.ArrayLike) -> tuple[Matrix, npt.NDArray]:
    x = as_matrix(features)
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise ShapeError(f"expected {x.shape[0]} labels, got shape {y.shape}")
    return x, y


def compute_scatter(features: npt.ArrayLike, labels: npt.ArrayLike) -> ScatterPair:
    x, y = _features(features, labels)
    if x.shape[0] == 0:
        raise ShapeError("cannot compute scatter of an empty feature set")
    identities, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    dim = x.shape[1]
    mean = x.mean(axis=0)
    sums = np.zeros((len(identities), dim))
    np.add.at(sums, inverse, x)
    means = sums / counts[:, None]

    if len(identities) < 2:
        logger.warning("Only one identity present; inter-personal scatter is zero")
        inter = np.zeros((dim, dim))
    else:
        offsets = means - mean
        inter = (offsets * counts[:, None]).T @ offsets
    residuals = x - means[inverse]
    intra = residuals.T @ residuals
    return ScatterPair(
        (inter + inter.T) / 2.0, (intra + intra.T) / 2.0, len(identities), counts
    )


def _normalized_eigenvalues(m: Matrix) -> Tensor:
    eigenvalues, _ = sym_eigendecompose(m)
    # Rounding can leave PSD eigenvalues slightly negative.
    eigenvalues = np.maximum(eigenvalues, 0.0)
    mean = eigenvalues.mean() if eigenvalues.size else 0.0
    return eigenvalues / mean if mean > 0.0 else eigenvalues


def spectrum(pair: ScatterPair) -> SpectrumReport:
    return SpectrumReport(_normalized_eigenvalues(pair.inter), _normalized_eigenvalues(pair.intra))


def tail_mass(values: npt.ArrayLike, fraction: float = TAIL_FRACTION) -> float:
    """Sum of the descending `values` beyond the leading `fraction` of ranks."""
    values = np.asarray(values, dtype=np.float64)
    head = math.ceil(fraction * values.size)
    return float(values[head:].sum())


def top_share(values: npt.ArrayLike) -> float:
    """Share of the largest value in the total."""
    values = np.asarray(values, dtype=np.float64)
    total = values.sum()
    return float(values.max() / total) if total > 0 else 0.0


def _positives(labels: npt.ArrayLike) -> npt.NDArray[np.bool_]:
    labels = np.asarray(labels)
    positives = labels > 0 if labels.dtype != np.bool_ else labels
    if positives.all() or not positives.any():
        raise LabelError("verification metrics need both same and different pairs")
    return positives


def roc_curve(scores: npt.ArrayLike, labels: npt.ArrayLike) -> RocCurve:
    """Sweep every distinct score as a cut-point, from the highest down."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = _positives(labels)
    fpr, tpr, thresholds = sklearn.metrics.roc_curve(
        positives.astype(np.int64), scores, drop_intermediate=False
    )
    # The leading cut-point accepts nothing.
    return RocCurve(fpr, tpr, thresholds[1:])


def roc_auc(roc: RocCurve) -> float:
    """Area under the ROC curve by the trapezoid rule."""
    return float(sklearn.metrics.auc(roc.fpr, roc.tpr))


def verification_metrics(scores: npt.ArrayLike, labels: npt.ArrayLike) -> VerificationMetrics:
    """Accuracy at the best threshold, and the ROC.

    Higher scores mean "same identity"; pass negated distances. Labels are booleans
    or `±1`.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = _positives(labels)
    if scores.shape != positives.shape:
        raise ShapeError(f"{scores.shape[0]} scores for {positives.shape[0]} labels")
    scan = scan_threshold(scores, positives, below=False)
    return VerificationMetrics(scan.accuracy, scan.threshold, roc_curve(scores, positives))


def pca2_export(
    features: npt.ArrayLike, labels: npt.ArrayLike, top_k: int = 6
) -> pd.DataFrame:
    """First two principal coordinates of the `top_k` identities with the most samples.

    Rows keep the input order of the selected samples. Ties in sample count go to the
    smaller label.
    """
    x, y = _features(features, labels)
    identities, counts = np.unique(y, return_counts=True)
    if len(identities) < top_k:
        logger.warning(
            "Requested %d identities but only %d are present; using all",
            top_k,
            len(identities),
        )
    ranked = identities[np.argsort(-counts, kind="stable")][:top_k]
    keep = np.isin(y, ranked)
    x, y = x[keep], y[keep]
    if x.shape[0] < 2:
        raise ShapeError("a PCA view needs at least two samples")

    dims = min(2, x.shape[0] - 1, x.shape[1])
    coords = fit_pca(x, dims).project(x)
    if dims < 2:
        coords = np.hstack([coords, np.zeros((x.shape[0], 2 - dims))])
    return pd.DataFrame({"dim1": coords[:, 0], "dim2": coords[:, 1], "identity": y.astype(int)})


# Report writers.


def format_lambda(value: float, verification_only: bool = False) -> str:
    """Render a loss weight for reports; the verification-only mode is `inf`."""
    return "inf" if verification_only else f"{value:g}"


def spectrum_frame(reports: Mapping[str, SpectrumReport]) -> pd.DataFrame:
    frames = []
    for label, report in reports.items():
        frames.append(
            pd.DataFrame(
                {
                    "rank": np.arange(1, len(report.inter) + 1),
                    "inter": report.inter,
                    "intra": report.intra,
                    "lambda": label,
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def write_spectrum_csv(path: str | Path, reports: Mapping[str, SpectrumReport]) -> None:
    spectrum_frame(reports).to_csv(path, index=False)


def write_roc_csv(path: str | Path, roc: RocCurve) -> None:
    pd.DataFrame({"fpr": roc.fpr, "tpr": roc.tpr}).to_csv(path, index=False)


def write_pca2_csv(path: str | Path, frame: pd.DataFrame) -> None:
    frame[["dim1", "dim2", "identity"]].to_csv(path, index=False)


LAMBDA_SWEEP_COLUMNS = ["lambda", "l2_accuracy", "jb_accuracy", "intra_tail", "inter_top_share"]


def write_lambda_sweep_csv(path: str | Path, rows: Iterable[Mapping[str, object]]) -> None:
    pd.DataFrame(list(rows), columns=LAMBDA_SWEEP_COLUMNS).to_csv(path, index=False)
