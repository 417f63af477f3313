"""Supervisory signals: the identification loss and the verification losses.

Every loss accepts either single feature vectors `(D,)` or batches `(B, D)`. For a
single input the loss is a float; for a batch it is a `(B,)` array of per-pair losses,
feature gradients are per row, and parameter gradients are summed over the batch.
"""

from __future__ import annotations

import collections
import dataclasses
import enum
import logging
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from deepid.errors import LabelError, NonFiniteError, ShapeError
from deepid.tensor import Tensor
from deepid.thresholds import scan_threshold

logger = logging.getLogger(__name__)


class VerifKind(enum.StrEnum):
    """The verification signal used during training."""

    L2 = "l2"
    L2_PLUS = "l2plus"
    L2_MINUS = "l2minus"
    L1 = "l1"
    COSINE = "cosine"
    NONE = "none"

    @property
    def uses_margin(self) -> bool:
        return self in (VerifKind.L2, VerifKind.L2_PLUS, VerifKind.L2_MINUS, VerifKind.L1)


def pair_label(l_i: npt.ArrayLike, l_j: npt.ArrayLike) -> npt.NDArray[np.int64]:
    """`+1` where the identities match, `-1` otherwise."""
    return np.where(np.asarray(l_i) == np.asarray(l_j), 1, -1)


class IdentResult(NamedTuple):
    loss: float | Tensor
    df: Tensor
    dweight: Tensor
    dbias: Tensor


class VerifResult(NamedTuple):
    loss: float | Tensor
    df_i: Tensor
    df_j: Tensor
    dscale: float = 0.0
    dshift: float = 0.0


def _batch(f: Tensor) -> tuple[Tensor, bool]:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        return f[None], True
    if f.ndim != 2:
        raise ShapeError(f"expected feature vectors of rank 1 or 2, got shape {f.shape}")
    return f, False


def _pair_batch(
    f_i: Tensor, f_j: Tensor, y: npt.ArrayLike
) -> tuple[Tensor, Tensor, npt.NDArray[np.int64], bool]:
    fi, single = _batch(f_i)
    fj, _ = _batch(f_j)
    if fi.shape != fj.shape:
        raise ShapeError(f"feature dimensions differ: {np.shape(f_i)} vs {np.shape(f_j)}")
    labels = np.atleast_1d(np.asarray(y)).astype(np.int64)
    if labels.shape != (fi.shape[0],):
        raise ShapeError(f"expected {fi.shape[0]} pair labels, got {labels.shape}")
    if not np.all(np.isin(labels, (-1, 1))):
        raise LabelError("pair labels must be +1 or -1")
    return fi, fj, labels, single


def _unbatch(result: VerifResult, single: bool) -> VerifResult:
    if not single:
        return result
    return VerifResult(
        float(result.loss[0]), result.df_i[0], result.df_j[0], result.dscale, result.dshift
    )


def ident_loss(
    f: Tensor,
    t: int | npt.ArrayLike,
    weight: Tensor,
    bias: Tensor,
    *,
    mask: npt.ArrayLike | None = None,
) -> IdentResult:
    """Softmax cross-entropy `-log p̂_t` with `p̂ = softmax(weight @ f + bias)`.

    Rows where `mask` is false contribute neither loss nor gradient.
    """
    fb, single = _batch(f)
    targets = np.atleast_1d(np.asarray(t)).astype(np.int64)
    n = bias.shape[0]
    if targets.shape != (fb.shape[0],):
        raise ShapeError(f"expected {fb.shape[0]} targets, got {targets.shape}")
    keep = np.ones(fb.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if np.any(keep & ((targets < 0) | (targets >= n))):
        raise LabelError(f"class index out of range for {n} classes: {targets[keep]}")

    logits = fb @ weight.T + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(fb.shape[0])
    safe = np.where(keep, targets, 0)
    loss = np.where(keep, log_norm - shifted[rows, safe], 0.0)

    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, safe] -= 1.0
    grad *= keep[:, None]

    df = grad @ weight
    dweight = grad.T @ fb
    dbias = grad.sum(axis=0)
    if single:
        return IdentResult(float(loss[0]), df[0], dweight, dbias)
    return IdentResult(loss, df, dweight, dbias)


def verif_loss_l2(
    f_i: Tensor,
    f_j: Tensor,
    y: int | npt.ArrayLike,
    margin: float,
    *,
    positives: bool = True,
    negatives: bool = True,
) -> VerifResult:
    """Contrastive loss on the L2 distance.

    `½‖f_i − f_j‖²` for same-identity pairs and `½ max(0, m − ‖f_i − f_j‖)²` otherwise.
    Disabling `positives` or `negatives` gives the restricted variants that only
    constrain one kind of pair.
    """
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    fi, fj, labels, single = _pair_batch(f_i, f_j, y)
    diff = fi - fj
    dist = np.linalg.norm(diff, axis=1)
    same = labels == 1

    hinge = np.maximum(0.0, margin - dist)
    loss = np.where(same, 0.5 * dist**2, 0.5 * hinge**2)
    # The negative-pair gradient is taken as zero at coincident features.
    with np.errstate(divide="ignore", invalid="ignore"):
        push = np.where(dist > 0.0, -hinge / dist, 0.0)
    coeff = np.where(same, 1.0, push)

    active = np.where(same, positives, negatives)
    loss = np.where(active, loss, 0.0)
    df_i = (coeff * active)[:, None] * diff
    return _unbatch(VerifResult(loss, df_i, -df_i), single)


def verif_loss_l1(
    f_i: Tensor, f_j: Tensor, y: int | npt.ArrayLike, margin: float
) -> VerifResult:
    """Contrastive loss on the L1 distance: `‖f_i − f_j‖₁` or `max(0, m − ‖f_i − f_j‖₁)`.

    Subgradients are zero at every kink.
    """
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    fi, fj, labels, single = _pair_batch(f_i, f_j, y)
    diff = fi - fj
    dist = np.abs(diff).sum(axis=1)
    same = labels == 1

    hinge = np.maximum(0.0, margin - dist)
    loss = np.where(same, dist, hinge)
    coeff = np.where(same, 1.0, np.where(hinge > 0.0, -1.0, 0.0))
    df_i = coeff[:, None] * np.sign(diff)
    return _unbatch(VerifResult(loss, df_i, -df_i), single)


def sigmoid(z: npt.ArrayLike) -> Tensor:
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -z))


def verif_loss_cosine(
    f_i: Tensor, f_j: Tensor, y: int | npt.ArrayLike, scale: float, shift: float
) -> VerifResult:
    """`½ (t − σ(w·d + b))²` with `d` the cosine similarity.

    The target `t` is 1 for same-identity pairs and 0 otherwise, matching the range
    of the sigmoid.
    """
    fi, fj, labels, single = _pair_batch(f_i, f_j, y)
    norm_i = np.linalg.norm(fi, axis=1)
    norm_j = np.linalg.norm(fj, axis=1)
    if np.any(norm_i == 0.0) or np.any(norm_j == 0.0):
        raise NonFiniteError("cosine similarity is undefined for zero-norm features")

    target = (labels == 1).astype(np.float64)
    d = np.sum(fi * fj, axis=1) / (norm_i * norm_j)
    s = sigmoid(scale * d + shift)
    loss = 0.5 * (target - s) ** 2
    dz = -(target - s) * s * (1.0 - s)

    dd_i = fj / (norm_i * norm_j)[:, None] - (d / norm_i**2)[:, None] * fi
    dd_j = fi / (norm_i * norm_j)[:, None] - (d / norm_j**2)[:, None] * fj
    df_i = (dz * scale)[:, None] * dd_i
    df_j = (dz * scale)[:, None] * dd_j
    result = VerifResult(loss, df_i, df_j, float(np.sum(dz * d)), float(np.sum(dz)))
    return _unbatch(result, single)


def verif_loss(
    kind: VerifKind,
    f_i: Tensor,
    f_j: Tensor,
    y: int | npt.ArrayLike,
    *,
    margin: float = 1.0,
    scale: float = 1.0,
    shift: float = 0.0,
) -> VerifResult:
    """Evaluate the verification signal selected by `kind`."""
    match kind:
        case VerifKind.L2:
            return verif_loss_l2(f_i, f_j, y, margin)
        case VerifKind.L2_PLUS:
            return verif_loss_l2(f_i, f_j, y, margin, negatives=False)
        case VerifKind.L2_MINUS:
            return verif_loss_l2(f_i, f_j, y, margin, positives=False)
        case VerifKind.L1:
            return verif_loss_l1(f_i, f_j, y, margin)
        case VerifKind.COSINE:
            return verif_loss_cosine(f_i, f_j, y, scale, shift)
        case VerifKind.NONE:
            fi, fj, _, single = _pair_batch(f_i, f_j, y)
            zeros = np.zeros_like(fi)
            return _unbatch(VerifResult(np.zeros(fi.shape[0]), zeros, zeros.copy()), single)
        case _:
            raise ValueError(f"Invalid verification kind: {kind}")


def pair_distances(kind: VerifKind, f_i: Tensor, f_j: Tensor) -> Tensor:
    """The distance the margin of `kind` is compared against."""
    if kind == VerifKind.L1:
        return np.abs(f_i - f_j).sum(axis=-1)
    return np.linalg.norm(f_i - f_j, axis=-1)


class MarginUpdate(NamedTuple):
    margin: float
    """The margin after the update."""

    errors: int
    """Buffer errors at the new margin (0 for a no-op)."""

    noop: bool
    """True when the buffer was empty and the margin was kept."""


@dataclasses.dataclass
class MarginState:
    """The adaptive margin and the recent pairs it is fitted to."""

    margin: float = 1.0
    capacity: int = 1000
    buffer: collections.deque[tuple[float, bool]] = dataclasses.field(
        default_factory=collections.deque
    )
    filled: bool = False
    """Whether the buffer has reached capacity at least once."""

    def __post_init__(self) -> None:
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.capacity < 1:
            raise ValueError("margin buffer capacity must be positive")
        self.buffer = collections.deque(self.buffer, maxlen=self.capacity)

    def record(self, distances: npt.ArrayLike, same: npt.ArrayLike) -> None:
        """Append recent `(distance, same-identity)` observations."""
        for distance, label in zip(np.atleast_1d(distances), np.atleast_1d(same)):
            self.buffer.append((float(distance), bool(label)))
        if len(self.buffer) == self.capacity:
            self.filled = True


def update_margin(state: MarginState) -> MarginUpdate:
    """Set the margin to the threshold with the lowest error on the buffered pairs.

    Pairs closer than the margin are predicted to share an identity. Candidates are
    midpoints between consecutive sorted distances plus one beyond each end; ties go to
    the smallest candidate. An empty buffer leaves the margin unchanged.
    """
    if not state.buffer:
        logger.debug("Margin buffer is empty; keeping margin %.4f", state.margin)
        return MarginUpdate(state.margin, 0, True)
    distances = np.fromiter((d for d, _ in state.buffer), dtype=np.float64)
    same = np.fromiter((s for _, s in state.buffer), dtype=bool)
    scan = scan_threshold(distances, same, below=True)
    state.margin = max(0.0, scan.threshold)
    return MarginUpdate(state.margin, scan.errors, False)
