"""Joint Bayesian verification.

A feature is modelled as `x = μ + ε` with identity component `μ ~ N(0, S_μ)` and
residual `ε ~ N(0, S_ε)`, after subtracting the global mean. The covariances are fitted
by EM over identity-grouped features, and a pair is scored by the log-likelihood ratio

    log P(x₁, x₂ | same) − log P(x₁, x₂ | different)

so higher scores mean "same identity".
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import numpy.typing as npt

from deepid.errors import ConfigError, LabelError, ShapeError, SingularCovarianceError
from deepid.tensor import Matrix, Tensor, as_matrix, spd_inverse, spd_logdet, sym_eigendecompose
from deepid.tensorio import load_tensors, save_tensors
from deepid.thresholds import ThresholdScan, scan_threshold

logger = logging.getLogger(__name__)

# Ridge added to `S_ε`, relative to the mean variance of the initial estimate.
REGULARIZATION = 1e-6

DEFAULT_ITERATIONS = 50
DEFAULT_TOLERANCE = 1e-6


@dataclasses.dataclass(frozen=True)
class JointBayesModel:
    s_mu: Matrix
    """Between-identity covariance."""

    s_eps: Matrix
    """Within-identity covariance."""

    mean: Tensor
    """Global feature mean subtracted before scoring."""

    a: Matrix
    g: Matrix
    constant: float
    """`score(x₁, x₂) = x₁ᵀAx₁ + x₂ᵀAx₂ + 2x₁ᵀGx₂ + constant` on centered inputs."""

    history: Tensor = dataclasses.field(default_factory=lambda: np.zeros(0))
    """Penalized marginal log-likelihood after each EM iteration."""

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def from_covariances(
        cls,
        s_mu: npt.ArrayLike,
        s_eps: npt.ArrayLike,
        mean: npt.ArrayLike | None = None,
        history: Tensor | None = None,
    ) -> JointBayesModel:
        """Derive the scoring matrices for the given covariances."""
        s_mu = as_matrix(s_mu)
        s_eps = as_matrix(s_eps)
        if s_mu.shape != s_eps.shape or s_mu.shape[0] != s_mu.shape[1]:
            raise ShapeError(f"covariances must be square and equal: {s_mu.shape}, {s_eps.shape}")
        dim = s_mu.shape[0]
        mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
        if mean.shape != (dim,):
            raise ShapeError(f"mean must have shape ({dim},), got {mean.shape}")

        total = s_mu + s_eps
        together = 2.0 * s_mu + s_eps
        total_inv = spd_inverse(total)
        together_inv = spd_inverse(together)
        eps_inv = spd_inverse(s_eps)
        # Inverse of the same-identity joint covariance is [[P, Q], [Q, P]].
        p = 0.5 * (together_inv + eps_inv)
        q = 0.5 * (together_inv - eps_inv)
        a = 0.5 * (total_inv - p)
        g = -0.5 * q
        constant = -0.5 * (spd_logdet(together) + spd_logdet(s_eps) - 2.0 * spd_logdet(total))
        return cls(
            s_mu=s_mu,
            s_eps=s_eps,
            mean=mean,
            a=(a + a.T) / 2.0,
            g=(g + g.T) / 2.0,
            constant=constant,
            history=np.zeros(0) if history is None else history,
        )


def group_features(features: npt.ArrayLike, labels: npt.ArrayLike) -> list[Matrix]:
    """Split a feature matrix into per-identity groups, in sorted label order."""
    x = as_matrix(features)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"expected {x.shape[0]} labels, got shape {labels.shape}")
    return [x[labels == label] for label in np.unique(labels)]


def _check_groups(groups: Sequence[npt.ArrayLike]) -> list[Matrix]:
    checked = [as_matrix(group) for group in groups]
    if len(checked) < 2:
        raise LabelError("Joint Bayesian fitting needs at least two identities")
    dims = {group.shape[1] for group in checked}
    if len(dims) != 1:
        raise ShapeError(f"feature dimensionality differs between groups: {sorted(dims)}")
    if any(group.shape[0] == 0 for group in checked):
        raise ShapeError("every identity needs at least one sample")
    return checked


def _clip_psd(m: Matrix) -> Matrix:
    eigenvalues, vectors = sym_eigendecompose((m + m.T) / 2.0)
    return (vectors * np.maximum(eigenvalues, 0.0)) @ vectors.T


def moment_estimates(groups: Sequence[npt.ArrayLike]) -> tuple[Matrix, Matrix]:
    """Method-of-moments `(S_μ, S_ε)` from centered identity groups.

    `S_ε` is the pooled within-identity scatter over `N − c` degrees of freedom; `S_μ` is
    the scatter of identity means over `c`, less the residual variance carried by the
    means, projected onto the PSD cone.
    """
    checked = _check_groups(groups)
    counts = np.array([group.shape[0] for group in checked], dtype=np.float64)
    total = counts.sum()
    means = np.stack([group.mean(axis=0) for group in checked])
    within = sum((group - mu).T @ (group - mu) for group, mu in zip(checked, means))
    dof = total - len(checked)
    s_eps = within / dof if dof > 0 else np.zeros_like(within)
    s_mu = means.T @ means / len(checked) - s_eps * np.mean(1.0 / counts)
    return _clip_psd(s_mu), (s_eps + s_eps.T) / 2.0


def _by_count(groups: list[Matrix]) -> dict[int, tuple[Matrix, list[int]]]:
    """Per sample count: stacked group sums and the group indices."""
    buckets: dict[int, list[int]] = {}
    for k, group in enumerate(groups):
        buckets.setdefault(group.shape[0], []).append(k)
    return {
        m: (np.stack([groups[k].sum(axis=0) for k in members]), members)
        for m, members in buckets.items()
    }


def _penalized_log_likelihood(
    groups: list[Matrix],
    buckets: dict[int, tuple[Matrix, list[int]]],
    s_mu: Matrix,
    s_eps: Matrix,
    ridge: float,
) -> float:
    dim = s_mu.shape[1]
    eps_inv = spd_inverse(s_eps)
    logdet_eps = spd_logdet(s_eps)
    total = 0.0
    samples = 0
    for m, (sums, members) in buckets.items():
        centered = [groups[k] - sums[idx] / m for idx, k in enumerate(members)]
        within = sum(float(np.sum((c @ eps_inv) * c)) for c in centered)
        joint = s_eps + m * s_mu
        means = sums / m
        between = m * float(np.sum((means @ spd_inverse(joint)) * means))
        logdet = (m - 1) * logdet_eps + spd_logdet(joint)
        n = len(members)
        total -= 0.5 * (n * m * dim * math.log(2.0 * math.pi) + n * logdet + within + between)
        samples += n * m
    return total - 0.5 * samples * ridge * float(np.trace(eps_inv))


def log_likelihood(model: JointBayesModel, groups: Sequence[npt.ArrayLike]) -> float:
    """Marginal log-likelihood of identity groups under `model`."""
    checked = [group - model.mean for group in _check_groups(groups)]
    if checked[0].shape[1] != model.dim:
        raise ShapeError(f"model has dimension {model.dim}, features have {checked[0].shape[1]}")
    return _penalized_log_likelihood(checked, _by_count(checked), model.s_mu, model.s_eps, 0.0)


def fit_em(
    groups: Sequence[npt.ArrayLike],
    iters: int = DEFAULT_ITERATIONS,
    tol: float = DEFAULT_TOLERANCE,
) -> JointBayesModel:
    """Fit `S_μ` and `S_ε` by EM, starting from the method-of-moments estimates.

    A fixed ridge `δ·I` with `δ = 1e-6 · trace(S_μ + S_ε) / dim` of the initial estimate
    is added to `S_ε` at every M-step. This is EM on the log-likelihood penalized by
    `−(N δ / 2) tr(S_ε⁻¹)`, whose value after each iteration is recorded in `history`.
    Iteration stops after `iters` steps or when the Frobenius change of both covariances,
    relative to their norms, drops below `tol`.
    """
    if iters < 1 or tol < 0:
        raise ConfigError("`iters` must be positive and `tol` nonnegative")
    checked = _check_groups(groups)
    mean = np.concatenate(checked).mean(axis=0)
    checked = [group - mean for group in checked]
    dim = checked[0].shape[1]
    n_samples = sum(group.shape[0] for group in checked)
    if n_samples <= dim:
        logger.warning(
            "Fitting %d-dimensional Joint Bayesian on only %d samples", dim, n_samples
        )

    s_mu, s_eps = moment_estimates(checked)
    ridge = REGULARIZATION * float(np.trace(s_mu + s_eps)) / dim
    if not ridge > 0.0:
        raise SingularCovarianceError("features have zero variance; covariances are singular")
    s_eps = s_eps + ridge * np.eye(dim)
    buckets = _by_count(checked)

    history = []
    for iteration in range(iters):
        # E-step: posterior mean and covariance of μ per identity, grouped by count.
        mu_outer = np.zeros((dim, dim))
        eps_outer = np.zeros((dim, dim))
        for m, (sums, members) in buckets.items():
            gain = s_mu @ spd_inverse(m * s_mu + s_eps)
            posterior = sums @ gain.T
            cov = s_mu - s_mu @ spd_inverse(s_mu + s_eps / m) @ s_mu
            cov = (cov + cov.T) / 2.0
            mu_outer += posterior.T @ posterior + len(members) * cov
            for idx, k in enumerate(members):
                residual = checked[k] - posterior[idx]
                eps_outer += residual.T @ residual
            eps_outer += len(members) * m * cov

        # M-step.
        new_mu = mu_outer / len(checked)
        new_eps = eps_outer / n_samples + ridge * np.eye(dim)
        new_mu = (new_mu + new_mu.T) / 2.0
        new_eps = (new_eps + new_eps.T) / 2.0

        change = np.linalg.norm(new_mu - s_mu) + np.linalg.norm(new_eps - s_eps)
        scale = np.linalg.norm(s_mu) + np.linalg.norm(s_eps)
        s_mu, s_eps = new_mu, new_eps
        history.append(_penalized_log_likelihood(checked, buckets, s_mu, s_eps, ridge))
        logger.debug("EM iteration %d: log-likelihood %.6f", iteration, history[-1])
        if change <= tol * scale:
            logger.debug("EM converged after %d iterations", iteration + 1)
            break
    else:
        logger.debug("EM stopped after %d iterations without converging", iters)

    return JointBayesModel.from_covariances(s_mu, s_eps, mean, np.asarray(history))


def _centered(model: JointBayesModel, f: npt.ArrayLike) -> Tensor:
    x = np.asarray(f, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ShapeError(f"model has dimension {model.dim}, features have shape {x.shape}")
    return x - model.mean


def score_pairs(model: JointBayesModel, f1: npt.ArrayLike, f2: npt.ArrayLike) -> Tensor:
    """Log-likelihood ratios of `(N, D)` feature pairs, row by row."""
    x1 = _centered(model, f1)
    x2 = _centered(model, f2)
    if x1.shape != x2.shape:
        raise ShapeError(f"pair members have different shapes: {x1.shape}, {x2.shape}")
    q1 = np.sum((x1 @ model.a) * x1, axis=-1)
    q2 = np.sum((x2 @ model.a) * x2, axis=-1)
    c12 = np.sum((x1 @ model.g) * x2, axis=-1)
    c21 = np.sum((x2 @ model.g) * x1, axis=-1)
    # Both orderings of each commutative sum give identical bits.
    return ((q1 + q2) + (c12 + c21)) + model.constant


def score(model: JointBayesModel, f1: npt.ArrayLike, f2: npt.ArrayLike) -> float:
    """Log-likelihood ratio of one pair; symmetric in its arguments."""
    return float(score_pairs(model, np.atleast_2d(f1), np.atleast_2d(f2))[0])


def threshold_from_scores(scores: npt.ArrayLike, same: npt.ArrayLike) -> ThresholdScan:
    """The accuracy-maximizing score threshold; ties go to the smallest candidate."""
    same = np.asarray(same)
    same = same > 0 if same.dtype != np.bool_ else same
    if same.size == 0 or same.all() or not same.any():
        raise LabelError("threshold calibration needs both same and different pairs")
    return scan_threshold(scores, same, below=False)


def calibrate_threshold(
    model: JointBayesModel, f1: npt.ArrayLike, f2: npt.ArrayLike, same: npt.ArrayLike
) -> ThresholdScan:
    """Calibrate on labelled validation pairs; scores above the threshold mean "same"."""
    return threshold_from_scores(score_pairs(model, f1, f2), same)


def save_model(path: str | Path, model: JointBayesModel) -> None:
    save_tensors(
        path,
        {
            "s_mu": model.s_mu,
            "s_eps": model.s_eps,
            "mean": model.mean,
            "history": model.history,
        },
        {"kind": "joint-bayes", "dim": model.dim},
    )


def load_model(path: str | Path) -> JointBayesModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "joint-bayes":
        raise ConfigError(f"{path} does not contain a Joint Bayesian model")
    return JointBayesModel.from_covariances(
        tensors["s_mu"], tensors["s_eps"], tensors["mean"], tensors["history"]
    )
