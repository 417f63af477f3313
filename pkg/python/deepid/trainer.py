"""Joint identification-verification training by pair-based SGD.

Every step samples a batch of image pairs, runs both members through the network,
and combines the identification loss of each member with the verification loss of the
pair, weighted by `λ`:

    ∇θ_id = Σ ∂Ident(f, t; θ_id)/∂θ_id
    ∇θ_ve = λ · ∂Verif(f_i, f_j, y; θ_ve)/∂θ_ve
    ∇f    = ∂Ident(f, t)/∂f + λ · ∂Verif(f_i, f_j, y)/∂f
    θ     ← θ − η(t) · ∇θ

The contrastive margin is not descended on; it follows the error-minimizing threshold
on recently seen pairs (see `deepid.supervision.update_margin`).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Mapping
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import numpy.typing as npt
import pandas as pd

from deepid.analysis import verification_metrics
from deepid.convnet import NetworkConfig, NetworkParams, backward, forward, init_params
from deepid.dataset import LabeledDataset, PairSet
from deepid.errors import (
    ConfigError,
    LabelError,
    NonFiniteError,
    ShapeError,
    TrainingDivergedError,
)
from deepid.supervision import (
    MarginState,
    VerifKind,
    ident_loss,
    pair_distances,
    pair_label,
    update_margin,
    verif_loss,
)
from deepid.tensor import Tensor

logger = logging.getLogger(__name__)


def parse_lambda(value: Any) -> tuple[float, bool]:
    """Parse a loss weight; `"inf"` selects the verification-only mode.

    Returns `(lam, verification_only)`.
    """
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity", "∞"):
            return 0.0, True
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"Invalid lambda: {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"Invalid lambda: {value!r}")
    if math.isinf(value) and value > 0:
        return 0.0, True
    if not value >= 0:
        raise ConfigError(f"lambda must be nonnegative, got {value}")
    return float(value), False


@dataclasses.dataclass(frozen=True)
class LearningRate:
    """Step decay: `initial · decay^⌊epoch / interval⌋`."""

    initial: float = 0.01
    decay: float = 0.5
    interval: int = 5

    def __call__(self, epoch: int) -> float:
        return self.initial * self.decay ** (epoch // self.interval)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.05
    """Weight of the verification signal."""

    verification_only: bool = False
    """Drop the identification signal and use verification unweighted (`λ = ∞`)."""

    learning_rate: float = 0.01
    lr_decay: float = 0.5
    lr_decay_epochs: int = 5

    epochs: int = 20
    batch_size: int = 64
    """Pairs per step; gradients are averaged over the batch."""

    steps_per_epoch: int | None = None
    """Defaults to `⌈N / batch_size⌉` for `N` training images."""

    positive_fraction: float = 0.5
    seed: int = 0
    verif_kind: VerifKind = VerifKind.L2

    ident_identities: int | None = None
    """Restrict identification to the first `k` training identities."""

    initial_margin: float = 1.0
    margin_capacity: int = 1000
    """Pairs kept for margin updates."""

    margin_interval: int = 100
    """Pairs between margin updates once the buffer has filled."""

    patience: int = 5
    """Epochs without validation improvement before stopping."""

    validation_pairs: int = 1000
    flip_augment: bool = False

    def __post_init__(self) -> None:
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ConfigError(f"`lambda` must be a nonnegative number or `inf`, got {self.lam}")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ConfigError("`positive-fraction` must lie strictly between 0 and 1")
        if self.learning_rate <= 0:
            raise ConfigError("`learning-rate` must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("`lr-decay` must lie in (0, 1]")
        for name in ("lr_decay_epochs", "epochs", "batch_size", "margin_capacity",
                     "margin_interval", "patience", "validation_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"`{name.replace('_', '-')}` must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("`steps-per-epoch` must be positive")
        if self.ident_identities is not None and self.ident_identities < 1:
            raise ConfigError("`ident-identities` must be positive")
        if self.initial_margin < 0:
            raise ConfigError("`initial-margin` must be nonnegative")
        object.__setattr__(self, "verif_kind", VerifKind(self.verif_kind))

    @property
    def schedule(self) -> LearningRate:
        return LearningRate(self.learning_rate, self.lr_decay, self.lr_decay_epochs)

    @property
    def uses_verification(self) -> bool:
        return self.verif_kind != VerifKind.NONE and (self.verification_only or self.lam > 0)

    @property
    def uses_identification(self) -> bool:
        return not self.verification_only

    @property
    def verif_weight(self) -> float:
        return 1.0 if self.verification_only else self.lam

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrainConfig:
        """Build from a `[train]` table with kebab-case keys."""
        fields = {field.name.replace("_", "-"): field.name for field in dataclasses.fields(cls)}
        fields.pop("lam")
        fields.pop("verification-only")
        values: dict[str, Any] = {}
        for key, value in data.items():
            if key == "lambda":
                values["lam"], values["verification_only"] = parse_lambda(value)
            elif key in fields:
                values[fields[key]] = value
            else:
                raise ConfigError(f"unknown key in [train]: `{key}`")
        if "verif_kind" in values:
            try:
                values["verif_kind"] = VerifKind(values["verif_kind"])
            except ValueError:
                raise ConfigError(f"Invalid verif-kind: {values['verif_kind']!r}") from None
        return cls(**values)


class SampledPair(NamedTuple):
    i: int
    """Dataset index of the first member."""

    j: int
    same: bool
    fallback: bool
    """A same-identity pair was requested but no identity has two samples."""


def sample_pair(
    ds: LabeledDataset, rng: np.random.Generator, positive_fraction: float = 0.5
) -> SampledPair:
    """Draw a same-identity pair with probability `positive_fraction`, else a cross pair."""
    if ds.n_identities < 2:
        raise LabelError("pair sampling needs at least two identities")
    want_same = rng.random() < positive_fraction
    if want_same:
        multi = [members for members in ds.index if len(members) >= 2]
        if multi:
            members = multi[rng.integers(len(multi))]
            i, j = rng.choice(members, size=2, replace=False)
            return SampledPair(int(i), int(j), True, False)

    a, b = rng.choice(ds.n_identities, size=2, replace=False)
    i = ds.index[a][rng.integers(len(ds.index[a]))]
    j = ds.index[b][rng.integers(len(ds.index[b]))]
    return SampledPair(int(i), int(j), False, want_same)


class PairBatch(NamedTuple):
    x_i: Tensor
    x_j: Tensor
    l_i: npt.NDArray[np.int64]
    l_j: npt.NDArray[np.int64]


@dataclasses.dataclass
class PairSampler:
    """Draws pair batches from a dataset and counts negative fallbacks."""

    ds: LabeledDataset
    rng: np.random.Generator
    positive_fraction: float = 0.5
    flip_augment: bool = False
    fallbacks: int = 0

    def pairs(self, count: int) -> list[SampledPair]:
        pairs = [sample_pair(self.ds, self.rng, self.positive_fraction) for _ in range(count)]
        fallbacks = sum(pair.fallback for pair in pairs)
        if fallbacks and not self.fallbacks:
            logger.warning("No identity has two samples; drawing cross-identity pairs instead")
        self.fallbacks += fallbacks
        return pairs

    def batch(self, count: int) -> PairBatch:
        pairs = self.pairs(count)
        i = np.array([pair.i for pair in pairs], dtype=np.intp)
        j = np.array([pair.j for pair in pairs], dtype=np.intp)
        x_i, x_j = self.ds.images[i], self.ds.images[j]
        if self.flip_augment:
            x_i = self._flip(x_i)
            x_j = self._flip(x_j)
        return PairBatch(x_i, x_j, self.ds.labels[i], self.ds.labels[j])

    def _flip(self, images: Tensor) -> Tensor:
        flip = self.rng.random(images.shape[0]) < 0.5
        return np.where(flip[:, None, None, None], images[..., ::-1], images)


class StepResult(NamedTuple):
    params: NetworkParams
    """Parameters after the update."""

    ident_loss: float
    """Identification loss of both members, averaged over pairs."""

    verif_loss: float
    """Unweighted verification loss, averaged over pairs."""

    grads: dict[str, Tensor]
    """Gradients of the averaged objective."""

    distances: Tensor
    """Per-pair feature distances, for margin updates."""

    same: npt.NDArray[np.bool_]


def _objective(
    batch: PairBatch, params: NetworkParams, net: NetworkConfig, cfg: TrainConfig
) -> tuple[float, float, dict[str, Tensor], Tensor, Tensor]:
    n = batch.x_i.shape[0]
    if batch.x_j.shape[0] != n or n == 0:
        raise ShapeError("a pair batch needs the same positive number of first and second members")
    f, trace = forward(np.concatenate([batch.x_i, batch.x_j]), params, net)
    f_i, f_j = f[:n], f[n:]
    y = pair_label(batch.l_i, batch.l_j)

    df = np.zeros_like(f)
    grads: dict[str, Tensor] = {}
    ident = 0.0
    if cfg.uses_identification:
        targets = np.concatenate([batch.l_i, batch.l_j])
        mask = targets < params.n_identities if cfg.ident_identities is not None else None
        result = ident_loss(f, targets, params["softmax.weight"], params["softmax.bias"], mask=mask)
        df += result.df
        grads["softmax.weight"] = result.dweight
        grads["softmax.bias"] = result.dbias
        ident = float(np.sum(result.loss)) / n

    verif = 0.0
    if cfg.uses_verification:
        weight = cfg.verif_weight
        result = verif_loss(
            cfg.verif_kind,
            f_i,
            f_j,
            y,
            margin=params.margin,
            scale=float(params["verif.scale"]),
            shift=float(params["verif.shift"]),
        )
        df[:n] += weight * result.df_i
        df[n:] += weight * result.df_j
        if cfg.verif_kind == VerifKind.COSINE:
            grads["verif.scale"] = np.asarray(weight * result.dscale)
            grads["verif.shift"] = np.asarray(weight * result.dshift)
        verif = float(np.sum(result.loss)) / n

    theta_c, _ = backward(df, trace, params, net)
    grads.update(theta_c)
    grads = {name: grad / n for name, grad in grads.items()}
    return ident, verif, grads, f_i, f_j


def objective(
    batch: PairBatch, params: NetworkParams, net: NetworkConfig, cfg: TrainConfig
) -> float:
    """The averaged training objective `Ident(f_i) + Ident(f_j) + λ·Verif`."""
    ident, verif, _, _, _ = _objective(batch, params, net, cfg)
    return ident + cfg.verif_weight * verif if cfg.uses_verification else ident


def train_step(
    batch: PairBatch,
    params: NetworkParams,
    net: NetworkConfig,
    cfg: TrainConfig,
    lr: float,
) -> StepResult:
    """One SGD step on a pair batch; the input parameters are left untouched."""
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    try:
        ident, verif, grads, f_i, f_j = _objective(batch, params, net, cfg)
    except NonFiniteError as err:
        raise TrainingDivergedError(
            "training diverged: undefined verification signal",
            diagnostics={"cause": str(err), "margin": params.margin, "learning_rate": lr},
        ) from err

    bad = sorted(name for name, grad in grads.items() if not np.all(np.isfinite(grad)))
    if bad or not (math.isfinite(ident) and math.isfinite(verif)):
        raise TrainingDivergedError(
            "training diverged: non-finite loss or gradient",
            diagnostics={
                "ident_loss": ident,
                "verif_loss": verif,
                "margin": params.margin,
                "learning_rate": lr,
                "non_finite_gradients": bad,
            },
        )

    tensors = {
        name: (value - lr * grads[name]) if name in grads else value
        for name, value in params.tensors.items()
    }
    same = batch.l_i == batch.l_j
    return StepResult(
        NetworkParams(tensors),
        ident,
        verif,
        grads,
        pair_distances(cfg.verif_kind, f_i, f_j),
        same,
    )


def extract_features(
    images: Tensor, params: NetworkParams, net: NetworkConfig, batch_size: int = 256
) -> Tensor:
    """DeepID2 features of `(N, C, H, W)` images as `(N, feature_dim)`."""
    if images.shape[0] == 0:
        return np.zeros((0, net.feature_dim))
    chunks = [
        forward(images[start : start + batch_size], params, net)[0]
        for start in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(chunks)


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    epoch: int
    ident_loss: float
    verif_loss: float
    val_accuracy: float
    margin: float


REPORT_COLUMNS = ["epoch", "ident_loss", "verif_loss", "val_accuracy", "margin"]


@dataclasses.dataclass
class TrainReport:
    records: list[EpochRecord] = dataclasses.field(default_factory=list)
    best_epoch: int = -1
    best_accuracy: float = 0.0
    negative_fallbacks: int = 0
    stopped_early: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [dataclasses.astuple(record) for record in self.records], columns=REPORT_COLUMNS
        )

    def write_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False)


def validation_pairs(ds: LabeledDataset, count: int, seed: int) -> PairSet:
    """A fixed set of pairs, half of them same-identity in expectation."""
    rng = np.random.default_rng([seed, 1])
    pairs = [sample_pair(ds, rng, 0.5) for _ in range(count)]
    return PairSet(
        np.array([pair.i for pair in pairs], dtype=np.intp),
        np.array([pair.j for pair in pairs], dtype=np.intp),
        np.array([pair.same for pair in pairs], dtype=bool),
    )


def l2_accuracy(features: Tensor, pairs: PairSet) -> float:
    """Verification accuracy of thresholded L2 distances at the best threshold."""
    distances = np.linalg.norm(features[pairs.i] - features[pairs.j], axis=1)
    return verification_metrics(-distances, pairs.same).accuracy


def train(
    ds: LabeledDataset,
    val: LabeledDataset,
    cfg: TrainConfig,
    net: NetworkConfig,
) -> tuple[NetworkParams, TrainReport]:
    """Train from scratch, returning the parameters of the best validation epoch."""
    if len(ds) == 0 or len(val) == 0:
        raise LabelError("training and validation sets must be non-empty")
    overlap = set(ds.identities) & set(val.identities)
    if overlap:
        raise LabelError(
            f"training and validation identities overlap: {sorted(overlap)[:5]}"
        )
    if ds.image_shape != tuple(net.input_shape) or val.image_shape != tuple(net.input_shape):
        raise ShapeError(
            f"network expects images of shape {tuple(net.input_shape)}, "
            f"got {ds.image_shape} and {val.image_shape}"
        )

    n_classes = ds.n_identities
    if cfg.ident_identities is not None:
        if cfg.ident_identities > ds.n_identities:
            logger.warning(
                "Requested %d identification identities but only %d exist; using all",
                cfg.ident_identities,
                ds.n_identities,
            )
        n_classes = min(cfg.ident_identities, ds.n_identities)
    if not cfg.uses_identification and not cfg.uses_verification:
        logger.warning("Neither supervisory signal is active; parameters will not change")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(net, cfg.seed, n_identities=n_classes, margin=cfg.initial_margin)
    sampler = PairSampler(ds, rng, cfg.positive_fraction, cfg.flip_augment)
    margin = MarginState(margin=cfg.initial_margin, capacity=cfg.margin_capacity)
    tracks_margin = cfg.uses_verification and cfg.verif_kind.uses_margin
    steps = cfg.steps_per_epoch or math.ceil(len(ds) / cfg.batch_size)
    val_pairs = validation_pairs(val, cfg.validation_pairs, cfg.seed)

    report = TrainReport()
    best = params
    since_update = 0
    stale = 0
    for epoch in range(cfg.epochs):
        lr = cfg.schedule(epoch)
        ident_total = verif_total = 0.0
        for index in range(steps):
            try:
                step = train_step(sampler.batch(cfg.batch_size), params, net, cfg, lr)
            except TrainingDivergedError as err:
                raise TrainingDivergedError(
                    err.message, diagnostics={"epoch": epoch, "step": index, **err.diagnostics}
                ) from err
            params = step.params
            ident_total += step.ident_loss
            verif_total += step.verif_loss
            if tracks_margin:
                margin.record(step.distances, step.same)
                since_update += len(step.distances)
                if margin.filled and since_update >= cfg.margin_interval:
                    update = update_margin(margin)
                    params = params.with_margin(update.margin)
                    since_update = 0
                    logger.debug(
                        "Margin set to %.4f (%d buffer errors)", update.margin, update.errors
                    )

        features = extract_features(val.images, params, net)
        accuracy = l2_accuracy(features, val_pairs)
        record = EpochRecord(
            epoch, ident_total / steps, verif_total / steps, accuracy, params.margin
        )
        report.records.append(record)
        logger.info(
            "Epoch %d: ident %.4f, verif %.4f, validation accuracy %.4f, margin %.4f",
            epoch,
            record.ident_loss,
            record.verif_loss,
            accuracy,
            record.margin,
        )

        if accuracy > report.best_accuracy or report.best_epoch < 0:
            report.best_accuracy = accuracy
            report.best_epoch = epoch
            best = params
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("Stopping early after epoch %d", epoch)
                report.stopped_early = True
                break

    report.negative_fallbacks = sampler.fallbacks
    return best, report
