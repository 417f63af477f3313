"""The face verification pipeline built on trained patch networks.

Images are aligned to a canonical landmark template by a similarity transform, cropped
into an ensemble of patches, and each patch is embedded by its own network. A
forward-backward greedy search picks complementary patches; each selected group is
compressed by PCA and scored by Joint Bayesian, and the group scores are fused by a
hinge-trained linear model.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import numpy.typing as npt
import scipy.ndimage

from deepid.convnet import NetworkConfig, NetworkParams, forward
from deepid.dataset import LabeledDataset, PairSet
from deepid.errors import (
    AlignmentError,
    ConfigError,
    DegenerateCropError,
    LabelError,
    MissingNetworkError,
    SelectionError,
    ShapeError,
)
from deepid.jointbayes import JointBayesModel, fit_em, group_features, score_pairs
from deepid.tensor import Matrix, Tensor, as_matrix, sym_eigendecompose
from deepid.tensorio import load_tensors, save_tensors
from deepid.thresholds import scan_threshold

logger = logging.getLogger(__name__)


# Alignment.


@dataclasses.dataclass(frozen=True)
class LandmarkSet:
    points: Tensor
    """Ordered `(K, 2)` `(x, y)` image coordinates."""

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ShapeError(f"landmarks must be (K, 2), got {points.shape}")
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def check_bounds(self, height: int, width: int) -> None:
        x, y = self.points[:, 0], self.points[:, 1]
        if np.any(x < 0) or np.any(y < 0) or np.any(x > width - 1) or np.any(y > height - 1):
            raise AlignmentError(f"landmarks lie outside a {height}x{width} image")


@dataclasses.dataclass(frozen=True)
class SimilarityTransform:
    """`p ↦ s·R(angle)·p + t` on `(x, y)` points."""

    scale: float = 1.0
    angle: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise AlignmentError(f"similarity scale must be positive, got {self.scale}")

    @property
    def rotation(self) -> Matrix:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    @property
    def matrix(self) -> Matrix:
        """Homogeneous `3x3` matrix."""
        m = np.eye(3)
        m[:2, :2] = self.scale * self.rotation
        m[:2, 2] = self.translation
        return m

    def apply(self, points: npt.ArrayLike) -> Tensor:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + np.asarray(self.translation)

    def inverse(self) -> SimilarityTransform:
        inverse_scale = 1.0 / self.scale
        rotation = np.array([[math.cos(-self.angle), -math.sin(-self.angle)],
                             [math.sin(-self.angle), math.cos(-self.angle)]])
        t = -inverse_scale * rotation @ np.asarray(self.translation)
        return SimilarityTransform(inverse_scale, -self.angle, (float(t[0]), float(t[1])))

    def compose(self, other: SimilarityTransform) -> SimilarityTransform:
        """The transform applying `other` first, then `self`."""
        t = self.scale * self.rotation @ np.asarray(other.translation) + np.asarray(
            self.translation
        )
        angle = math.remainder(self.angle + other.angle, 2.0 * math.pi)
        return SimilarityTransform(self.scale * other.scale, angle, (float(t[0]), float(t[1])))


class Alignment(NamedTuple):
    transform: SimilarityTransform
    residual: float
    """Sum of squared distances between transformed source and destination points."""


def estimate_similarity(src: LandmarkSet, dst: LandmarkSet) -> Alignment:
    """Least-squares similarity mapping `src` onto `dst`, in closed form."""
    if len(src) != len(dst):
        raise AlignmentError(f"{len(src)} source landmarks for {len(dst)} destination landmarks")
    if len(src) < 2:
        raise AlignmentError("alignment needs at least two landmarks")
    src_mean = src.points.mean(axis=0)
    dst_mean = dst.points.mean(axis=0)
    s = src.points - src_mean
    d = dst.points - dst_mean
    spread = float(np.sum(s * s))
    if spread <= np.finfo(np.float64).tiny:
        raise AlignmentError("source landmarks coincide")

    a = float(np.sum(s[:, 0] * d[:, 0] + s[:, 1] * d[:, 1]))
    b = float(np.sum(s[:, 0] * d[:, 1] - s[:, 1] * d[:, 0]))
    scale = math.hypot(a, b) / spread
    if scale == 0.0:
        raise AlignmentError("destination landmarks coincide")
    angle = math.atan2(b, a)
    rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    t = dst_mean - scale * rotation @ src_mean
    transform = SimilarityTransform(scale, angle, (float(t[0]), float(t[1])))
    residual = float(np.sum((transform.apply(src.points) - dst.points) ** 2))
    return Alignment(transform, residual)


# Patches.


@dataclasses.dataclass(frozen=True)
class PatchSpec:
    name: str
    network: str
    """The network embedding this patch; a patch and its mirror image share one."""

    anchor: int | None = None
    """Template landmark the patch is centred on; `None` centres it on the frame."""

    offset: tuple[float, float] = (0.0, 0.0)
    """`(dx, dy)` from the anchor, in canonical pixels."""

    extents: tuple[int, int] = (28, 24)
    """Output `(height, width)`."""

    scale: float = 1.0
    """Canonical pixels per output pixel."""

    channels: tuple[int, ...] | None = None
    """Selected image channels; `None` keeps all."""

    flip: bool = False

    def __post_init__(self) -> None:
        h, w = self.extents
        if h < 1 or w < 1:
            raise DegenerateCropError(f"patch `{self.name}` has empty extents {self.extents}")
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise DegenerateCropError(f"patch `{self.name}` has invalid scale {self.scale}")
        if self.channels is not None and not self.channels:
            raise DegenerateCropError(f"patch `{self.name}` selects no channels")

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "name": self.name,
            "network": self.network,
            "offset": list(self.offset),
            "extents": list(self.extents),
            "scale": self.scale,
            "flip": self.flip,
        }
        if self.anchor is not None:
            data["anchor"] = self.anchor
        if self.channels is not None:
            data["channels"] = list(self.channels)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PatchSpec:
        unknown = set(data) - {
            "name", "network", "anchor", "offset", "extents", "scale", "channels", "flip"
        }
        if unknown:
            raise ConfigError(f"unknown keys in patch spec: {sorted(unknown)}")
        try:
            return cls(
                name=str(data["name"]),
                network=str(data.get("network", data["name"])),
                anchor=data.get("anchor"),
                offset=tuple(float(v) for v in data.get("offset", (0.0, 0.0))),  # type: ignore
                extents=tuple(int(v) for v in data.get("extents", (28, 24))),  # type: ignore
                scale=float(data.get("scale", 1.0)),
                channels=tuple(data["channels"]) if "channels" in data else None,
                flip=bool(data.get("flip", False)),
            )
        except KeyError as err:
            raise ConfigError(f"patch spec is missing `{err.args[0]}`") from None


def default_patch_pool(extents: tuple[int, int] = (28, 24)) -> list[PatchSpec]:
    """Twelve patches varying position, scale and mirroring over a five-point template."""
    pool = [
        PatchSpec("full", "full", extents=extents),
        PatchSpec("full-flip", "full", extents=extents, flip=True),
        PatchSpec("center", "center", extents=extents, scale=0.75),
        PatchSpec("upper", "upper", offset=(0.0, -5.0), extents=extents, scale=0.6),
        PatchSpec("upper-flip", "upper", offset=(0.0, -5.0), extents=extents, scale=0.6, flip=True),
        PatchSpec("lower", "lower", offset=(0.0, 5.0), extents=extents, scale=0.6),
    ]
    for anchor, name in enumerate(("eye-left", "eye-right", "nose", "mouth-left", "mouth-right")):
        pool.append(PatchSpec(name, name, anchor=anchor, extents=extents, scale=0.5))
    pool.append(
        PatchSpec("eye-left-flip", "eye-left", anchor=0, extents=extents, scale=0.5, flip=True)
    )
    return pool


def _patch_center(spec: PatchSpec, template: Tensor | None, frame: tuple[int, int]) -> Tensor:
    if spec.anchor is None:
        center = np.array([(frame[1] - 1) / 2.0, (frame[0] - 1) / 2.0])
    else:
        if template is None or not 0 <= spec.anchor < len(template):
            raise DegenerateCropError(
                f"patch `{spec.name}` anchors on landmark {spec.anchor}, "
                "which the template does not have"
            )
        center = np.asarray(template[spec.anchor], dtype=np.float64)
    return center + np.asarray(spec.offset)


def extract_patch(
    image: Tensor,
    spec: PatchSpec,
    transform: SimilarityTransform | None = None,
    *,
    template: Tensor | None = None,
) -> Tensor:
    """Bilinearly resample the patch of a `(C, H, W)` image.

    `transform` maps image coordinates to the canonical frame, whose extents are those of
    the image. Samples outside the image replicate the nearest edge pixel. Mirroring is
    applied last.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got {image.shape}")
    c, height, width = image.shape
    h, w = spec.extents
    center = _patch_center(spec, template, (height, width))

    cols = center[0] + (np.arange(w) - (w - 1) / 2.0) * spec.scale
    rows = center[1] + (np.arange(h) - (h - 1) / 2.0) * spec.scale
    grid_x, grid_y = np.meshgrid(cols, rows)
    canonical = np.stack([grid_x.ravel(), grid_y.ravel()], axis=1)
    source = canonical if transform is None else transform.inverse().apply(canonical)
    sx, sy = source[:, 0], source[:, 1]
    if not np.any((sx >= 0) & (sx <= width - 1) & (sy >= 0) & (sy <= height - 1)):
        raise DegenerateCropError(f"patch `{spec.name}` lies entirely outside the image")

    channels = range(c) if spec.channels is None else spec.channels
    if any(not 0 <= k < c for k in channels):
        raise ShapeError(f"patch `{spec.name}` selects channels {spec.channels} of {c}")
    patch = np.stack(
        [
            scipy.ndimage.map_coordinates(image[k], [sy, sx], order=1, mode="nearest").reshape(h, w)
            for k in channels
        ]
    )
    return patch[..., ::-1].copy() if spec.flip else patch


def align_images(
    landmarks: Tensor | None,
    template: Tensor | None,
    count: int,
    extents: tuple[int, int] | None = None,
) -> list[SimilarityTransform | None]:
    """Per-image transforms onto `template`; no landmarks means no alignment.

    With `extents`, landmarks outside a `(height, width)` image raise `AlignmentError`.
    """
    if landmarks is None or template is None:
        return [None] * count
    target = LandmarkSet(template)
    transforms: list[SimilarityTransform | None] = []
    for points in landmarks:
        source = LandmarkSet(points)
        if extents is not None:
            source.check_bounds(*extents)
        transforms.append(estimate_similarity(source, target).transform)
    return transforms


def extract_patches(
    ds: LabeledDataset, spec: PatchSpec, template: Tensor | None = None
) -> LabeledDataset:
    """The dataset of one patch, aligned per image when landmarks are present."""
    transforms = align_images(ds.landmarks, template, len(ds), ds.image_shape[1:])
    images = np.stack(
        [
            extract_patch(ds.images[k], spec, transforms[k], template=template)
            for k in range(len(ds))
        ]
    )
    return LabeledDataset(images, ds.labels, ds.identities, paths=ds.paths)


@dataclasses.dataclass(frozen=True)
class PatchNetwork:
    config: NetworkConfig
    params: NetworkParams

    def embed(self, patches: Tensor, batch_size: int = 256) -> Tensor:
        """DeepID2 features of `(N, C, h, w)` patches."""
        expected = tuple(self.config.input_shape)
        if patches.shape[1:] != expected:
            raise ShapeError(
                f"network expects patches of shape {expected}, got {patches.shape[1:]}"
            )
        return np.concatenate(
            [
                forward(patches[start : start + batch_size], self.params, self.config)[0]
                for start in range(0, patches.shape[0], batch_size)
            ]
        )


def _network_for(spec: PatchSpec, networks: Mapping[str, PatchNetwork]) -> PatchNetwork:
    try:
        return networks[spec.network]
    except KeyError:
        raise MissingNetworkError(
            f"no trained network `{spec.network}` for patch `{spec.name}`"
        ) from None


def extract_ensemble(
    image: Tensor,
    landmarks: Tensor | None,
    specs: Sequence[PatchSpec],
    networks: Mapping[str, PatchNetwork],
    *,
    template: Tensor | None = None,
) -> Tensor:
    """Concatenated patch features of one image, in spec order."""
    points = None if landmarks is None else landmarks[None]
    transform = align_images(points, template, 1, (image.shape[1], image.shape[2]))[0]
    blocks = []
    for spec in specs:
        network = _network_for(spec, networks)
        patch = extract_patch(image, spec, transform, template=template)
        blocks.append(network.embed(patch[None])[0])
    return np.concatenate(blocks)


def patch_features(
    ds: LabeledDataset,
    specs: Sequence[PatchSpec],
    networks: Mapping[str, PatchNetwork],
    *,
    template: Tensor | None = None,
) -> dict[str, Tensor]:
    """Per-patch feature blocks `(N, D)` of every image, keyed by patch name."""
    for spec in specs:
        _network_for(spec, networks)
    blocks = {}
    for spec in specs:
        patches = extract_patches(ds, spec, template)
        blocks[spec.name] = networks[spec.network].embed(patches.images)
    return blocks


def extract_ensemble_batch(
    ds: LabeledDataset,
    specs: Sequence[PatchSpec],
    networks: Mapping[str, PatchNetwork],
    *,
    template: Tensor | None = None,
) -> Tensor:
    """Concatenated patch features of every image: `(N, Σ D)`."""
    blocks = patch_features(ds, specs, networks, template=template)
    return np.concatenate([blocks[spec.name] for spec in specs], axis=1)


# PCA.


@dataclasses.dataclass(frozen=True)
class PCAProjection:
    mean: Tensor
    basis: Matrix
    """Orthonormal principal axes as columns, `(D, k)`."""

    eigenvalues: Tensor
    """All sample-covariance eigenvalues, descending."""

    @property
    def explained_variance_ratio(self) -> Tensor:
        total = self.eigenvalues.sum()
        k = self.basis.shape[1]
        return self.eigenvalues[:k] / total if total > 0 else np.zeros(k)

    def project(self, x: npt.ArrayLike) -> Tensor:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.basis

    def reconstruct(self, z: npt.ArrayLike) -> Tensor:
        return np.asarray(z, dtype=np.float64) @ self.basis.T + self.mean


def _complete_basis(basis: Matrix, dim: int) -> Matrix:
    """Extend orthonormal columns with coordinate axes, orthogonalized, up to `dim` columns."""
    columns = [basis[:, k] for k in range(basis.shape[1])]
    for axis in range(dim):
        candidate = np.eye(dim)[axis]
        for column in columns:
            candidate = candidate - (column @ candidate) * column
        norm = np.linalg.norm(candidate)
        if norm > 1e-8:
            columns.append(candidate / norm)
    return np.stack(columns, axis=1)


def fit_pca(features: npt.ArrayLike, out_dim: int) -> PCAProjection:
    """Top `out_dim` principal axes of the sample covariance, by Jacobi eigendecomposition.

    With fewer samples than dimensions the `N x N` Gram matrix is decomposed instead.
    """
    x = as_matrix(features)
    n, dim = x.shape
    if out_dim < 1 or out_dim > min(n - 1, dim):
        raise ShapeError(
            f"cannot keep {out_dim} components of {n} samples in {dim} dimensions"
        )
    mean = x.mean(axis=0)
    centered = x - mean
    if n <= dim:
        gram = centered @ centered.T / (n - 1)
        eigenvalues, u = sym_eigendecompose(gram)
        eigenvalues = np.maximum(eigenvalues, 0.0)
        keep = int(np.count_nonzero(eigenvalues[:out_dim] > eigenvalues[0] * 1e-12))
        basis = centered.T @ u[:, :keep] / np.sqrt((n - 1) * eigenvalues[:keep])
        if keep < out_dim:
            basis = _complete_basis(basis, dim)[:, :out_dim]
        spectrum = np.concatenate([eigenvalues, np.zeros(dim - n)])
    else:
        covariance = centered.T @ centered / (n - 1)
        spectrum, vectors = sym_eigendecompose(covariance)
        spectrum = np.maximum(spectrum, 0.0)
        basis = vectors[:, :out_dim]
    return PCAProjection(mean, basis, spectrum)


def save_pca(path: str | Path, pca: PCAProjection) -> None:
    save_tensors(
        path,
        {"mean": pca.mean, "basis": pca.basis, "eigenvalues": pca.eigenvalues},
        {"kind": "pca"},
    )


def load_pca(path: str | Path) -> PCAProjection:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "pca":
        raise ConfigError(f"{path} does not contain a PCA projection")
    return PCAProjection(tensors["mean"], tensors["basis"], tensors["eigenvalues"])


# Patch selection.


Evaluator = Callable[[Sequence[str], Mapping[str, Tensor], PairSet], float]
"""Validation accuracy of the concatenated features of the named patches."""


def concatenate(subset: Sequence[str], pool: Mapping[str, Tensor]) -> Tensor:
    return np.concatenate([pool[name] for name in subset], axis=1)


def l2_evaluator(subset: Sequence[str], pool: Mapping[str, Tensor], pairs: PairSet) -> float:
    """Accuracy of thresholded L2 distances between concatenated features."""
    x = concatenate(subset, pool)
    distances = np.linalg.norm(x[pairs.i] - x[pairs.j], axis=1)
    return scan_threshold(-distances, pairs.same, below=False).accuracy


def joint_bayes_evaluator(
    train_pool: Mapping[str, Tensor],
    train_labels: npt.ArrayLike,
    pca_dim: int | None = None,
) -> Evaluator:
    """An evaluator fitting Joint Bayesian (after optional PCA) on training features."""

    def evaluate(subset: Sequence[str], pool: Mapping[str, Tensor], pairs: PairSet) -> float:
        train = concatenate(subset, train_pool)
        x = concatenate(subset, pool)
        if pca_dim is not None:
            dims = min(pca_dim, train.shape[0] - 1, train.shape[1])
            pca = fit_pca(train, dims)
            train, x = pca.project(train), pca.project(x)
        model = fit_em(group_features(train, train_labels))
        scores = score_pairs(model, x[pairs.i], x[pairs.j])
        return scan_threshold(scores, pairs.same, below=False).accuracy

    return evaluate


class SelectionStep(NamedTuple):
    action: str
    """`add` or `remove`."""

    patch: str
    accuracy: float
    """Validation accuracy after the step."""


@dataclasses.dataclass
class SelectionState:
    pool: tuple[str, ...]
    selected: list[str] = dataclasses.field(default_factory=list)
    accuracies: list[float] = dataclasses.field(default_factory=list)
    """Accuracy at the end of each accepted forward step and its removals."""

    steps: list[SelectionStep] = dataclasses.field(default_factory=list)
    gains: dict[str, float] = dataclasses.field(default_factory=dict)
    """Accuracy gained when each selected patch was admitted."""

    @property
    def accuracy(self) -> float:
        return self.accuracies[-1] if self.accuracies else 0.0


def select_patches(
    pool: Mapping[str, Tensor],
    budget: int,
    pairs: PairSet,
    evaluator: Evaluator = l2_evaluator,
    *,
    rho: float = 0.5,
    min_gain: float = 0.0,
    exclude: Sequence[str] = (),
) -> SelectionState:
    """Forward-backward greedy selection of at most `budget` patches.

    A forward step admits the candidate with the highest validation accuracy if it
    gains strictly more than `min_gain`; ties go to the earlier candidate. Backward
    steps then drop the cheapest selected patch while its removal costs less than `rho`
    times its admission gain and the removals of this round together cost less than
    `rho` times the gain just made. Every round therefore ends with strictly higher
    accuracy than the last, so the search terminates.
    """
    names = tuple(name for name in pool if name not in set(exclude))
    if not names:
        raise ConfigError("patch selection needs a non-empty candidate pool")
    if not 1 <= budget <= len(names):
        raise ConfigError(f"selection budget {budget} must lie in 1..{len(names)}")
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"backward tolerance must lie in [0, 1), got {rho}")

    state = SelectionState(pool=names)

    def evaluate(subset: list[str]) -> float:
        try:
            return float(evaluator(subset, pool, pairs))
        except Exception as err:
            raise SelectionError(
                f"evaluator failed on patches {subset}: {err}", state=state
            ) from err

    current = 0.0
    while len(state.selected) < budget:
        candidates = [name for name in names if name not in state.selected]
        scored = [(evaluate([*state.selected, name]), name) for name in candidates]
        best_accuracy, best = max(scored, key=lambda item: item[0])
        gain = best_accuracy - current
        if not gain > min_gain:
            logger.debug("No candidate improves on %.4f; stopping", current)
            break
        state.selected.append(best)
        state.gains[best] = gain
        state.steps.append(SelectionStep("add", best, best_accuracy))
        current = best_accuracy
        logger.debug("Added patch `%s`: accuracy %.4f", best, current)

        spent = 0.0
        while len(state.selected) > 1:
            removable = [name for name in state.selected if name != best]
            costs = [(current - evaluate([n for n in state.selected if n != name]), name)
                     for name in removable]
            cost, worst = min(costs, key=lambda item: item[0])
            if not (cost < rho * state.gains[worst] and spent + cost < rho * gain):
                break
            state.selected.remove(worst)
            del state.gains[worst]
            spent += cost
            current -= cost
            state.steps.append(SelectionStep("remove", worst, current))
            logger.debug("Removed patch `%s`: accuracy %.4f", worst, current)
        state.accuracies.append(current)

    return state


def select_groups(
    pool: Mapping[str, Tensor],
    budget: int,
    pairs: PairSet,
    groups: int,
    evaluator: Evaluator = l2_evaluator,
    *,
    rho: float = 0.5,
    min_gain: float = 0.0,
) -> list[SelectionState]:
    """Repeat selection, each round choosing only among patches not selected before."""
    if groups < 1:
        raise ConfigError("at least one selection group is required")
    states: list[SelectionState] = []
    used: list[str] = []
    for group in range(groups):
        remaining = [name for name in pool if name not in used]
        if not remaining:
            logger.warning("Pool exhausted after %d of %d groups", group, groups)
            break
        state = select_patches(
            pool,
            min(budget, len(remaining)),
            pairs,
            evaluator,
            rho=rho,
            min_gain=min_gain,
            exclude=used,
        )
        if not state.selected:
            logger.warning("Selection group %d admitted no patches", group)
            break
        states.append(state)
        used.extend(state.selected)
    return states


# Fusion.


@dataclasses.dataclass(frozen=True)
class FusionModel:
    weights: Tensor
    """Weights on standardized group scores."""

    bias: float
    center: Tensor
    scale: Tensor

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
            raise ValueError("fusion weights must be finite")

def _labels(labels: npt.ArrayLike) -> Tensor:
    labels = np.asarray(labels)
    positive = labels > 0 if labels.dtype != np.bool_ else labels
    if positive.all() or not positive.any():
        raise LabelError("fusion needs both same and different pairs")
    return np.where(positive, 1.0, -1.0)


def fit_fusion(
    scores: npt.ArrayLike,
    labels: npt.ArrayLike,
    *,
    reg: float = 1e-3,
    lr: float = 0.1,
    epochs: int = 1000,
) -> FusionModel:
    """Linear model on `(P, k)` group scores minimizing `mean hinge + reg/2 ‖w‖²`.

    Scores are standardized first; training is deterministic full-batch subgradient
    descent from zero.
    """
    x = np.asarray(scores, dtype=np.float64)
    x = as_matrix(x[:, None] if x.ndim == 1 else x)
    y = _labels(labels)
    if y.shape != (x.shape[0],):
        raise ShapeError(f"{x.shape[0]} score rows for {y.shape[0]} labels")
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    z = (x - center) / scale

    w = np.zeros(z.shape[1])
    b = 0.0
    for _ in range(epochs):
        margins = y * (z @ w + b)
        active = margins < 1.0
        grad_w = reg * w - (y[active] @ z[active]) / len(y)
        grad_b = -float(y[active].sum()) / len(y)
        w -= lr * grad_w
        b -= lr * grad_b
    return FusionModel(w, b, center, scale)


def fuse(model: FusionModel, scores: npt.ArrayLike) -> Tensor:
    """Fused decision values; positive means "same identity"."""
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim == 1:
        # A vector is one score per pair for a single group, else one pair.
        x = x[:, None] if model.weights.size == 1 else x[None]
    return ((x - model.center) / model.scale) @ model.weights + model.bias


# The complete system.


@dataclasses.dataclass(frozen=True)
class GroupModel:
    patches: tuple[str, ...]
    pca: PCAProjection
    model: JointBayesModel

    def scores(self, pool: Mapping[str, Tensor], pairs: PairSet) -> Tensor:
        x = self.pca.project(concatenate(self.patches, pool))
        return score_pairs(self.model, x[pairs.i], x[pairs.j])


@dataclasses.dataclass(frozen=True)
class VerificationSystem:
    groups: tuple[GroupModel, ...]
    fusion: FusionModel
    threshold: float
    """Fused values above this are accepted as the same identity."""

    def group_scores(self, pool: Mapping[str, Tensor], pairs: PairSet) -> Tensor:
        return np.stack([group.scores(pool, pairs) for group in self.groups], axis=1)

    def score(self, pool: Mapping[str, Tensor], pairs: PairSet) -> Tensor:
        return fuse(self.fusion, self.group_scores(pool, pairs))

    def predict(self, pool: Mapping[str, Tensor], pairs: PairSet) -> npt.NDArray[np.bool_]:
        return self.score(pool, pairs) > self.threshold


def fit_group(
    patches: Sequence[str],
    train_pool: Mapping[str, Tensor],
    train_labels: npt.ArrayLike,
    pca_dim: int,
) -> GroupModel:
    train = concatenate(patches, train_pool)
    dims = min(pca_dim, train.shape[0] - 1, train.shape[1])
    pca = fit_pca(train, dims)
    logger.info(
        "PCA keeps %d of %d dimensions, %.1f%% of variance",
        dims,
        train.shape[1],
        100 * float(pca.explained_variance_ratio.sum()),
    )
    model = fit_em(group_features(pca.project(train), train_labels))
    return GroupModel(tuple(patches), pca, model)


def fit_verification_system(
    groups: Sequence[Sequence[str]],
    train_pool: Mapping[str, Tensor],
    train_labels: npt.ArrayLike,
    fusion_pool: Mapping[str, Tensor],
    fusion_pairs: PairSet,
    *,
    pca_dim: int = 32,
) -> VerificationSystem:
    """Fit PCA and Joint Bayesian per group on training identities, then fuse on pairs."""
    if not groups:
        raise ConfigError("a verification system needs at least one patch group")
    models = tuple(fit_group(patches, train_pool, train_labels, pca_dim) for patches in groups)
    scores = np.stack([group.scores(fusion_pool, fusion_pairs) for group in models], axis=1)
    fusion = fit_fusion(scores, fusion_pairs.same)
    fused = fuse(fusion, scores)
    threshold = scan_threshold(fused, fusion_pairs.same, below=False).threshold
    logger.info(
        "Fitted %d groups; fusion weights %s",
        len(models),
        np.array2string(fusion.weights, precision=3),
    )
    return VerificationSystem(models, fusion, threshold)
