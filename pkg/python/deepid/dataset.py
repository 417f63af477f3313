"""Labeled face datasets: the synthetic generator and manifest-based ingestion.

A manifest lists one image per line:

    relative/path.pgm<TAB>identity-label[<TAB>x1,y1;x2,y2;...]

Images are binary PGM (grayscale) or PPM (RGB) files; pixel values are scaled to
`[0, 1]`.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Mapping, Sequence
from functools import cached_property
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import numpy.typing as npt
import pandas as pd
import scipy.ndimage
from PIL import Image

from deepid.errors import ConfigError, ManifestError, OutputExistsError, ShapeError
from deepid.tensor import Tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"

# Pixel intensity of a zero-valued synthetic field, and the intensity per unit of field.
_BASE_INTENSITY = 0.5
_CONTRAST = 0.15


@dataclasses.dataclass
class LabeledDataset:
    """Images with densely indexed identity labels."""

    images: Tensor
    """Images as `(N, C, H, W)`."""

    labels: npt.NDArray[np.int64]
    """Identity label of every image, in `0..n_identities-1`."""

    identities: tuple[str, ...]
    """Original identity names; `identities[label]` names a label."""

    landmarks: Tensor | None = None
    """Optional landmarks as `(N, K, 2)` `(x, y)` image coordinates."""

    paths: tuple[str, ...] | None = None
    """Optional source paths, relative to the dataset root."""

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError("one label per image is required")
        if self.landmarks is not None and self.landmarks.shape[0] != len(self):
            raise ShapeError("one landmark set per image is required")
        counts = np.bincount(self.labels, minlength=len(self.identities))
        if len(counts) != len(self.identities) or np.any(counts == 0):
            raise ShapeError("labels must densely cover every identity")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def n_identities(self) -> int:
        return len(self.identities)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        c, h, w = self.images.shape[1:]
        return int(c), int(h), int(w)

    @cached_property
    def index(self) -> tuple[npt.NDArray[np.intp], ...]:
        """Sample indices of every identity."""
        return tuple(np.flatnonzero(self.labels == label) for label in range(self.n_identities))

    def subset(self, indices: npt.ArrayLike) -> LabeledDataset:
        """The given samples, with labels re-densified in order of first appearance."""
        indices = np.asarray(indices, dtype=np.intp)
        old = self.labels[indices]
        order = list(dict.fromkeys(old.tolist()))
        remap = {label: new for new, label in enumerate(order)}
        return LabeledDataset(
            images=self.images[indices],
            labels=np.array([remap[label] for label in old.tolist()], dtype=np.int64),
            identities=tuple(self.identities[label] for label in order),
            landmarks=None if self.landmarks is None else self.landmarks[indices],
            paths=None if self.paths is None else tuple(self.paths[i] for i in indices),
        )

    def with_identities(self, labels: Sequence[int]) -> LabeledDataset:
        """The samples of the given identities, relabelled in the given order."""
        wanted = {label: rank for rank, label in enumerate(labels)}
        indices = np.array(
            sorted(
                (i for i in range(len(self)) if int(self.labels[i]) in wanted),
                key=lambda i: (wanted[int(self.labels[i])], i),
            ),
            dtype=np.intp,
        )
        return self.subset(indices)


def split_identities(
    ds: LabeledDataset, fractions: Sequence[float], seed: int
) -> list[LabeledDataset]:
    """Partition identities (not samples) into disjoint datasets of the given fractions."""
    if not fractions or any(f <= 0 for f in fractions):
        raise ValueError("split fractions must be positive")
    rng = np.random.default_rng(seed)
    order = rng.permutation(ds.n_identities)
    total = float(sum(fractions))
    bounds = np.round(np.cumsum(fractions) / total * ds.n_identities).astype(int)
    parts = np.split(order, bounds[:-1])
    if any(len(part) == 0 for part in parts):
        raise ValueError(
            f"cannot split {ds.n_identities} identities into fractions {list(fractions)}"
        )
    return [ds.with_identities(sorted(part.tolist())) for part in parts]


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    identities: int = 32
    """Number of identities."""

    samples: int = 20
    """Samples per identity."""

    height: int = 28
    """Image height in pixels."""

    width: int = 24
    """Image width in pixels."""

    channels: int = 1
    """1 for grayscale, 3 for RGB."""

    prototype_variance: float = 1.0
    """Variance of each identity's smoothed prototype field."""

    smoothing: float = 1.5
    """Standard deviation, in pixels, of the prototype smoothing kernel."""

    noise: float = 0.5
    """Standard deviation of additive per-pixel noise."""

    shift: float = 1.5
    """Maximum absolute random translation, in pixels, along each axis."""

    brightness: float = 0.3
    """Maximum absolute additive brightness jitter."""

    landmarks: int = 5
    """Number of landmarks generated per image."""

    seed: int = 0
    """Random seed."""

    def __post_init__(self) -> None:
        if self.identities < 1 or self.samples < 1:
            raise ConfigError("`identities` and `samples` must be positive")
        if self.height < 2 or self.width < 2:
            raise ConfigError("image extents must be at least 2x2")
        if self.channels not in (1, 3):
            raise ConfigError("`channels` must be 1 or 3")
        if min(self.prototype_variance, self.noise, self.shift, self.brightness) < 0:
            raise ConfigError("variances and perturbation ranges must be nonnegative")
        if self.smoothing < 0 or self.landmarks < 0:
            raise ConfigError("`smoothing` and `landmarks` must be nonnegative")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SyntheticSpec:
        fields = {field.name.replace("_", "-"): field.name for field in dataclasses.fields(cls)}
        unknown = set(data) - set(fields)
        if unknown:
            raise ConfigError(f"unknown keys in [synthetic]: {sorted(unknown)}")
        return cls(**{fields[key]: value for key, value in data.items()})


def landmark_template(count: int, height: int, width: int) -> Tensor:
    """Canonical landmark positions `(count, 2)` as `(x, y)`, spread over the face."""
    if count == 0:
        return np.zeros((0, 2))
    # Eyes, nose tip, mouth corners for the first five; further points on an ellipse.
    base = [(0.3, 0.35), (0.7, 0.35), (0.5, 0.55), (0.35, 0.75), (0.65, 0.75)]
    points = base[:count]
    extra = count - len(points)
    for k in range(extra):
        angle = 2.0 * np.pi * k / extra
        points.append((0.5 + 0.35 * np.cos(angle), 0.5 + 0.4 * np.sin(angle)))
    template = np.asarray(points, dtype=np.float64)
    return template * np.array([width - 1, height - 1])


def _quantize(images: Tensor) -> Tensor:
    """Clip to `[0, 1]` and round to the 8-bit grid, as image files store them."""
    return np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0


def generate_dataset(spec: SyntheticSpec) -> LabeledDataset:
    """Draw a prototype-plus-perturbation dataset.

    Each identity is a smoothed random field; each sample shifts its prototype, adds
    per-pixel noise and a global brightness offset. Landmarks are the canonical template
    moved by the same shift.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.channels, spec.height, spec.width)
    template = landmark_template(spec.landmarks, spec.height, spec.width)

    prototypes = np.empty((spec.identities, *shape))
    for identity in range(spec.identities):
        field = rng.normal(size=shape)
        if spec.smoothing > 0:
            field = scipy.ndimage.gaussian_filter(
                field, sigma=(0, spec.smoothing, spec.smoothing), mode="nearest"
            )
        std = field.std()
        field = (field - field.mean()) / (std if std > 0 else 1.0)
        prototypes[identity] = field * np.sqrt(spec.prototype_variance)

    n = spec.identities * spec.samples
    images = np.empty((n, *shape))
    landmarks = np.empty((n, spec.landmarks, 2))
    labels = np.repeat(np.arange(spec.identities, dtype=np.int64), spec.samples)
    for k, identity in enumerate(labels):
        dy, dx = rng.uniform(-spec.shift, spec.shift, size=2) if spec.shift > 0 else (0.0, 0.0)
        sample = prototypes[identity]
        if dy or dx:
            sample = scipy.ndimage.shift(sample, (0, dy, dx), order=1, mode="nearest")
        if spec.noise > 0:
            sample = sample + rng.normal(scale=spec.noise, size=shape)
        if spec.brightness > 0:
            sample = sample + rng.uniform(-spec.brightness, spec.brightness)
        images[k] = _BASE_INTENSITY + _CONTRAST * sample
        landmarks[k] = template + np.array([dx, dy])

    width = len(str(spec.identities - 1))
    return LabeledDataset(
        images=_quantize(images),
        labels=labels,
        identities=tuple(f"identity-{i:0{width}d}" for i in range(spec.identities)),
        landmarks=np.clip(landmarks, 0.0, [spec.width - 1, spec.height - 1]),
    )


def _format_landmarks(points: Tensor) -> str:
    return ";".join(f"{x!r},{y!r}" for x, y in points.tolist())


def write_dataset(ds: LabeledDataset, root: str | Path, *, force: bool = False) -> Path:
    """Write images and a manifest under `root`; returns the manifest path."""
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if manifest.exists() and not force:
        raise OutputExistsError(f"dataset already exists: {manifest}")
    (root / "images").mkdir(parents=True, exist_ok=True)

    suffix = ".pgm" if ds.image_shape[0] == 1 else ".ppm"
    lines = []
    for k in range(len(ds)):
        identity = ds.identities[ds.labels[k]]
        relative = f"images/{identity}-{k:05d}{suffix}"
        pixels = np.round(ds.images[k] * 255.0).astype(np.uint8)
        if pixels.shape[0] == 1:
            image = Image.fromarray(pixels[0])
        else:
            image = Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)))
        image.save(root / relative)
        record = [relative, identity]
        if ds.landmarks is not None and ds.landmarks.shape[1] > 0:
            record.append(_format_landmarks(ds.landmarks[k]))
        lines.append("\t".join(record))

    manifest.write_text("\n".join(lines) + "\n")
    logger.info("Wrote %d images of %d identities to %s", len(ds), ds.n_identities, root)
    return manifest


def _read_image(path: Path, record: int) -> Tensor:
    try:
        with Image.open(path) as image:
            if image.mode not in ("L", "RGB"):
                image = image.convert("RGB")
            pixels = np.asarray(image, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise ManifestError(f"missing image file: {path}", record=record) from None
    except OSError as err:
        raise ManifestError(f"unreadable image {path}: {err}", record=record) from None
    return pixels[None] if pixels.ndim == 2 else pixels.transpose(2, 0, 1)


def _parse_landmarks(field: str, record: int) -> Tensor:
    try:
        points = [tuple(float(v) for v in pair.split(",")) for pair in field.split(";") if pair]
        array = np.asarray(points, dtype=np.float64)
    except ValueError:
        raise ManifestError(f"malformed landmark list: {field!r}", record=record) from None
    if array.ndim != 2 or array.shape[1] != 2:
        raise ManifestError(f"landmarks must be x,y pairs: {field!r}", record=record)
    return array


def ingest_dataset(
    root: str | Path,
    manifest: str | Path | None = None,
    *,
    image_shape: tuple[int, int, int] | None = None,
) -> LabeledDataset:
    """Read and validate the dataset described by `manifest` (default: `root/manifest.tsv`).

    Duplicate image entries are dropped with a warning. Labels are densified in order of
    first appearance. Records are numbered from 1 in error messages.
    """
    root = Path(root)
    manifest = Path(manifest) if manifest is not None else root / MANIFEST_NAME
    try:
        lines = manifest.read_text().splitlines()
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {manifest}") from None

    seen: set[str] = set()
    paths: list[str] = []
    names: list[str] = []
    images: list[Tensor] = []
    landmarks: list[Tensor | None] = []
    for record, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) not in (2, 3) or not fields[0] or not fields[1]:
            raise ManifestError(
                "expected `path<TAB>identity[<TAB>landmarks]`", record=record
            )
        if fields[0] in seen:
            logger.warning("Skipping duplicate manifest entry (record %d): %s", record, fields[0])
            continue
        seen.add(fields[0])

        image = _read_image(root / fields[0], record)
        expected = image_shape or (images[0].shape if images else None)
        if expected is not None and image.shape != tuple(expected):
            raise ManifestError(
                f"image extents {image.shape} do not match {tuple(expected)}", record=record
            )
        points = _parse_landmarks(fields[2], record) if len(fields) == 3 else None
        if points is not None:
            _, h, w = image.shape
            if np.any(points < 0) or np.any(points[:, 0] > w - 1) or np.any(points[:, 1] > h - 1):
                raise ManifestError("landmarks lie outside the image", record=record)
        paths.append(fields[0])
        names.append(fields[1])
        images.append(image)
        landmarks.append(points)

    if not images:
        raise ManifestError(f"manifest lists no images: {manifest}")

    identities = tuple(dict.fromkeys(names))
    lookup = {name: label for label, name in enumerate(identities)}
    stacked_landmarks = None
    if all(points is not None for points in landmarks):
        counts = {points.shape[0] for points in landmarks if points is not None}
        if len(counts) != 1:
            raise ManifestError("every record must list the same number of landmarks")
        stacked_landmarks = np.stack(landmarks)  # type: ignore[arg-type]
    elif any(points is not None for points in landmarks):
        raise ManifestError("landmarks must be given for every record or none")

    logger.info(
        "Ingested %d images of %d identities from %s", len(images), len(identities), manifest
    )
    return LabeledDataset(
        images=np.stack(images),
        labels=np.array([lookup[name] for name in names], dtype=np.int64),
        identities=identities,
        landmarks=stacked_landmarks,
        paths=tuple(paths),
    )


class PairSet(NamedTuple):
    """Labelled pairs of dataset indices."""

    i: npt.NDArray[np.intp]
    j: npt.NDArray[np.intp]
    same: npt.NDArray[np.bool_]

    @property
    def size(self) -> int:
        return int(self.i.shape[0])


PAIRS_COLUMNS = ["first", "second", "label"]


def write_pairs(path: str | Path, ds: LabeledDataset, pairs: PairSet) -> None:
    """One pair per record: image reference, image reference, `±1` label.

    Images are referenced by path when the dataset has them, by index otherwise.
    """
    refs = ds.paths if ds.paths is not None else tuple(str(k) for k in range(len(ds)))
    pd.DataFrame(
        {
            "first": [refs[k] for k in pairs.i],
            "second": [refs[k] for k in pairs.j],
            "label": np.where(pairs.same, 1, -1),
        },
        columns=PAIRS_COLUMNS,
    ).to_csv(path, sep="\t", index=False)


def read_pairs(path: str | Path, ds: LabeledDataset) -> PairSet:
    frame = pd.read_csv(path, sep="\t", dtype={"first": str, "second": str})
    missing = set(PAIRS_COLUMNS) - set(frame.columns)
    if missing:
        raise ManifestError(f"pairs file {path} lacks columns {sorted(missing)}")
    refs = ds.paths if ds.paths is not None else tuple(str(k) for k in range(len(ds)))
    lookup = {ref: k for k, ref in enumerate(refs)}
    indices = []
    for record, (first, second) in enumerate(zip(frame["first"], frame["second"]), start=1):
        if first not in lookup or second not in lookup:
            raise ManifestError(f"unknown image reference in {path}", record=record)
        indices.append((lookup[first], lookup[second]))
    labels = frame["label"].to_numpy()
    if not np.all(np.isin(labels, (-1, 1))):
        raise ManifestError(f"pair labels in {path} must be +1 or -1")
    pairs = np.array(indices, dtype=np.intp).reshape(-1, 2)
    return PairSet(pairs[:, 0], pairs[:, 1], labels == 1)
