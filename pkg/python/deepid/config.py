"""Experiment configuration files.

Configuration is TOML with kebab-case keys:

    [experiment]            kind, seed, output, workers, force, dataset, manifest, splits
    [train]                 `TrainConfig`
    [network]               `NetworkConfig`, with `[[network.layers]]`
    [synthetic]             `SyntheticSpec`, used when no dataset is given
    [pipeline]              patch pool, selection and fusion settings
    [sweep]                 grids swept by the sweep experiments

Every table is optional; omitted keys take their defaults.
"""

from __future__ import annotations

import dataclasses
import enum
import tomllib
from collections.abc import Mapping
from pathlib import Path
from typing import Any

from deepid.convnet import NetworkConfig
from deepid.dataset import SyntheticSpec
from deepid.errors import ConfigError
from deepid.pipeline import PatchSpec, default_patch_pool
from deepid.supervision import VerifKind
from deepid.trainer import TrainConfig, parse_lambda


class ExperimentKind(enum.StrEnum):
    LAMBDA_SWEEP = "lambda_sweep"
    IDENTITY_SWEEP = "identity_sweep"
    LOSS_ABLATION = "loss_ablation"
    PATCH_CURVE = "patch_curve"
    FULL_PIPELINE = "full_pipeline"


DESK_NETWORK: dict[str, Any] = {
    "input": [1, 28, 24],
    "feature-dim": 160,
    "multi-scale": True,
    "layers": [
        {"name": "conv1", "kind": "conv", "kernel": [3, 3], "channels": 5},
        {"name": "relu1", "kind": "relu"},
        {"name": "pool1", "kind": "maxpool", "kernel": [2, 2], "stride": 2},
        {"name": "conv2", "kind": "conv", "kernel": [2, 2], "channels": 10},
        {"name": "relu2", "kind": "relu"},
        {"name": "pool2", "kind": "maxpool", "kernel": [2, 2], "stride": 2},
        {
            "name": "conv3",
            "kind": "conv-locally-shared",
            "kernel": [3, 2],
            "channels": 15,
            "grid": [2, 2],
        },
        {"name": "relu3", "kind": "relu"},
        {"name": "pool3", "kind": "maxpool", "kernel": [2, 2], "stride": 1},
        {"name": "conv4", "kind": "locally-connected", "kernel": [2, 2], "channels": 20},
        {"name": "relu4", "kind": "relu"},
    ],
}
"""The default network for 28x24 grayscale faces."""


def desk_network() -> NetworkConfig:
    return NetworkConfig.from_dict(DESK_NETWORK)


def _kebab_fields(cls: type) -> dict[str, str]:
    return {field.name.replace("_", "-"): field.name for field in dataclasses.fields(cls)}


def _reject_unknown(table: str, data: Mapping[str, Any], allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{table}]: {sorted(unknown)}")


@dataclasses.dataclass(frozen=True)
class SweepConfig:
    lambdas: tuple[str, ...] = ("0", "0.05", "inf")
    """Loss weights swept by `lambda_sweep`; `inf` is the verification-only mode."""

    identities: tuple[int, ...] = (4, 8, 16, 32)
    """Identification identity counts swept by `identity_sweep`."""

    kinds: tuple[VerifKind, ...] = tuple(VerifKind)
    """Verification signals compared by `loss_ablation`."""

    seeds: tuple[int, ...] = (0, 1, 2)
    """Training seeds averaged at every sweep point."""

    def __post_init__(self) -> None:
        for name in ("lambdas", "identities", "kinds", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"sweep grid `{name}` must be non-empty")
        for value in self.lambdas:
            parse_lambda(value)
        if any(count < 1 for count in self.identities):
            raise ConfigError("identity counts must be positive")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SweepConfig:
        _reject_unknown("sweep", data, set(_kebab_fields(cls)))
        values: dict[str, Any] = {}
        if "lambdas" in data:
            values["lambdas"] = tuple(str(value) for value in data["lambdas"])
        if "identities" in data:
            values["identities"] = tuple(int(value) for value in data["identities"])
        if "kinds" in data:
            try:
                values["kinds"] = tuple(VerifKind(value) for value in data["kinds"])
            except ValueError as err:
                raise ConfigError(f"invalid [sweep] kinds: {err}") from None
        if "seeds" in data:
            values["seeds"] = tuple(int(value) for value in data["seeds"])
        return cls(**values)


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    pool: tuple[PatchSpec, ...] = dataclasses.field(
        default_factory=lambda: tuple(default_patch_pool())
    )
    """Candidate patches; mirrored patches name the network of their counterpart."""

    budget: int = 5
    """Patches selected per group."""

    groups: int = 3
    """Repeated selections, each over patches not chosen before."""

    rho: float = 0.5
    """Backward tolerance: removal must cost less than `rho` times the admission gain."""

    min_gain: float = 0.0
    """A forward step must gain strictly more than this."""

    pca_dim: int = 32
    evaluator: str = "l2"
    """`l2` or `joint-bayes`."""

    def __post_init__(self) -> None:
        if not self.pool:
            raise ConfigError("[pipeline] pool must not be empty")
        names = [spec.name for spec in self.pool]
        if len(set(names)) != len(names):
            raise ConfigError(f"patch names must be unique: {names}")
        if not 1 <= self.budget <= len(self.pool):
            raise ConfigError(f"`budget` must lie in 1..{len(self.pool)}")
        if self.groups < 1 or self.pca_dim < 1:
            raise ConfigError("`groups` and `pca-dim` must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError("`rho` must lie in [0, 1)")
        if self.evaluator not in ("l2", "joint-bayes"):
            raise ConfigError(f"Invalid evaluator: {self.evaluator!r}")

    @property
    def networks(self) -> tuple[str, ...]:
        """Distinct network names, in pool order."""
        return tuple(dict.fromkeys(spec.network for spec in self.pool))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PipelineConfig:
        fields = _kebab_fields(cls)
        fields["patches"] = fields.pop("pool")
        _reject_unknown("pipeline", data, set(fields))
        values = {fields[key]: value for key, value in data.items() if key != "patches"}
        if "patches" in data:
            values["pool"] = tuple(PatchSpec.from_dict(spec) for spec in data["patches"])
        return cls(**values)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    kind: ExperimentKind = ExperimentKind.LAMBDA_SWEEP
    output: Path = Path("runs")
    seed: int = 0
    """Seed of the dataset split (and of the synthetic generator unless it sets its own)."""

    workers: int = 1
    force: bool = False
    dataset: Path | None = None
    """Dataset root with a manifest; the synthetic generator is used when absent."""

    manifest: Path | None = None
    splits: tuple[float, float, float] = (0.5, 0.25, 0.25)
    """Identity fractions of the train, validation and test sets."""

    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    network: NetworkConfig = dataclasses.field(default_factory=desk_network)
    synthetic: SyntheticSpec = dataclasses.field(default_factory=SyntheticSpec)
    pipeline: PipelineConfig = dataclasses.field(default_factory=PipelineConfig)
    sweep: SweepConfig = dataclasses.field(default_factory=SweepConfig)

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError("`workers` must be positive")
        if len(self.splits) != 3 or any(f <= 0 for f in self.splits):
            raise ConfigError("`splits` must be three positive fractions")
        if self.dataset is not None and not Path(self.dataset).is_dir():
            raise ConfigError(f"dataset directory does not exist: {self.dataset}")
        if self.manifest is not None and not Path(self.manifest).is_file():
            raise ConfigError(f"manifest does not exist: {self.manifest}")

        channels, height, width = self.network.input_shape
        if self.kind in (ExperimentKind.PATCH_CURVE, ExperimentKind.FULL_PIPELINE):
            for spec in self.pipeline.pool:
                if tuple(spec.extents) != (height, width):
                    raise ConfigError(
                        f"patch `{spec.name}` extents {spec.extents} do not match the "
                        f"network input {(height, width)}"
                    )
                if spec.channels is not None and len(spec.channels) != channels:
                    raise ConfigError(
                        f"patch `{spec.name}` selects {len(spec.channels)} channels; "
                        f"the network takes {channels}"
                    )
        elif self.dataset is None:
            extents = (self.synthetic.channels, self.synthetic.height, self.synthetic.width)
            if extents != (channels, height, width):
                raise ConfigError(
                    f"synthetic images {extents} do not match the network input "
                    f"{(channels, height, width)}"
                )

    def with_overrides(
        self,
        *,
        seed: int | None = None,
        output: Path | None = None,
        workers: int | None = None,
        force: bool = False,
    ) -> ExperimentConfig:
        """Apply command-line flags on top of the file's values."""
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
            changes["train"] = dataclasses.replace(self.train, seed=seed)
            changes["synthetic"] = dataclasses.replace(self.synthetic, seed=seed)
        if output is not None:
            changes["output"] = output
        if workers is not None:
            changes["workers"] = workers
        if force:
            changes["force"] = True
        return dataclasses.replace(self, **changes)


_EXPERIMENT_KEYS = {"kind", "output", "seed", "workers", "force", "dataset", "manifest", "splits"}
_TABLES = {"experiment", "train", "network", "synthetic", "pipeline", "sweep"}


def parse_config(data: Mapping[str, Any], base: Path = Path(".")) -> ExperimentConfig:
    """Build an `ExperimentConfig` from parsed TOML; relative paths resolve against `base`."""
    _reject_unknown("top level", data, _TABLES)
    experiment = dict(data.get("experiment", {}))
    _reject_unknown("experiment", experiment, _EXPERIMENT_KEYS)

    values: dict[str, Any] = {}
    try:
        if "kind" in experiment:
            values["kind"] = ExperimentKind(experiment["kind"])
        for key in ("output", "dataset", "manifest"):
            if key in experiment:
                values[key] = base / Path(experiment[key])
        for key in ("seed", "workers"):
            if key in experiment:
                values[key] = int(experiment[key])
        if "force" in experiment:
            values["force"] = bool(experiment["force"])
        if "splits" in experiment:
            values["splits"] = tuple(float(f) for f in experiment["splits"])

        if "train" in data:
            values["train"] = TrainConfig.from_dict(data["train"])
        if "network" in data:
            values["network"] = NetworkConfig.from_dict(data["network"])
        if "synthetic" in data:
            values["synthetic"] = SyntheticSpec.from_dict(data["synthetic"])
        if "pipeline" in data:
            values["pipeline"] = PipelineConfig.from_dict(data["pipeline"])
        if "sweep" in data:
            values["sweep"] = SweepConfig.from_dict(data["sweep"])
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid configuration: {err}") from None
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fp:
            data = tomllib.load(fp)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"malformed config file {path}: {err}") from None
    return parse_config(data, base=path.parent)
