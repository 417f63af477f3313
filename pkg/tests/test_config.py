from __future__ import annotations

from pathlib import Path

import pytest
from conftest import TINY_NETWORK

from deepid.config import (
    ExperimentConfig,
    ExperimentKind,
    PipelineConfig,
    SweepConfig,
    desk_network,
    load_config,
    parse_config,
)
from deepid.convnet import NetworkConfig
from deepid.dataset import SyntheticSpec
from deepid.errors import ConfigError
from deepid.pipeline import PatchSpec
from deepid.supervision import VerifKind

CONFIGS = Path(__file__).parents[1] / "configs"


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.output == CONFIGS / ".." / "runs" / path.stem


def test_desk_config_matches_defaults():
    cfg = load_config(CONFIGS / "desk.toml")
    default = ExperimentConfig()
    assert cfg.network == desk_network()
    assert cfg.train == default.train
    assert cfg.synthetic == default.synthetic
    assert cfg.kind == ExperimentKind.LAMBDA_SWEEP


def test_full_pipeline_config():
    cfg = load_config(CONFIGS / "full_pipeline.toml")
    assert cfg.kind == ExperimentKind.FULL_PIPELINE
    assert [spec.name for spec in cfg.pipeline.pool] == ["full", "center", "upper", "lower"]
    assert cfg.pipeline.evaluator == "joint-bayes"
    assert cfg.pipeline.networks == ("full", "center", "upper", "lower")
    assert cfg.workers == 4


def test_relative_paths_resolve_against_the_file(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "sub" / "cfg.toml"
    path.write_text('[experiment]\noutput = "out"\n')
    assert load_config(path).output == tmp_path / "sub" / "out"


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[experiment\nkind = 1\n")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(path)


@pytest.mark.parametrize(
    "data",
    [
        {"experimnt": {}},
        {"experiment": {"kinds": "lambda_sweep"}},
        {"train": {"learning_rate": 0.1}},
        {"sweep": {"lambda": ["0"]}},
        {"pipeline": {"patches": [{"name": "a", "size": [8, 8]}]}},
        {"experiment": {"kind": "everything"}},
        {"experiment": {"workers": 0}},
        {"sweep": {"lambdas": ["-1"]}},
        {"sweep": {"kinds": ["l3"]}},
        {"sweep": {"seeds": []}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        parse_config(data)


def test_overrides():
    cfg = ExperimentConfig().with_overrides(seed=7, output=Path("elsewhere"), workers=3)
    assert cfg.seed == cfg.train.seed == cfg.synthetic.seed == 7
    assert cfg.output == Path("elsewhere")
    assert cfg.workers == 3
    assert not cfg.force
    assert ExperimentConfig().with_overrides(force=True).force
    unchanged = ExperimentConfig().with_overrides()
    assert unchanged == ExperimentConfig()


def test_synthetic_extents_must_match_network():
    with pytest.raises(ConfigError, match="do not match"):
        ExperimentConfig(network=NetworkConfig.from_dict(TINY_NETWORK))
    ExperimentConfig(
        network=NetworkConfig.from_dict(TINY_NETWORK),
        synthetic=SyntheticSpec(height=8, width=8),
    )


def test_patch_extents_must_match_network():
    pool = (PatchSpec("a", "a", extents=(8, 8)), PatchSpec("b", "b", extents=(8, 6)))
    with pytest.raises(ConfigError, match="patch `b`"):
        ExperimentConfig(
            kind=ExperimentKind.PATCH_CURVE,
            network=NetworkConfig.from_dict(TINY_NETWORK),
            pipeline=PipelineConfig(pool=pool, budget=1),
        )


class TestPipelineConfig:
    def test_default_pool(self):
        cfg = PipelineConfig()
        assert len(cfg.pool) == 12
        # Mirrored patches reuse the network of their counterpart.
        assert len(cfg.networks) == 9

    def test_patches_table(self):
        cfg = PipelineConfig.from_dict(
            {
                "budget": 1,
                "patches": [
                    {"name": "a", "extents": [8, 8]},
                    {"name": "a-flip", "network": "a", "extents": [8, 8], "flip": True},
                ],
            }
        )
        assert cfg.networks == ("a",)
        assert cfg.pool[1].flip

    @pytest.mark.parametrize(
        "values",
        [
            {"evaluator": "cosine"},
            {"budget": 0},
            {"budget": 13},
            {"rho": 1.0},
            {"groups": 0},
            {"pool": ()},
            {"pool": (PatchSpec("a", "a"), PatchSpec("a", "b")), "budget": 1},
        ],
    )
    def test_invalid(self, values):
        with pytest.raises(ConfigError):
            PipelineConfig(**values)


def test_sweep_kinds():
    cfg = SweepConfig.from_dict({"kinds": ["l1", "cosine"], "seeds": [4]})
    assert cfg.kinds == (VerifKind.L1, VerifKind.COSINE)
    assert cfg.seeds == (4,)
    assert cfg.lambdas == ("0", "0.05", "inf")
