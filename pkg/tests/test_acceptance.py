"""Experiment-scale orderings on the default synthetic faces.

These train dozens of desk-scale networks and are deselected by default; run them with
`pytest -m slow`.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import pandas as pd
import pytest

from deepid.config import SweepConfig, load_config
from deepid.experiments import run_experiment
from deepid.supervision import VerifKind

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).parents[1] / "configs"


def run(name, tmp_path, **changes):
    cfg = load_config(CONFIGS / f"{name}.toml").with_overrides(output=tmp_path / name, workers=4)
    return run_experiment(dataclasses.replace(cfg, **changes))


def test_interior_lambda_wins(tmp_path):
    sweep = SweepConfig(lambdas=("0", "0.05", "inf"), seeds=(0, 1, 2))
    summary = run("lambda_sweep", tmp_path, sweep=sweep)
    accuracy = summary.groupby("lambda")["l2_accuracy"].mean()
    assert accuracy["0.05"] >= accuracy["0"] + 0.02
    assert accuracy["0.05"] >= accuracy["inf"] + 0.02


def test_verification_shrinks_intra_personal_tail(tmp_path):
    sweep = SweepConfig(lambdas=("0", "0.05"), seeds=(0, 1, 2))
    run("lambda_sweep", tmp_path, sweep=sweep)
    rows = pd.read_csv(tmp_path / "lambda_sweep" / "lambda_sweep.csv", dtype={"lambda": str})
    rows = rows.set_index("lambda")
    assert rows.loc["0.05", "intra_tail"] <= 0.8 * rows.loc["0", "intra_tail"]
    assert rows.loc["0.05", "inter_top_share"] >= rows.loc["0", "inter_top_share"]


def test_loss_ablation_ordering(tmp_path):
    kinds = (VerifKind.L2, VerifKind.L2_PLUS, VerifKind.L2_MINUS, VerifKind.NONE)
    summary = run("loss_ablation", tmp_path, sweep=SweepConfig(kinds=kinds, seeds=(0, 1, 2)))
    accuracy = summary.groupby("verif_kind")["l2_accuracy"].mean()
    assert accuracy["l2"] >= accuracy["l2plus"]
    assert abs(accuracy["l2minus"] - accuracy["none"]) <= 0.01


def test_more_identities_do_not_hurt(tmp_path):
    summary = run("identity_sweep", tmp_path)
    accuracy = summary.groupby("identities")["l2_accuracy"].mean().sort_index()
    assert (accuracy.diff().dropna() >= -0.01).all()


def test_full_pipeline_beats_single_patches(tmp_path):
    summary = run("full_pipeline", tmp_path).set_index("point")
    singles = summary.filter(like="patch-", axis=0)["jb_accuracy"]
    fused = summary.loc["fused", "jb_accuracy"]
    assert fused >= 0.9
    assert fused > singles.max()
