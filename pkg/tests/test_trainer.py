from __future__ import annotations

import dataclasses
import math

import numpy as np
import pandas as pd
import pytest

from deepid.convnet import NetworkParams, init_params
from deepid.dataset import LabeledDataset, split_identities
from deepid.errors import ConfigError, LabelError, TrainingDivergedError
from deepid.supervision import VerifKind
from deepid.trainer import (
    REPORT_COLUMNS,
    LearningRate,
    PairBatch,
    PairSampler,
    TrainConfig,
    _objective,
    objective,
    parse_lambda,
    sample_pair,
    train,
    train_step,
    validation_pairs,
)


def random_batch(rng: np.random.Generator, size: int = 6) -> PairBatch:
    l_i = rng.integers(0, 4, size=size)
    l_j = np.where(np.arange(size) % 2 == 0, l_i, (l_i + 1) % 4)
    return PairBatch(
        rng.normal(size=(size, 1, 8, 8)), rng.normal(size=(size, 1, 8, 8)), l_i, l_j
    )


def with_entry(params: NetworkParams, name: str, index, delta: float) -> NetworkParams:
    tensors = dict(params.tensors)
    value = tensors[name].copy()
    value[index] += delta
    tensors[name] = value
    return NetworkParams(tensors)


def check_gradients(batch, params, net, cfg, *, per_tensor=None, eps=1e-5):
    _, _, grads, _, _ = _objective(batch, params, net, cfg)
    rng = np.random.default_rng(0)
    for name, grad in grads.items():
        indices = list(np.ndindex(grad.shape))
        if per_tensor is not None and len(indices) > per_tensor:
            picks = rng.choice(len(indices), size=per_tensor, replace=False)
            indices = [indices[k] for k in picks]
        for index in indices:
            numeric = (
                objective(batch, with_entry(params, name, index, eps), net, cfg)
                - objective(batch, with_entry(params, name, index, -eps), net, cfg)
            ) / (2 * eps)
            np.testing.assert_allclose(
                grad[index], numeric, rtol=1e-4, atol=1e-7, err_msg=f"{name}{index}"
            )
    return grads


@pytest.fixture
def fd_params(tiny_net):
    params = init_params(tiny_net, 2, n_identities=4, margin=1.0)
    params.tensors["deepid.bias"] = np.full(8, 0.5)
    params.tensors["verif.scale"] = np.asarray(1.3)
    params.tensors["verif.shift"] = np.asarray(-0.2)
    return params


class TestLambda:
    @pytest.mark.parametrize(
        ("value", "expected"),
        [
            ("inf", (0.0, True)),
            ("INF", (0.0, True)),
            (math.inf, (0.0, True)),
            ("0.05", (0.05, False)),
            (0, (0.0, False)),
            (2.5, (2.5, False)),
        ],
    )
    def test_parse(self, value, expected):
        assert parse_lambda(value) == expected

    @pytest.mark.parametrize("value", [-0.1, "abc", True, None, -math.inf])
    def test_invalid(self, value):
        with pytest.raises(ConfigError):
            parse_lambda(value)


class TestTrainConfig:
    def test_from_dict(self):
        cfg = TrainConfig.from_dict(
            {"lambda": "inf", "verif-kind": "cosine", "batch-size": 8, "epochs": 3}
        )
        assert cfg.verification_only
        assert cfg.verif_kind == VerifKind.COSINE
        assert cfg.verif_weight == 1.0
        assert not cfg.uses_identification
        assert cfg.batch_size == 8

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="momentum"):
            TrainConfig.from_dict({"momentum": 0.9})

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"verif-kind": "hinge"})

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
    def test_positive_fraction(self, fraction):
        with pytest.raises(ConfigError):
            TrainConfig(positive_fraction=fraction)

    def test_zero_lambda_disables_verification(self):
        assert not TrainConfig(lam=0.0).uses_verification
        assert not TrainConfig(lam=1.0, verif_kind=VerifKind.NONE).uses_verification
        assert TrainConfig(lam=1.0).uses_verification

    def test_schedule(self):
        schedule = LearningRate(initial=0.1, decay=0.5, interval=2)
        assert schedule(0) == pytest.approx(0.1)
        assert schedule(1) == pytest.approx(0.1)
        assert schedule(3) == pytest.approx(0.05)
        assert schedule(4) == pytest.approx(0.025)


class TestSampling:
    def test_positive_pairs(self, tiny_dataset, rng):
        for _ in range(50):
            pair = sample_pair(tiny_dataset, rng, positive_fraction=1.0)
            assert pair.same
            assert pair.i != pair.j
            assert tiny_dataset.labels[pair.i] == tiny_dataset.labels[pair.j]

    def test_negative_pairs(self, tiny_dataset, rng):
        for _ in range(50):
            pair = sample_pair(tiny_dataset, rng, positive_fraction=0.0)
            assert not pair.same
            assert tiny_dataset.labels[pair.i] != tiny_dataset.labels[pair.j]

    def test_positive_share(self, tiny_dataset, rng):
        pairs = [sample_pair(tiny_dataset, rng, 0.3) for _ in range(4000)]
        assert np.mean([pair.same for pair in pairs]) == pytest.approx(0.3, abs=0.03)

    def test_fallback_without_repeated_identities(self, rng, caplog):
        ds = LabeledDataset(
            images=np.zeros((3, 1, 2, 2)),
            labels=np.arange(3),
            identities=("a", "b", "c"),
        )
        sampler = PairSampler(ds, rng, positive_fraction=0.99)
        pairs = sampler.pairs(20)
        assert not any(pair.same for pair in pairs)
        assert sampler.fallbacks > 0
        assert "cross-identity" in caplog.text

    def test_single_identity(self, rng):
        ds = LabeledDataset(np.zeros((2, 1, 2, 2)), np.zeros(2, dtype=np.int64), ("a",))
        with pytest.raises(LabelError):
            sample_pair(ds, rng)

    def test_validation_pairs_are_fixed(self, tiny_dataset):
        a = validation_pairs(tiny_dataset, 30, seed=4)
        b = validation_pairs(tiny_dataset, 30, seed=4)
        np.testing.assert_array_equal(a.i, b.i)
        np.testing.assert_array_equal(a.same, b.same)
        assert a.size == 30


class TestGradients:
    def test_full_check(self, tiny_net, fd_params, rng):
        cfg = TrainConfig(lam=0.05, verif_kind=VerifKind.L2)
        grads = check_gradients(random_batch(rng), fd_params, tiny_net, cfg)
        assert {"softmax.weight", "conv1.weight", "deepid.weight"} <= set(grads)

    @pytest.mark.parametrize("lam", [0.0, 0.05, 1.0])
    @pytest.mark.parametrize("kind", list(VerifKind))
    def test_every_signal(self, tiny_net, fd_params, rng, lam, kind):
        cfg = TrainConfig(lam=lam, verif_kind=kind)
        check_gradients(random_batch(rng), fd_params, tiny_net, cfg, per_tensor=6)

    def test_verification_only(self, tiny_net, fd_params, rng):
        cfg = TrainConfig(lam=0.0, verification_only=True, verif_kind=VerifKind.COSINE)
        grads = check_gradients(random_batch(rng), fd_params, tiny_net, cfg, per_tensor=6)
        assert "softmax.weight" not in grads
        assert "verif.scale" in grads

    def test_cosine_parameters_only_for_cosine(self, tiny_net, fd_params, rng):
        cfg = TrainConfig(lam=1.0, verif_kind=VerifKind.L1)
        _, _, grads, _, _ = _objective(random_batch(rng), fd_params, tiny_net, cfg)
        assert "verif.scale" not in grads
        assert "verif.margin" not in grads


class TestTrainStep:
    def test_zero_lambda_matches_no_verification(self, tiny_net, fd_params, rng):
        batch = random_batch(rng)
        a = train_step(batch, fd_params, tiny_net, TrainConfig(lam=0.0), 0.1)
        b = train_step(
            batch, fd_params, tiny_net, TrainConfig(lam=0.5, verif_kind=VerifKind.NONE), 0.1
        )
        for name in a.params.tensors:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        assert a.verif_loss == 0.0

    def test_input_untouched(self, tiny_net, fd_params, rng):
        before = fd_params.copy()
        step = train_step(random_batch(rng), fd_params, tiny_net, TrainConfig(), 0.1)
        for name in before.tensors:
            np.testing.assert_array_equal(fd_params[name], before[name])
        assert not np.array_equal(step.params["conv1.weight"], before["conv1.weight"])
        assert step.distances.shape == (6,)
        np.testing.assert_array_equal(step.same, np.arange(6) % 2 == 0)

    def test_zero_learning_rate(self, tiny_net, fd_params, rng):
        step = train_step(random_batch(rng), fd_params, tiny_net, TrainConfig(), 0.0)
        for name in fd_params.tensors:
            np.testing.assert_array_equal(step.params[name], fd_params[name])

    def test_divergence(self, tiny_net, fd_params, rng):
        fd_params.tensors["deepid.weight"] = np.full_like(fd_params["deepid.weight"], np.nan)
        with pytest.raises(TrainingDivergedError) as info:
            train_step(random_batch(rng), fd_params, tiny_net, TrainConfig(lam=0.0), 0.1)
        assert info.value.diagnostics["learning_rate"] == 0.1
        assert "deepid.weight" in info.value.diagnostics["non_finite_gradients"]

    def test_zero_features_under_cosine(self, tiny_net, fd_params, rng):
        fd_params.tensors["deepid.weight"] = np.zeros_like(fd_params["deepid.weight"])
        fd_params.tensors["deepid.bias"] = np.zeros(8)
        cfg = TrainConfig(lam=0.5, verif_kind=VerifKind.COSINE)
        with pytest.raises(TrainingDivergedError) as info:
            train_step(random_batch(rng), fd_params, tiny_net, cfg, 0.1)
        assert "zero-norm" in info.value.diagnostics["cause"]
        assert info.value.diagnostics["learning_rate"] == 0.1


class TestTrain:
    @pytest.fixture
    def quick(self):
        return TrainConfig(
            lam=0.05,
            epochs=2,
            batch_size=8,
            steps_per_epoch=3,
            validation_pairs=20,
            margin_capacity=16,
            margin_interval=8,
            learning_rate=0.05,
            seed=11,
        )

    def test_report(self, tiny_dataset, tiny_net, quick, tmp_path):
        train_ds, val_ds = split_identities(tiny_dataset, [0.75, 0.25], seed=0)
        params, report = train(train_ds, val_ds, quick, tiny_net)
        params.check(tiny_net)
        assert params.n_identities == train_ds.n_identities
        assert len(report.records) == 2
        assert report.best_epoch in (0, 1)
        assert report.best_accuracy == max(r.val_accuracy for r in report.records)

        report.write_csv(tmp_path / "report.csv")
        frame = pd.read_csv(tmp_path / "report.csv")
        assert list(frame.columns) == REPORT_COLUMNS
        assert frame["epoch"].tolist() == [0, 1]

    def test_reproducible(self, tiny_dataset, tiny_net, quick):
        train_ds, val_ds = split_identities(tiny_dataset, [0.75, 0.25], seed=0)
        a, _ = train(train_ds, val_ds, quick, tiny_net)
        b, _ = train(train_ds, val_ds, quick, tiny_net)
        for name in a.tensors:
            np.testing.assert_array_equal(a[name], b[name])

    def test_restricted_identification(self, tiny_dataset, tiny_net, quick):
        train_ds, val_ds = split_identities(tiny_dataset, [0.75, 0.25], seed=0)
        cfg = dataclasses.replace(quick, ident_identities=2)
        params, _ = train(train_ds, val_ds, cfg, tiny_net)
        assert params.n_identities == 2

    def test_divergence_reports_epoch_and_step(self, tiny_dataset, tiny_net, quick):
        train_ds, val_ds = split_identities(tiny_dataset, [0.75, 0.25], seed=0)
        blank = LabeledDataset(
            np.zeros_like(train_ds.images), train_ds.labels, train_ds.identities
        )
        cfg = dataclasses.replace(quick, verif_kind=VerifKind.COSINE)
        with pytest.raises(TrainingDivergedError) as info:
            train(blank, val_ds, cfg, tiny_net)
        assert info.value.diagnostics["epoch"] == 0
        assert info.value.diagnostics["step"] == 0
        assert "zero-norm" in str(info.value)

    def test_overlapping_identities(self, tiny_dataset, tiny_net, quick):
        with pytest.raises(LabelError, match="overlap"):
            train(tiny_dataset, tiny_dataset, quick, tiny_net)
