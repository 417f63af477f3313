"""Experiment orchestration: sweeps, the patch-count curve and the full pipeline.

Each experiment splits its dataset by identity into training, validation and test
sets. Networks are trained on the first, model selection uses the second, and every
reported accuracy is measured on pairs of the held-out test identities.
"""

from __future__ import annotations

import contextlib
import dataclasses
import logging
from collections.abc import Callable, Iterator, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, NamedTuple, TypeVar

import numpy as np
import pandas as pd

from deepid.analysis import (
    SpectrumReport,
    VerificationMetrics,
    compute_scatter,
    format_lambda,
    pca2_export,
    roc_auc,
    spectrum,
    tail_mass,
    top_share,
    verification_metrics,
    write_lambda_sweep_csv,
    write_pca2_csv,
    write_roc_csv,
    write_spectrum_csv,
)
from deepid.config import ExperimentConfig, ExperimentKind
from deepid.convnet import NetworkConfig, NetworkParams, load_params, save_params
from deepid.dataset import (
    LabeledDataset,
    PairSet,
    generate_dataset,
    ingest_dataset,
    landmark_template,
    read_pairs,
    split_identities,
    write_pairs,
)
from deepid.errors import OutputExistsError, StageError
from deepid.jointbayes import save_model
from deepid.pipeline import (
    Evaluator,
    GroupModel,
    PatchNetwork,
    PatchSpec,
    SelectionState,
    extract_patches,
    fit_group,
    fit_verification_system,
    joint_bayes_evaluator,
    l2_evaluator,
    patch_features,
    save_pca,
    select_groups,
    select_patches,
)
from deepid.tensor import Tensor
from deepid.tensorio import save_tensors
from deepid.trainer import TrainConfig, extract_features, parse_lambda, train, validation_pairs

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["point", "seed", "l2_accuracy", "jb_accuracy"]
SELECTION_COLUMNS = ["group", "step", "action", "patch", "accuracy"]
METRICS_COLUMNS = ["evaluator", "accuracy", "threshold", "auc"]
FEATURES = "features"

T = TypeVar("T")
R = TypeVar("R")


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    """Attribute any failure inside the block to the named stage."""
    logger.debug("Stage `%s`", name)
    try:
        yield
    except StageError:
        raise
    except Exception as err:
        raise StageError(name, err) from err


def prepare_output(path: Path, force: bool) -> Path:
    """Create the output directory, refusing to reuse a non-empty one unless forced."""
    if path.is_dir() and any(path.iterdir()) and not force:
        raise OutputExistsError(f"output directory is not empty: {path} (use --force)")
    if path.exists() and not path.is_dir():
        raise OutputExistsError(f"output path is not a directory: {path}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_jobs(function: Callable[[T], R], jobs: Sequence[T], workers: int) -> list[R]:
    """Run independent jobs, in processes when `workers > 1`; results keep job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [function(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(function, jobs))


# Data.


class Splits(NamedTuple):
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.dataset is not None:
        return ingest_dataset(cfg.dataset, cfg.manifest)
    return generate_dataset(cfg.synthetic)


def load_splits(cfg: ExperimentConfig) -> Splits:
    with stage("load-dataset"):
        ds = load_dataset(cfg)
    with stage("split"):
        train_ds, val_ds, test_ds = split_identities(ds, cfg.splits, cfg.seed)
    logger.info(
        "Split %d identities into %d train, %d validation and %d test",
        ds.n_identities,
        train_ds.n_identities,
        val_ds.n_identities,
        test_ds.n_identities,
    )
    return Splits(train_ds, val_ds, test_ds)


def evaluation_pairs(cfg: ExperimentConfig, test_ds: LabeledDataset) -> PairSet:
    """Evaluation pairs; identical for every point of an experiment."""
    return validation_pairs(test_ds, cfg.train.validation_pairs, cfg.seed + 1)


def face_template(ds: LabeledDataset) -> Tensor:
    """Landmark template in the frame of the dataset's images."""
    _, height, width = ds.image_shape
    count = 5 if ds.landmarks is None else ds.landmarks.shape[1]
    return landmark_template(count, height, width)


# Evaluation.


def l2_scores(features: Tensor, pairs: PairSet) -> Tensor:
    """Negated L2 distances, so that higher means "same identity"."""
    return -np.linalg.norm(features[pairs.i] - features[pairs.j], axis=1)


def fit_feature_model(
    train_features: Tensor, train_labels: np.ndarray, pca_dim: int
) -> GroupModel:
    """PCA and a Joint Bayesian model, both fitted on training-identity features."""
    return fit_group([FEATURES], {FEATURES: train_features}, train_labels, pca_dim)


def jb_scores(model: GroupModel, features: Tensor, pairs: PairSet) -> Tensor:
    return model.scores({FEATURES: features}, pairs)


def save_evaluation(
    directory: Path, splits: Splits, train_x: Tensor, test_x: Tensor, model: GroupModel
) -> None:
    """Write the extracted features and the fitted PCA and Joint Bayesian model."""
    save_tensors(
        directory / "features.bin",
        {
            "train": train_x,
            "train-labels": splits.train.labels.astype(np.float64),
            "test": test_x,
            "test-labels": splits.test.labels.astype(np.float64),
        },
        {"kind": "features"},
    )
    save_pca(directory / "pca.bin", model.pca)
    save_model(directory / "jointbayes.bin", model.model)


def write_metrics(path: Path, metrics: Mapping[str, VerificationMetrics]) -> None:
    rows = [
        (name, m.accuracy, m.threshold, roc_auc(m.roc)) for name, m in metrics.items()
    ]
    pd.DataFrame(rows, columns=METRICS_COLUMNS).to_csv(path, index=False)


def write_summary(path: Path, rows: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows))
    extra = [column for column in frame.columns if column not in SUMMARY_COLUMNS]
    frame = frame[SUMMARY_COLUMNS + extra]
    frame.to_csv(path, index=False)
    return frame


# Sweeps.


class PointJob(NamedTuple):
    point: str
    seed: int
    columns: dict[str, Any]
    train_cfg: TrainConfig
    network: NetworkConfig
    splits: Splits
    pairs: PairSet
    pca_dim: int
    directory: Path


class PointResult(NamedTuple):
    row: dict[str, Any]
    spectrum: SpectrumReport
    pca2: pd.DataFrame


def run_point(job: PointJob) -> PointResult:
    """Train one network and evaluate it on the held-out test pairs."""
    name = f"{job.point} seed {job.seed}"
    with stage(f"train {name}"):
        params, report = train(job.splits.train, job.splits.val, job.train_cfg, job.network)
    with stage(f"evaluate {name}"):
        train_x = extract_features(job.splits.train.images, params, job.network)
        test_x = extract_features(job.splits.test.images, params, job.network)
        l2 = verification_metrics(l2_scores(test_x, job.pairs), job.pairs.same)
        model = fit_feature_model(train_x, job.splits.train.labels, job.pca_dim)
        jb = verification_metrics(jb_scores(model, test_x, job.pairs), job.pairs.same)
        scatter = spectrum(compute_scatter(test_x, job.splits.test.labels))
        pca2 = pca2_export(test_x, job.splits.test.labels)
    with stage(f"write {name}"):
        job.directory.mkdir(parents=True, exist_ok=True)
        report.write_csv(job.directory / "report.csv")
        write_roc_csv(job.directory / "roc.csv", jb.roc)
        write_metrics(job.directory / "metrics.csv", {"l2": l2, "joint-bayes": jb})
        save_params(job.directory / "network.bin", params, job.network)
        save_evaluation(job.directory, job.splits, train_x, test_x, model)

    logger.info(
        "%s: L2 accuracy %.4f, Joint Bayesian accuracy %.4f", name, l2.accuracy, jb.accuracy
    )
    row = {
        "point": job.point,
        "seed": job.seed,
        "l2_accuracy": l2.accuracy,
        "jb_accuracy": jb.accuracy,
        **job.columns,
    }
    return PointResult(row, scatter, pca2)


def sweep_points(cfg: ExperimentConfig) -> list[tuple[str, dict[str, Any], TrainConfig]]:
    """`(point name, summary columns, training config)` for every point of a sweep."""
    points = []
    match cfg.kind:
        case ExperimentKind.LAMBDA_SWEEP:
            for value in cfg.sweep.lambdas:
                lam, verification_only = parse_lambda(value)
                train_cfg = dataclasses.replace(
                    cfg.train, lam=lam, verification_only=verification_only
                )
                label = format_lambda(lam, verification_only)
                points.append((f"lambda-{label}", {"lambda": label}, train_cfg))
        case ExperimentKind.IDENTITY_SWEEP:
            for count in cfg.sweep.identities:
                train_cfg = dataclasses.replace(cfg.train, ident_identities=count)
                points.append((f"identities-{count}", {"identities": count}, train_cfg))
        case ExperimentKind.LOSS_ABLATION:
            for kind in cfg.sweep.kinds:
                train_cfg = dataclasses.replace(cfg.train, verif_kind=kind)
                points.append((f"verif-{kind}", {"verif_kind": str(kind)}, train_cfg))
        case _:
            raise ValueError(f"Invalid sweep kind: {cfg.kind}")
    return points


def run_sweep(cfg: ExperimentConfig, out: Path) -> pd.DataFrame:
    """Train every sweep point under every seed; returns the summary table."""
    splits = load_splits(cfg)
    pairs = evaluation_pairs(cfg, splits.test)
    with stage("write-pairs"):
        write_pairs(out / "pairs.tsv", splits.test, pairs)

    jobs = [
        PointJob(
            point,
            seed,
            columns,
            dataclasses.replace(train_cfg, seed=seed),
            cfg.network,
            splits,
            pairs,
            cfg.pipeline.pca_dim,
            out / point / f"seed-{seed}",
        )
        for point, columns, train_cfg in sweep_points(cfg)
        for seed in cfg.sweep.seeds
    ]
    logger.info("Running %d training jobs on %d workers", len(jobs), cfg.workers)
    results = run_jobs(run_point, jobs, cfg.workers)

    with stage("write-summary"):
        summary = write_summary(out / "summary.csv", [result.row for result in results])
        if cfg.kind == ExperimentKind.LAMBDA_SWEEP:
            write_lambda_reports(out, results)
    return summary


def write_lambda_reports(out: Path, results: Sequence[PointResult]) -> None:
    """Seed-averaged accuracy and spectrum summaries, plus first-seed spectra and views."""
    by_label: dict[str, list[PointResult]] = {}
    for result in results:
        by_label.setdefault(result.row["lambda"], []).append(result)

    rows = []
    spectra = {}
    for label, group in by_label.items():
        rows.append(
            {
                "lambda": label,
                "l2_accuracy": float(np.mean([r.row["l2_accuracy"] for r in group])),
                "jb_accuracy": float(np.mean([r.row["jb_accuracy"] for r in group])),
                "intra_tail": float(np.mean([tail_mass(r.spectrum.intra) for r in group])),
                "inter_top_share": float(np.mean([top_share(r.spectrum.inter) for r in group])),
            }
        )
        spectra[label] = group[0].spectrum
        write_pca2_csv(out / f"pca2-{label}.csv", group[0].pca2)
    write_lambda_sweep_csv(out / "lambda_sweep.csv", rows)
    write_spectrum_csv(out / "spectrum.csv", spectra)


# Patch ensembles.


class PatchJob(NamedTuple):
    network: str
    spec: PatchSpec
    train_cfg: TrainConfig
    config: NetworkConfig
    splits: Splits
    template: Tensor
    directory: Path


def train_patch_network(job: PatchJob) -> PatchNetwork:
    """Train the network of one patch on that patch of the training images."""
    with stage(f"train network {job.network}"):
        train_ds = extract_patches(job.splits.train, job.spec, job.template)
        val_ds = extract_patches(job.splits.val, job.spec, job.template)
        params, report = train(train_ds, val_ds, job.train_cfg, job.config)
    with stage(f"write network {job.network}"):
        job.directory.mkdir(parents=True, exist_ok=True)
        report.write_csv(job.directory / "report.csv")
        save_params(job.directory / "network.bin", params, job.config)
    logger.info(
        "Network `%s`: best validation accuracy %.4f at epoch %d",
        job.network,
        report.best_accuracy,
        report.best_epoch,
    )
    return PatchNetwork(job.config, params)


def _training_spec(pool: Sequence[PatchSpec], network: str) -> PatchSpec:
    """The unmirrored patch of a network if there is one."""
    specs = [spec for spec in pool if spec.network == network]
    return next((spec for spec in specs if not spec.flip), specs[0])


@dataclasses.dataclass(frozen=True)
class PatchContext:
    """Per-patch features of the three splits and the pairs they are judged on."""

    splits: Splits
    networks: dict[str, PatchNetwork]
    train_pool: dict[str, Tensor]
    val_pool: dict[str, Tensor]
    test_pool: dict[str, Tensor]
    val_pairs: PairSet
    test_pairs: PairSet
    evaluator: Evaluator


def prepare_patches(cfg: ExperimentConfig, out: Path) -> PatchContext:
    """Train one network per pool network and embed every patch of every split."""
    splits = load_splits(cfg)
    pool = cfg.pipeline.pool
    template = face_template(splits.train)
    jobs = [
        PatchJob(
            name,
            _training_spec(pool, name),
            cfg.train,
            cfg.network,
            splits,
            template,
            out / "networks" / name,
        )
        for name in cfg.pipeline.networks
    ]
    logger.info("Training %d patch networks on %d workers", len(jobs), cfg.workers)
    trained = run_jobs(train_patch_network, jobs, cfg.workers)
    networks = {job.network: network for job, network in zip(jobs, trained)}

    with stage("patch-features"):
        train_pool, val_pool, test_pool = (
            patch_features(part, pool, networks, template=template) for part in splits
        )
    val = validation_pairs(splits.val, cfg.train.validation_pairs, cfg.seed)
    test = evaluation_pairs(cfg, splits.test)
    with stage("write-pairs"):
        write_pairs(out / "pairs.tsv", splits.test, test)

    evaluator = l2_evaluator
    if cfg.pipeline.evaluator == "joint-bayes":
        evaluator = joint_bayes_evaluator(train_pool, splits.train.labels, cfg.pipeline.pca_dim)
    return PatchContext(splits, networks, train_pool, val_pool, test_pool, val, test, evaluator)


def write_selection(path: Path, states: Sequence[SelectionState]) -> None:
    rows = [
        (group, step, record.action, record.patch, record.accuracy)
        for group, state in enumerate(states)
        for step, record in enumerate(state.steps)
    ]
    pd.DataFrame(rows, columns=SELECTION_COLUMNS).to_csv(path, index=False)


def evaluate_patches(
    ctx: PatchContext, patches: Sequence[str], pca_dim: int
) -> tuple[float, VerificationMetrics]:
    """L2 accuracy and Joint Bayesian metrics of concatenated patches on the test pairs."""
    l2 = l2_evaluator(patches, ctx.test_pool, ctx.test_pairs)
    group = fit_group(patches, ctx.train_pool, ctx.splits.train.labels, pca_dim)
    jb = verification_metrics(group.scores(ctx.test_pool, ctx.test_pairs), ctx.test_pairs.same)
    return l2, jb


def curve_counts(total: int) -> list[int]:
    """1, 2, 4, ... up to and including `total`."""
    counts = []
    count = 1
    while count < total:
        counts.append(count)
        count *= 2
    return [*counts, total] if total else []


def run_patch_curve(cfg: ExperimentConfig, out: Path) -> pd.DataFrame:
    """Test accuracy of the first 1, 2, 4, ... greedily selected patches."""
    ctx = prepare_patches(cfg, out)
    with stage("select"):
        state = select_patches(
            ctx.val_pool,
            cfg.pipeline.budget,
            ctx.val_pairs,
            ctx.evaluator,
            rho=cfg.pipeline.rho,
            min_gain=cfg.pipeline.min_gain,
        )
    logger.info("Selected patches: %s", ", ".join(state.selected))

    rows = []
    with stage("evaluate"):
        for count in curve_counts(len(state.selected)):
            patches = state.selected[:count]
            l2, jb = evaluate_patches(ctx, patches, cfg.pipeline.pca_dim)
            point = f"patches-{count}"
            (out / point).mkdir(exist_ok=True)
            write_roc_csv(out / point / "roc.csv", jb.roc)
            logger.info("%d patches: Joint Bayesian accuracy %.4f", count, jb.accuracy)
            rows.append(
                {
                    "point": point,
                    "seed": cfg.seed,
                    "l2_accuracy": l2,
                    "jb_accuracy": jb.accuracy,
                    "patches": " ".join(patches),
                }
            )
    with stage("write-summary"):
        write_selection(out / "selection.csv", [state])
        return write_summary(out / "summary.csv", rows)


def run_full_pipeline(cfg: ExperimentConfig, out: Path) -> pd.DataFrame:
    """Grouped selection, per-group Joint Bayesian and fusion, against single patches."""
    ctx = prepare_patches(cfg, out)
    pipeline = cfg.pipeline
    with stage("select"):
        states = select_groups(
            ctx.val_pool,
            pipeline.budget,
            ctx.val_pairs,
            pipeline.groups,
            ctx.evaluator,
            rho=pipeline.rho,
            min_gain=pipeline.min_gain,
        )
    with stage("fit-system"):
        system = fit_verification_system(
            [state.selected for state in states],
            ctx.train_pool,
            ctx.splits.train.labels,
            ctx.val_pool,
            ctx.val_pairs,
            pca_dim=pipeline.pca_dim,
        )

    rows = []
    with stage("evaluate"):
        for spec in pipeline.pool:
            l2, jb = evaluate_patches(ctx, [spec.name], pipeline.pca_dim)
            rows.append(_row(f"patch-{spec.name}", cfg.seed, l2, jb.accuracy, [spec.name]))
        for index, state in enumerate(states):
            l2, jb = evaluate_patches(ctx, state.selected, pipeline.pca_dim)
            rows.append(_row(f"group-{index}", cfg.seed, l2, jb.accuracy, state.selected))

        selected = [name for state in states for name in state.selected]
        fused = verification_metrics(
            system.score(ctx.test_pool, ctx.test_pairs), ctx.test_pairs.same
        )
        calibrated = float(
            np.mean(system.predict(ctx.test_pool, ctx.test_pairs) == ctx.test_pairs.same)
        )
        l2 = l2_evaluator(selected, ctx.test_pool, ctx.test_pairs)
        rows.append(_row("fused", cfg.seed, l2, fused.accuracy, selected))
        write_roc_csv(out / "roc.csv", fused.roc)
    logger.info(
        "Fused accuracy %.4f (%.4f at the validation threshold)", fused.accuracy, calibrated
    )

    with stage("write-summary"):
        write_selection(out / "selection.csv", states)
        return write_summary(out / "summary.csv", rows)


def _row(point: str, seed: int, l2: float, jb: float, patches: Sequence[str]) -> dict[str, Any]:
    return {
        "point": point,
        "seed": seed,
        "l2_accuracy": l2,
        "jb_accuracy": jb,
        "patches": " ".join(patches),
    }


def run_selection(cfg: ExperimentConfig) -> list[SelectionState]:
    """Train patch networks and run grouped selection, writing `selection.csv`."""
    out = prepare_output(cfg.output, cfg.force)
    ctx = prepare_patches(cfg, out)
    with stage("select"):
        states = select_groups(
            ctx.val_pool,
            cfg.pipeline.budget,
            ctx.val_pairs,
            cfg.pipeline.groups,
            ctx.evaluator,
            rho=cfg.pipeline.rho,
            min_gain=cfg.pipeline.min_gain,
        )
    with stage("write-selection"):
        write_selection(out / "selection.csv", states)
    for index, state in enumerate(states):
        logger.info(
            "Group %d: %s (validation accuracy %.4f)",
            index,
            ", ".join(state.selected),
            state.accuracy,
        )
    return states


def run_experiment(cfg: ExperimentConfig) -> pd.DataFrame:
    """Run the configured experiment; returns the summary table written to the output."""
    out = prepare_output(cfg.output, cfg.force)
    logger.info("Running %s into %s", cfg.kind, out)
    match cfg.kind:
        case (
            ExperimentKind.LAMBDA_SWEEP
            | ExperimentKind.IDENTITY_SWEEP
            | ExperimentKind.LOSS_ABLATION
        ):
            return run_sweep(cfg, out)
        case ExperimentKind.PATCH_CURVE:
            return run_patch_curve(cfg, out)
        case ExperimentKind.FULL_PIPELINE:
            return run_full_pipeline(cfg, out)
        case _:
            raise ValueError(f"Invalid experiment kind: {cfg.kind}")


# Single networks.


def train_network(cfg: ExperimentConfig) -> tuple[NetworkParams, Path]:
    """Train one network on whole images; writes `network.bin` and `report.csv`."""
    out = prepare_output(cfg.output, cfg.force)
    splits = load_splits(cfg)
    with stage("train"):
        params, report = train(splits.train, splits.val, cfg.train, cfg.network)
    with stage("write"):
        path = out / "network.bin"
        save_params(path, params, cfg.network)
        report.write_csv(out / "report.csv")
    logger.info(
        "Best validation accuracy %.4f at epoch %d", report.best_accuracy, report.best_epoch
    )
    return params, path


def evaluate_network(
    cfg: ExperimentConfig, network: Path, pairs: Path | None = None
) -> dict[str, VerificationMetrics]:
    """L2 and Joint Bayesian verification metrics of a trained network on test pairs."""
    out = prepare_output(cfg.output, cfg.force)
    with stage("load-network"):
        params, net = load_params(network)
    splits = load_splits(cfg)
    with stage("pairs"):
        if pairs is not None:
            test = read_pairs(pairs, splits.test)
        else:
            test = evaluation_pairs(cfg, splits.test)
    with stage("evaluate"):
        train_x = extract_features(splits.train.images, params, net)
        test_x = extract_features(splits.test.images, params, net)
        model = fit_feature_model(train_x, splits.train.labels, cfg.pipeline.pca_dim)
        metrics = {
            "l2": verification_metrics(l2_scores(test_x, test), test.same),
            "joint-bayes": verification_metrics(jb_scores(model, test_x, test), test.same),
        }
    with stage("write"):
        write_metrics(out / "metrics.csv", metrics)
        write_roc_csv(out / "roc.csv", metrics["joint-bayes"].roc)
        save_evaluation(out, splits, train_x, test_x, model)
    for name, m in metrics.items():
        logger.info("%s: accuracy %.4f, AUC %.4f", name, m.accuracy, roc_auc(m.roc))
    return metrics


def analyze_network(cfg: ExperimentConfig, network: Path) -> SpectrumReport:
    """Scatter spectra and a 2-D PCA view of a trained network's test features."""
    out = prepare_output(cfg.output, cfg.force)
    with stage("load-network"):
        params, net = load_params(network)
    splits = load_splits(cfg)
    with stage("analyze"):
        features = extract_features(splits.test.images, params, net)
        report = spectrum(compute_scatter(features, splits.test.labels))
        view = pca2_export(features, splits.test.labels)
    with stage("write"):
        write_spectrum_csv(out / "spectrum.csv", {network.stem: report})
        write_pca2_csv(out / "pca2.csv", view)
    logger.info(
        "Intra-personal tail mass %.4f, inter-personal top share %.4f",
        tail_mass(report.intra),
        top_share(report.inter),
    )
    return report
