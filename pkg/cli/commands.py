"""
Command Implementations
gen-data, train, compare and eval over a per-run output directory
"""

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass
from multiprocessing import Pool
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError

from core.errors import ConfigurationError, TrainingAborted
from core.evaluation import evaluate_snapshot, export_decision_grid, export_embeddings
from core.networks import load_bundle, save_checkpoint
from core.trainer import run_training
from data.io import dataset_checksum, load_dataset, save_dataset
from data.synthetic import ScenarioData, generate_scenario
from schemas.config import ExperimentConfig, TrainingMode
from schemas.report import TRACE_COLUMNS, RunManifest, RunReport

logger = logging.getLogger(__name__)

DATASET_FILES = ("source", "target_train", "target_test")
MANIFEST = "manifest.json"
LOSS_TRACE = "loss_trace.csv"
METRICS = "metrics.jsonl"
FINAL_CHECKPOINT = "final.npz"
EMBEDDINGS = "embeddings.csv"
DECISION_GRID = "decision_grid.csv"
DIAGNOSTIC = "diagnostic.json"
COMPARISON = "comparison.csv"


@dataclass
class RunOutcome:
    run_dir: Path
    manifest: RunManifest
    report: Optional[RunReport] = None


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _describe(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
    )


def load_experiment_config(config_path=None) -> ExperimentConfig:
    """Parse a YAML experiment file; no path means all defaults."""
    if config_path is None:
        return ExperimentConfig()
    path = Path(config_path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"{path}: {_describe(exc)}") from exc


def resolve_config(config_path=None, seed: Optional[int] = None, mode: Optional[str] = None,
                   out: Optional[str] = None) -> ExperimentConfig:
    """File values first, then flag overrides."""
    cfg = load_experiment_config(config_path)
    try:
        return cfg.with_overrides(seed=seed, mode=mode, output_dir=out)
    except ValidationError as exc:
        raise ConfigurationError(_describe(exc)) from exc


def run_id_for(cfg: ExperimentConfig) -> str:
    payload = json.dumps(cfg.resolved(), sort_keys=True).encode()
    return hashlib.sha1(payload).hexdigest()[:12]


def prepare_run_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigurationError(f"run directory {path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def load_datasets(data_dir, num_classes: int) -> ScenarioData:
    data_dir = Path(data_dir)
    missing = [name for name in DATASET_FILES if not (data_dir / f"{name}.csv").is_file()]
    if missing:
        raise ConfigurationError(f"{data_dir}: missing dataset files {missing}")
    return ScenarioData(*(
        load_dataset(data_dir / f"{name}.csv", num_classes=num_classes, name=name) for name in DATASET_FILES
    ))


def cmd_gen_data(config_path=None, out: Optional[str] = None, seed: Optional[int] = None) -> Path:
    """Write source/target_train/target_test CSVs and a manifest under <out>/<run_name>/data/."""
    cfg = resolve_config(config_path, seed=seed, out=out)
    data_dir = Path(cfg.output_dir) / cfg.run_name / "data"
    data_dir.mkdir(parents=True, exist_ok=True)

    print(f"📊 Generating {cfg.scenario.scenario.value} datasets (seed {cfg.scenario.seed})...")
    datasets = generate_scenario(cfg.scenario)
    for name, dataset in zip(DATASET_FILES, datasets):
        save_dataset(dataset, data_dir / f"{name}.csv")

    manifest = {
        "config": cfg.resolved(),
        "dataset_checksum": dataset_checksum(datasets),
        "rows": {name: len(dataset) for name, dataset in zip(DATASET_FILES, datasets)},
    }
    (data_dir / MANIFEST).write_text(json.dumps(manifest, indent=2))
    print(f"✅ Wrote {sum(manifest['rows'].values())} rows to {data_dir}")
    return data_dir


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def loss_trace_frame(report: RunReport) -> pd.DataFrame:
    rows = []
    for step in report.steps:
        row = {"iteration": step.iteration}
        row.update({column: getattr(step, column) for column in TRACE_COLUMNS})
        row["skipped_classes"] = ";".join(str(k) for k in step.skipped_classes)
        rows.append(row)
    return pd.DataFrame(rows, columns=["iteration", *TRACE_COLUMNS, "skipped_classes"])


def _write_manifest(run_dir: Path, manifest: RunManifest) -> None:
    (run_dir / MANIFEST).write_text(manifest.model_dump_json(indent=2))


def train_into(cfg: ExperimentConfig, run_dir: Path, datasets: ScenarioData, progress: bool = False,
               data_dir=None) -> RunOutcome:
    """Train one configuration and write every run artifact into run_dir.

    data_dir names the CSV directory the datasets came from; None means they
    were generated from cfg.scenario.
    """
    run_id = run_id_for(cfg)
    checksum = dataset_checksum(datasets)
    metrics_path = run_dir / METRICS

    def append_metrics(snapshot) -> None:
        with open(metrics_path, "a") as handle:
            handle.write(snapshot.model_dump_json() + "\n")

    manifest = RunManifest(
        run_id=run_id,
        run_name=run_dir.name,
        status="running",
        config=cfg.resolved(),
        dataset_checksum=checksum,
        data_dir=None if data_dir is None else str(Path(data_dir).resolve()),
    )
    try:
        bundle, report = run_training(
            datasets,
            cfg.train,
            probe_cfg=cfg.probe,
            checkpoint_dir=run_dir / "checkpoints",
            on_snapshot=append_metrics,
            progress=progress,
            run_id=run_id,
        )
    except TrainingAborted as exc:
        (run_dir / DIAGNOSTIC).write_text(json.dumps(exc.snapshot.to_dict(), indent=2))
        manifest.status = "aborted"
        manifest.iterations_run = exc.snapshot.iteration
        manifest.files = {"diagnostic": DIAGNOSTIC, "metrics": METRICS}
        _write_manifest(run_dir, manifest)
        raise

    loss_trace_frame(report).to_csv(run_dir / LOSS_TRACE, index=False, float_format="%.17g")
    save_checkpoint(bundle, run_dir / FINAL_CHECKPOINT, report.iterations_run)
    export_embeddings(bundle, list(datasets), run_dir / EMBEDDINGS)
    report.embeddings_path = EMBEDDINGS
    files = {"loss_trace": LOSS_TRACE, "metrics": METRICS, "checkpoint": FINAL_CHECKPOINT, "embeddings": EMBEDDINGS}
    if bundle.input_dim == 2:
        export_decision_grid(bundle, cfg.grid, run_dir / DECISION_GRID)
        files["decision_grid"] = DECISION_GRID

    manifest.status = "completed"
    manifest.iterations_run = report.iterations_run
    manifest.stopped_early = report.stopped_early
    manifest.final_metrics = report.final_metrics()
    manifest.files = files
    _write_manifest(run_dir, manifest)
    return RunOutcome(run_dir, manifest, report)


def _datasets_for(cfg: ExperimentConfig, data_dir=None) -> ScenarioData:
    if data_dir is not None:
        return load_datasets(data_dir, cfg.scenario.num_classes)
    return generate_scenario(cfg.scenario)


def cmd_train(config_path=None, seed: Optional[int] = None, mode: Optional[str] = None,
              out: Optional[str] = None, force: bool = False, data_dir=None,
              progress: bool = True) -> RunOutcome:
    cfg = resolve_config(config_path, seed=seed, mode=mode, out=out)
    run_dir = prepare_run_dir(Path(cfg.output_dir) / cfg.run_name, force)
    datasets = _datasets_for(cfg, data_dir)

    print(f"🧠 Training {cfg.train.mode.value} for up to {cfg.train.iterations} iterations -> {run_dir}")
    outcome = train_into(cfg, run_dir, datasets, progress=progress, data_dir=data_dir)
    final = outcome.report.final
    print(f"✅ Target accuracy {final.target_accuracy:.3f}, source accuracy {final.source_accuracy:.3f}")
    return outcome


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

def _comparison_row(mode: str, outcome: Optional[RunOutcome], num_classes: int, checksum: str,
                    error: str = "") -> dict:
    row = {"mode": mode, "status": "failed" if outcome is None else outcome.manifest.status}
    metrics = outcome.manifest.final_metrics if outcome is not None else {}
    for key in ("target_accuracy", "source_accuracy", "silhouette", "marginal_probe", "conditional_probe_mean"):
        value = metrics.get(key)
        row[key] = np.nan if value is None else value
    recall = metrics.get("target_recall") or [None] * num_classes
    conditional = metrics.get("conditional_probe") or {}
    for k in range(num_classes):
        row[f"target_recall_{k}"] = np.nan if recall[k] is None else recall[k]
        value = conditional.get(str(k))
        row[f"conditional_probe_{k}"] = np.nan if value is None else value
    row["iterations_run"] = outcome.manifest.iterations_run if outcome is not None else 0
    row["dataset_checksum"] = checksum
    row["error"] = error
    return row


def _compare_worker(job: tuple) -> tuple:
    resolved, run_dir, data_dir = job
    cfg = ExperimentConfig.model_validate(resolved)
    try:
        outcome = train_into(cfg, Path(run_dir), _datasets_for(cfg, data_dir), data_dir=data_dir)
        return cfg.train.mode.value, outcome, ""
    except Exception as exc:
        # a failed mode still gets its row, with the error recorded
        logger.exception("compare run %s failed", cfg.train.mode.value)
        return cfg.train.mode.value, None, f"{type(exc).__name__}: {exc}"


def cmd_compare(config_path=None, seed: Optional[int] = None, out: Optional[str] = None,
                force: bool = False, jobs: int = 1, data_dir=None,
                modes: Optional[Sequence[str]] = None) -> tuple:
    """
    Train every compared mode on identical data and seed.

    Returns:
        (path to comparison.csv, True when every sub-run completed)
    """
    cfg = resolve_config(config_path, seed=seed, out=out)
    root = prepare_run_dir(Path(cfg.output_dir) / cfg.run_name, force)
    modes = [TrainingMode(m) for m in (modes or cfg.compare_modes)]
    checksum = dataset_checksum(_datasets_for(cfg, data_dir))

    job_list = []
    for mode in modes:
        sub_cfg = cfg.with_overrides(mode=mode.value)
        sub_dir = root / mode.value
        sub_dir.mkdir(parents=True, exist_ok=True)
        job_list.append((sub_cfg.resolved(), str(sub_dir), None if data_dir is None else str(data_dir)))

    print(f"⚖️  Comparing {', '.join(m.value for m in modes)} ({jobs} worker(s))...")
    if jobs > 1:
        with Pool(processes=min(jobs, len(job_list))) as pool:
            results = pool.map(_compare_worker, job_list)
    else:
        results = [_compare_worker(job) for job in job_list]

    rows = [_comparison_row(mode, outcome, cfg.scenario.num_classes, checksum, error)
            for mode, outcome, error in results]
    table = pd.DataFrame(rows)
    path = root / COMPARISON
    table.to_csv(path, index=False, float_format="%.6g")

    ok = all(outcome is not None for _, outcome, _ in results)
    for row in rows:
        mark = "✅" if row["status"] == "completed" else "❌"
        print(f"{mark} {row['mode']:<14} target acc {row['target_accuracy']:.3f}  marginal probe {row['marginal_probe']:.3f}")
    return path, ok


# ---------------------------------------------------------------------------
# re-evaluation
# ---------------------------------------------------------------------------

def cmd_eval(run_dir, data_dir=None):
    """
    Rebuild a finished run from its manifest and final checkpoint and evaluate it again.

    Without --data the run's own data is used: the directory recorded in the
    manifest, or the generator config when the run generated its data.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST
    if not manifest_path.is_file():
        raise ConfigurationError(f"{run_dir}: no {MANIFEST}; not a run directory")
    manifest = RunManifest.model_validate_json(manifest_path.read_text())
    if manifest.status != "completed":
        raise ConfigurationError(f"{run_dir}: run status is '{manifest.status}', nothing to evaluate")

    cfg = ExperimentConfig.model_validate(manifest.config)
    if data_dir is None and manifest.data_dir is not None:
        data_dir = manifest.data_dir
        logger.info("evaluating on the recorded data directory %s", data_dir)
    datasets = _datasets_for(cfg, data_dir)
    if dataset_checksum(datasets) != manifest.dataset_checksum:
        logger.warning("dataset checksum differs from the one recorded for %s", run_dir)

    print(f"🔍 Re-evaluating {run_dir}...")
    bundle = load_bundle(run_dir / FINAL_CHECKPOINT)
    snapshot = evaluate_snapshot(
        bundle, datasets.source, datasets.target_test, manifest.iterations_run, cfg.probe, run_probes=True,
    )
    (run_dir / "eval.json").write_text(snapshot.model_dump_json(indent=2))
    print(f"✅ Target accuracy {snapshot.target_accuracy:.3f}, marginal probe {snapshot.marginal_probe:.3f}")
    return snapshot
