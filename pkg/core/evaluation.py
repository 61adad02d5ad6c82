"""
Evaluation Module
Accuracy, recall, silhouette, domain-discrepancy probes and plot-ready exports
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.metrics import silhouette_score as sk_silhouette_score

from core.autodiff import Tape, adam_step, backward, log_softmax, no_grad, pick, reduce_mean, scale
from core.errors import ContractError
from core.networks import MLP, ModelBundle, embed, predict, predict_proba
from data.synthetic import DomainDataset
from schemas.config import GridConfig, ProbeConfig
from schemas.report import EvalSnapshot

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

Encoder = Union[ModelBundle, Callable[[np.ndarray], np.ndarray]]


def _encode(encoder: Encoder, x: np.ndarray) -> np.ndarray:
    if isinstance(encoder, ModelBundle):
        return embed(encoder, x)
    return np.asarray(encoder(x), dtype=np.float64)


def _require_labeled(dataset: DomainDataset, op: str) -> None:
    if len(dataset) == 0:
        raise ContractError(f"{op}: empty dataset")
    if not dataset.fully_labeled:
        raise ContractError(f"{op}: dataset '{dataset.name}' is not fully labeled")


# ---------------------------------------------------------------------------
# classification metrics
# ---------------------------------------------------------------------------

def prediction_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


def accuracy(bundle: ModelBundle, dataset: DomainDataset) -> float:
    """Fraction of rows where argmax f(g(x)) equals the label."""
    _require_labeled(dataset, "accuracy")
    return prediction_accuracy(predict(bundle, dataset.features), dataset.labels)


def per_class_recall(bundle: ModelBundle, dataset: DomainDataset) -> list:
    """Recall per class; None for classes absent from the dataset."""
    _require_labeled(dataset, "per_class_recall")
    predictions = predict(bundle, dataset.features)
    recalls = []
    for k in range(dataset.num_classes):
        members = dataset.labels == k
        recalls.append(float(np.mean(predictions[members] == k)) if members.any() else None)
    return recalls


# ---------------------------------------------------------------------------
# clustering quality
# ---------------------------------------------------------------------------

def silhouette_score(embeddings, labels) -> float:
    """
    Mean silhouette coefficient with Euclidean distances.

    Singleton clusters score 0; when every point is its own cluster the
    mean is therefore 0.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n_labels = len(np.unique(labels))
    if n_labels < 2:
        raise ContractError("silhouette score needs at least two classes")
    if n_labels == len(labels):
        return 0.0
    return float(sk_silhouette_score(embeddings, labels, metric="euclidean"))


def domain_silhouettes(bundle: ModelBundle, source: DomainDataset, target: DomainDataset) -> dict:
    """Silhouette on raw g-features over both domains combined and per domain."""
    src_z = embed(bundle, source.features)
    tgt_z = embed(bundle, target.features)
    scores = {}
    for name, z, y in (
        ("overall", np.vstack([src_z, tgt_z]), np.concatenate([source.labels, target.labels])),
        ("source", src_z, source.labels),
        ("target", tgt_z, target.labels),
    ):
        try:
            scores[name] = silhouette_score(z, y)
        except ContractError:
            logger.debug("silhouette (%s) undefined: single class", name)
            scores[name] = None
    return scores


# ---------------------------------------------------------------------------
# discrepancy probes
# ---------------------------------------------------------------------------

def _balanced_split(n: int, holdout_fraction: float, rng: np.random.Generator) -> tuple:
    order = rng.permutation(n)
    n_hold = min(n - 1, max(1, int(round(n * holdout_fraction))))
    return order[n_hold:], order[:n_hold]


def domain_probe_accuracy(
    source_features: np.ndarray,
    target_features: np.ndarray,
    cfg: Optional[ProbeConfig] = None,
) -> float:
    """
    Held-out accuracy of a fresh domain classifier on fixed feature arrays.

    Both domains are subsampled to the same size and split 80/20 within each
    domain, so the held-out set is balanced and 0.5 means indistinguishable.
    """
    cfg = cfg or ProbeConfig()
    source_features = np.asarray(source_features, dtype=np.float64)
    target_features = np.asarray(target_features, dtype=np.float64)
    n = min(len(source_features), len(target_features))
    if n < cfg.min_per_domain:
        raise ContractError(f"probe needs at least {cfg.min_per_domain} examples per domain, got {n}")

    rng = np.random.default_rng(cfg.seed)
    src = source_features[rng.permutation(len(source_features))[:n]]
    tgt = target_features[rng.permutation(len(target_features))[:n]]
    src_train, src_hold = _balanced_split(n, cfg.holdout_fraction, rng)
    tgt_train, tgt_hold = _balanced_split(n, cfg.holdout_fraction, rng)

    x_train = np.vstack([src[src_train], tgt[tgt_train]])
    y_train = np.concatenate([np.zeros(len(src_train), dtype=np.int64), np.ones(len(tgt_train), dtype=np.int64)])
    x_hold = np.vstack([src[src_hold], tgt[tgt_hold]])
    y_hold = np.concatenate([np.zeros(len(src_hold), dtype=np.int64), np.ones(len(tgt_hold), dtype=np.int64)])

    probe = MLP(x_train.shape[1], cfg.hidden, 2, rng, name="probe")
    params = probe.parameters()
    batch = min(cfg.batch_size, len(x_train))
    for _ in range(cfg.steps):
        idx = rng.choice(len(x_train), size=batch, replace=False)
        with Tape() as tape:
            loss = scale(reduce_mean(pick(log_softmax(probe(x_train[idx])), y_train[idx])), -1.0)
        backward(tape, loss)
        adam_step(params, cfg.lr)

    with no_grad():
        predicted = np.argmax(probe(x_hold).values, axis=1)
    return prediction_accuracy(predicted, y_hold)


def _rows(data) -> np.ndarray:
    return data.features if isinstance(data, DomainDataset) else np.asarray(data, dtype=np.float64)


def marginal_probe(encoder: Encoder, source, target, cfg: Optional[ProbeConfig] = None) -> float:
    """Domain-probe accuracy on frozen encoder features of the two domains."""
    return domain_probe_accuracy(_encode(encoder, _rows(source)), _encode(encoder, _rows(target)), cfg)


@dataclass
class ConditionalProbeResult:
    per_class: dict = field(default_factory=dict)

    @property
    def available(self) -> dict:
        return {k: v for k, v in self.per_class.items() if v is not None}

    @property
    def mean(self) -> Optional[float]:
        values = list(self.available.values())
        return float(np.mean(values)) if values else None


def conditional_probe(
    encoder: Encoder,
    source: DomainDataset,
    target_labeled: DomainDataset,
    cfg: Optional[ProbeConfig] = None,
) -> ConditionalProbeResult:
    """Domain probe restricted to each class; classes too small in either domain are unavailable."""
    cfg = cfg or ProbeConfig()
    result = ConditionalProbeResult()
    for k in range(source.num_classes):
        src_rows = source.features[source.labels == k]
        tgt_rows = target_labeled.features[target_labeled.labels == k]
        if min(len(src_rows), len(tgt_rows)) < cfg.min_per_domain:
            logger.info("conditional probe for class %d unavailable (%d source, %d target)",
                        k, len(src_rows), len(tgt_rows))
            result.per_class[k] = None
            continue
        result.per_class[k] = domain_probe_accuracy(_encode(encoder, src_rows), _encode(encoder, tgt_rows), cfg)
    return result


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def evaluate_snapshot(
    bundle: ModelBundle,
    source: DomainDataset,
    target_test: DomainDataset,
    iteration: int,
    probe_cfg: Optional[ProbeConfig] = None,
    run_probes: bool = False,
    pseudo_pool_size: int = 0,
    pseudo_precision: Optional[float] = None,
) -> EvalSnapshot:
    silhouettes = domain_silhouettes(bundle, source, target_test)
    snapshot = dict(
        iteration=iteration,
        target_accuracy=accuracy(bundle, target_test),
        source_accuracy=accuracy(bundle, source),
        target_recall=per_class_recall(bundle, target_test),
        silhouette=silhouettes["overall"],
        silhouette_source=silhouettes["source"],
        silhouette_target=silhouettes["target"],
        pseudo_pool_size=pseudo_pool_size,
        pseudo_precision=pseudo_precision,
    )
    if run_probes:
        conditional = conditional_probe(bundle, source, target_test, probe_cfg)
        snapshot.update(
            marginal_probe=marginal_probe(bundle, source, target_test, probe_cfg),
            conditional_probe={str(k): v for k, v in conditional.per_class.items()},
            conditional_probe_mean=conditional.mean,
        )
    return EvalSnapshot(**snapshot)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def embeddings_frame(bundle: ModelBundle, datasets: Sequence[DomainDataset]) -> pd.DataFrame:
    frames = []
    for dataset in datasets:
        z = embed(bundle, dataset.features)
        frame = pd.DataFrame(dataset.features, columns=[f"x{i}" for i in range(dataset.dim)])
        for j in range(z.shape[1]):
            frame[f"z{j}"] = z[:, j]
        frame["predicted"] = predict(bundle, dataset.features)
        frame["label"] = dataset.labels
        frame["domain"] = dataset.domain.value
        frame["dataset"] = dataset.name
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def export_embeddings(bundle: ModelBundle, datasets: Sequence[DomainDataset], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    embeddings_frame(bundle, datasets).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def load_embeddings(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def decision_grid(bundle: ModelBundle, bounds: Sequence[float], resolution: int) -> pd.DataFrame:
    """
    Predicted class and its probability over a uniform resolution x resolution lattice.

    Rows run over x0 fastest, then x1.
    """
    if bundle.input_dim != 2:
        raise ContractError(f"decision grid needs a 2D input space, got {bundle.input_dim}")
    grid = GridConfig(bounds=tuple(bounds), resolution=resolution)
    x_min, x_max, y_min, y_max = grid.bounds
    xx, yy = np.meshgrid(np.linspace(x_min, x_max, resolution), np.linspace(y_min, y_max, resolution))
    points = np.column_stack([xx.ravel(), yy.ravel()])
    probs = predict_proba(bundle, points)
    return pd.DataFrame({
        "x0": points[:, 0],
        "x1": points[:, 1],
        "predicted_class": np.argmax(probs, axis=1),
        "max_prob": probs.max(axis=1),
    })


def export_decision_grid(bundle: ModelBundle, grid: GridConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    decision_grid(bundle, grid.bounds, grid.resolution).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path
