"""
Mini-batch Construction
Half-source/half-target mixed batches and class-balanced per-class batches
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from core.errors import ConfigurationError, ContractError
from data.synthetic import DomainDataset

logger = logging.getLogger(__name__)


@dataclass
class LabeledPool:
    """Feature rows with (true or pseudo) class labels."""
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def empty(cls, dim: int) -> "LabeledPool":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))

    @classmethod
    def labeled_part(cls, dataset: DomainDataset) -> "LabeledPool":
        idx = dataset.labeled_indices()
        return cls(dataset.features[idx], dataset.labels[idx])

    def concat(self, other: "LabeledPool") -> "LabeledPool":
        return LabeledPool(np.vstack([self.x, other.x]), np.concatenate([self.y, other.y]))


@dataclass
class MiniBatch:
    source_x: np.ndarray
    source_y: np.ndarray
    labeled_target_x: np.ndarray
    labeled_target_y: np.ndarray
    unlabeled_target_x: np.ndarray
    pseudo_target_x: np.ndarray
    pseudo_target_y: np.ndarray

    @property
    def target_x(self) -> np.ndarray:
        """The whole target half: labeled rows then unlabeled rows."""
        return np.vstack([self.labeled_target_x, self.unlabeled_target_x])

    @property
    def size(self) -> int:
        return len(self.source_x) + len(self.labeled_target_x) + len(self.unlabeled_target_x)

    def triplet_pool(self) -> LabeledPool:
        """Every labeled row of the batch: source, labeled target, pseudo-labeled target."""
        return LabeledPool(
            np.vstack([self.source_x, self.labeled_target_x, self.pseudo_target_x]),
            np.concatenate([self.source_y, self.labeled_target_y, self.pseudo_target_y]),
        )


@dataclass
class ClassGroup:
    source_x: np.ndarray
    target_x: np.ndarray


@dataclass
class ClassBatch:
    groups: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    @property
    def classes(self) -> list:
        return sorted(self.groups)


def _balanced_counts(total: int, classes: list) -> dict:
    base, extra = divmod(total, len(classes))
    return {k: base + (1 if i < extra else 0) for i, k in enumerate(classes)}


def _draw(rng: np.random.Generator, pool_size: int, count: int) -> np.ndarray:
    return rng.integers(0, pool_size, size=count)


def sample_pseudo(pool: LabeledPool, count: int, rng: np.random.Generator) -> LabeledPool:
    """Class-balanced draw with replacement from a pseudo-labeled pool."""
    if len(pool) == 0 or count <= 0:
        return LabeledPool.empty(pool.x.shape[1] if pool.x.ndim == 2 else 0)
    classes = [int(k) for k in np.unique(pool.y)]
    xs, ys = [], []
    for k, n in _balanced_counts(count, classes).items():
        members = np.flatnonzero(pool.y == k)
        picks = members[_draw(rng, len(members), n)]
        xs.append(pool.x[picks])
        ys.append(pool.y[picks])
    return LabeledPool(np.vstack(xs), np.concatenate(ys))


def sample_mixed_batch(
    source: DomainDataset,
    target: DomainDataset,
    batch_size: int,
    labeled_target_fraction: float,
    rng: np.random.Generator,
    pseudo: Optional[LabeledPool] = None,
    pseudo_count: Optional[int] = None,
) -> MiniBatch:
    """
    Draw one mixed mini-batch with replacement.

    The source half is class-balanced; the target half holds
    floor(fraction * half) labeled rows and unlabeled rows for the rest.
    Pseudo-labeled rows, when a pool is given, ride along outside the
    half/half split and are drawn last.

    Args:
        source: labeled source dataset
        target: target dataset with some labels hidden
        batch_size: even total of source plus target rows
        labeled_target_fraction: share of the target half that is labeled
        rng: generator consumed in a fixed order
        pseudo: optional pseudo-labeled target pool
        pseudo_count: rows to draw from it (defaults to the labeled slot count,
            or a quarter of the target half when there are none)

    Returns:
        MiniBatch
    """
    if batch_size <= 0 or batch_size % 2:
        raise ConfigurationError(f"batch_size must be a positive even number, got {batch_size}")
    if not 0.0 <= labeled_target_fraction <= 1.0:
        raise ConfigurationError(f"labeled_target_fraction must lie in [0, 1], got {labeled_target_fraction}")
    half = batch_size // 2
    classes = list(range(source.num_classes))

    xs, ys = [], []
    for k, n in _balanced_counts(half, classes).items():
        members = source.class_indices(k)
        if len(members) == 0:
            raise ContractError(f"source has no examples of class {k}")
        picks = members[_draw(rng, len(members), n)]
        xs.append(source.features[picks])
        ys.append(source.labels[picks])
    source_x, source_y = np.vstack(xs), np.concatenate(ys)

    n_labeled = int(np.floor(labeled_target_fraction * half))
    labeled_idx = target.labeled_indices()
    if n_labeled > 0 and len(labeled_idx) == 0:
        raise ConfigurationError(
            f"labeled_target_fraction={labeled_target_fraction} but the target has no labeled examples"
        )
    picks = labeled_idx[_draw(rng, len(labeled_idx), n_labeled)] if n_labeled else np.zeros(0, dtype=np.intp)
    labeled_x, labeled_y = target.features[picks], target.labels[picks]

    n_unlabeled = half - n_labeled
    unlabeled_idx = target.unlabeled_indices()
    if n_unlabeled > 0 and len(unlabeled_idx) == 0:
        raise ContractError("target has no unlabeled examples to fill the unlabeled slots")
    picks = unlabeled_idx[_draw(rng, len(unlabeled_idx), n_unlabeled)] if n_unlabeled else np.zeros(0, dtype=np.intp)
    unlabeled_x = target.features[picks]

    if pseudo is not None and len(pseudo):
        count = pseudo_count if pseudo_count is not None else (n_labeled or max(1, half // 4))
        drawn = sample_pseudo(pseudo, count, rng)
    else:
        drawn = LabeledPool.empty(source.dim)

    return MiniBatch(
        source_x=source_x,
        source_y=source_y,
        labeled_target_x=labeled_x,
        labeled_target_y=labeled_y,
        unlabeled_target_x=unlabeled_x,
        pseudo_target_x=drawn.x,
        pseudo_target_y=drawn.y,
    )


def sample_classwise_batch(
    source: DomainDataset,
    target_labeled_plus_pseudo: LabeledPool,
    per_class_count: int,
    rng: np.random.Generator,
) -> ClassBatch:
    """
    Draw per_class_count source and target rows for every class.

    Classes without a target representative are skipped and listed in
    ClassBatch.skipped; they consume no random draws.
    """
    if per_class_count <= 0:
        raise ConfigurationError(f"per_class_count must be positive, got {per_class_count}")
    batch = ClassBatch()
    pool = target_labeled_plus_pseudo
    for k in range(source.num_classes):
        source_members = source.class_indices(k)
        target_members = np.flatnonzero(pool.y == k)
        if len(source_members) == 0 or len(target_members) == 0:
            batch.skipped.append(k)
            continue
        src = source_members[_draw(rng, len(source_members), per_class_count)]
        tgt = target_members[_draw(rng, len(target_members), per_class_count)]
        batch.groups[k] = ClassGroup(source.features[src], pool.x[tgt])
    if batch.skipped:
        logger.debug("class batch skipped classes %s (no target representatives)", batch.skipped)
    return batch
