"""
Synthetic Domain Generator
Two Gaussian classes per domain with random anisotropic covariances,
plus the label-swap and label-shift failure scenarios
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

from core.errors import ConfigurationError, ContractError, ShortageError
from schemas.config import Scenario, ScenarioConfig

logger = logging.getLogger(__name__)

UNLABELED = -1


class Domain(str, Enum):
    source = "source"
    target = "target"


@dataclass
class DomainDataset:
    """
    Feature matrix with class labels and a domain tag.

    `labels` holds -1 for unlabeled rows. `true_labels`, when present, keeps
    the generator's ground truth for rows whose label is hidden; training
    never reads it.
    """
    features: np.ndarray
    labels: np.ndarray
    domain: Domain
    num_classes: int
    name: str
    true_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domain = Domain(self.domain)
        if self.features.ndim != 2 or len(self.features) == 0:
            raise ContractError(f"dataset '{self.name}' needs a non-empty 2D feature matrix")
        if self.labels.shape != (len(self.features),):
            raise ContractError(f"dataset '{self.name}' has {len(self.labels)} labels for {len(self.features)} rows")
        if self.num_classes < 1:
            raise ContractError(f"dataset '{self.name}' needs at least one class")
        if (self.labels < UNLABELED).any() or (self.labels >= self.num_classes).any():
            raise IndexError(f"dataset '{self.name}' has labels outside [-1, {self.num_classes})")
        if self.true_labels is not None:
            self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
            if self.true_labels.shape != self.labels.shape:
                raise ContractError(f"dataset '{self.name}' true_labels shape mismatch")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_labeled(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def fully_labeled(self) -> bool:
        return bool(self.is_labeled.all())

    @property
    def known_labels(self) -> np.ndarray:
        """Ground truth where it was retained, visible labels otherwise."""
        return self.true_labels if self.true_labels is not None else self.labels

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_labeled)

    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_labeled)

    def class_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels[self.is_labeled], minlength=self.num_classes)


class ScenarioData(NamedTuple):
    source: DomainDataset
    target_train: DomainDataset
    target_test: DomainDataset


def allocate_counts(total: int, proportions) -> np.ndarray:
    """Split `total` by `proportions` with largest-remainder rounding (ties to lower class)."""
    props = np.asarray(proportions, dtype=np.float64)
    raw = total * props
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    order = sorted(range(len(props)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:short]:
        counts[k] += 1
    return counts


def gaussian_covariance(sigma_sq: float, w: np.ndarray) -> np.ndarray:
    """σ²I + WWᵀ, symmetric positive definite for any W."""
    w = np.asarray(w, dtype=np.float64)
    return sigma_sq * np.eye(w.shape[0]) + w @ w.T


def _draw_covariances(cfg: ScenarioConfig, rng: np.random.Generator) -> dict:
    dim = cfg.input_dim
    covariances = {}
    for domain, means in ((Domain.source, cfg.source_means), (Domain.target, cfg.target_means)):
        covariances[domain] = [
            gaussian_covariance(cfg.sigma_sq, cfg.w_scale * rng.standard_normal((dim, dim)))
            for _ in means
        ]
    return covariances


def scenario_covariances(cfg: ScenarioConfig) -> dict:
    """The per-class covariances a generator run with this config uses."""
    return _draw_covariances(cfg, np.random.default_rng(cfg.seed))


def _draw_domain(
    rng: np.random.Generator,
    name: str,
    domain: Domain,
    means: list,
    covariances: list,
    counts: np.ndarray,
) -> DomainDataset:
    features, labels = [], []
    for k, (mean, cov, count) in enumerate(zip(means, covariances, counts)):
        chol = np.linalg.cholesky(cov)
        z = rng.standard_normal((int(count), len(mean)))
        features.append(np.asarray(mean, dtype=np.float64) + z @ chol.T)
        labels.append(np.full(int(count), k, dtype=np.int64))
    order = rng.permutation(int(counts.sum()))
    return DomainDataset(
        features=np.vstack(features)[order],
        labels=np.concatenate(labels)[order],
        domain=domain,
        num_classes=len(means),
        name=name,
    )


def _generate(cfg: ScenarioConfig, target_proportions) -> ScenarioData:
    rng = np.random.default_rng(cfg.seed)
    covariances = _draw_covariances(cfg, rng)
    source = _draw_domain(
        rng, "source", Domain.source, cfg.source_means, covariances[Domain.source],
        allocate_counts(cfg.n_source, cfg.source_proportions),
    )
    target_train = _draw_domain(
        rng, "target_train", Domain.target, cfg.target_means, covariances[Domain.target],
        allocate_counts(cfg.n_target, target_proportions),
    )
    target_test = _draw_domain(
        rng, "target_test", Domain.target, cfg.target_means, covariances[Domain.target],
        allocate_counts(cfg.n_target_test, cfg.target_test_proportions),
    )
    return ScenarioData(source, target_train, target_test)


def generate_gaussian_2d(cfg: ScenarioConfig) -> ScenarioData:
    """
    Draw source, target-train and target-test datasets.

    One W per Gaussian (per class per domain) is drawn first, then the
    samples; the same seed always yields bitwise-identical datasets.

    Returns:
        ScenarioData(source, target_train, target_test), all fully labeled
    """
    return _generate(cfg, cfg.target_proportions)


def _swap_labels(labels: np.ndarray) -> np.ndarray:
    swapped = labels.copy()
    swapped[labels == 0] = 1
    swapped[labels == 1] = 0
    return swapped


def generate_scenario(cfg: ScenarioConfig) -> ScenarioData:
    """Build the datasets for the configured scenario."""
    try:
        scenario = Scenario(cfg.scenario)
    except ValueError:
        raise ConfigurationError(f"unknown scenario '{cfg.scenario}'") from None

    if scenario is Scenario.base:
        return generate_gaussian_2d(cfg)

    if scenario is Scenario.label_swap:
        data = generate_gaussian_2d(cfg)
        return ScenarioData(
            data.source,
            replace(data.target_train, labels=_swap_labels(data.target_train.labels)),
            replace(data.target_test, labels=_swap_labels(data.target_test.labels)),
        )

    # label_shift: imbalanced target training classes, balanced source
    return _generate(cfg, cfg.label_shift_proportions)


def select_labeled_target(target_train: DomainDataset, k_per_class: int, seed: int) -> DomainDataset:
    """
    Keep exactly k labels per class and hide the rest.

    Args:
        target_train: target dataset whose labels (or retained ground truth) are known
        k_per_class: labeled examples to keep per class; 0 hides every label
        seed: selection seed

    Returns:
        A copy with hidden labels set to -1 and ground truth kept in true_labels
    """
    if k_per_class < 0:
        raise ConfigurationError(f"k_per_class must be non-negative, got {k_per_class}")
    known = target_train.known_labels
    rng = np.random.default_rng(seed)
    masked = np.full(len(target_train), UNLABELED, dtype=np.int64)
    for k in range(target_train.num_classes):
        members = np.flatnonzero(known == k)
        if len(members) < k_per_class:
            raise ShortageError(k, len(members), k_per_class)
        if k_per_class == 0:
            continue
        chosen = rng.choice(members, size=k_per_class, replace=False)
        masked[chosen] = k
    logger.debug("kept %d labeled target examples of %d", int((masked >= 0).sum()), len(masked))
    return replace(target_train, labels=masked, true_labels=known.copy())
