"""
DIRL Loss Terms
Adversarial domain losses, supervised cross-entropy, per-class adversarial
losses, the triplet distribution loss and the weighted total
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from core.autodiff import (
    Tensor,
    add,
    exp,
    kl_categorical,
    l2_normalize,
    log_softmax,
    matmul,
    mul,
    pairwise_sq_distances,
    pick,
    reduce_mean,
    reduce_sum,
    relu,
    scale,
    take_rows,
    transpose,
)
from core.errors import ConfigurationError, ContractError, ShapeError
from schemas.config import LossWeights, TripletConfig

logger = logging.getLogger(__name__)

SOURCE = 0
TARGET = 1

__all__ = [
    "LossTerms",
    "conditional_disc_loss",
    "conditional_gen_loss",
    "kl_categorical",
    "marginal_disc_loss",
    "marginal_gen_loss",
    "neighbor_distribution",
    "neighbor_log_distributions",
    "supervised_ce_loss",
    "total_dirl_loss",
    "triplet_distribution_loss",
]


def _nll(logits: Optional[Tensor], targets, op: str) -> Tensor:
    """Batch mean of -log softmax(logits)[i, targets[i]]."""
    if logits is None:
        raise ContractError(f"{op}: empty batch")
    cols = np.broadcast_to(np.asarray(targets, dtype=np.int64), (logits.rows,))
    return scale(reduce_mean(pick(log_softmax(logits), cols)), -1.0)


# Adversarial domain terms

def marginal_disc_loss(d_src_logits: Tensor, d_tgt_logits: Tensor) -> Tensor:
    """Discriminator loss: source rows labeled source, target rows labeled target."""
    return add(
        _nll(d_src_logits, SOURCE, "marginal_disc_loss"),
        _nll(d_tgt_logits, TARGET, "marginal_disc_loss"),
    )


def marginal_gen_loss(d_tgt_logits: Tensor) -> Tensor:
    """Generator loss with inverted labels: target rows pushed toward the source label."""
    return _nll(d_tgt_logits, SOURCE, "marginal_gen_loss")


def conditional_disc_loss(c_src_logits: Optional[Tensor], c_tgt_logits: Optional[Tensor],
                          k: int) -> Optional[Tensor]:
    """Class-k discriminator loss, or None when either side of class k is empty."""
    if c_src_logits is None or c_tgt_logits is None:
        logger.debug("conditional discriminator term for class %d skipped: empty side", k)
        return None
    return marginal_disc_loss(c_src_logits, c_tgt_logits)


def conditional_gen_loss(c_tgt_logits: Optional[Tensor], k: int) -> Optional[Tensor]:
    if c_tgt_logits is None:
        logger.debug("conditional generator term for class %d skipped: empty target side", k)
        return None
    return marginal_gen_loss(c_tgt_logits)


# Supervised term

def _check_labels(logits: Tensor, labels: np.ndarray, side: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.rows,):
        raise ShapeError("supervised_ce_loss", logits.shape, labels.shape, f"{side} labels")
    if (labels < 0).any() or (labels >= logits.cols).any():
        raise IndexError(f"supervised_ce_loss: {side} labels outside [0, {logits.cols})")
    return labels


def supervised_ce_loss(
    f_logits_src: Optional[Tensor],
    y_src,
    f_logits_tgt: Optional[Tensor] = None,
    y_tgt=None,
) -> Tensor:
    """
    Sum of the source and labeled-target batch-mean cross-entropies.

    Either side may be None; at least one must be present.
    """
    parts = []
    if f_logits_src is not None:
        parts.append(_nll(f_logits_src, _check_labels(f_logits_src, y_src, "source"), "supervised_ce_loss"))
    if f_logits_tgt is not None:
        parts.append(_nll(f_logits_tgt, _check_labels(f_logits_tgt, y_tgt, "target"), "supervised_ce_loss"))
    if not parts:
        raise ContractError("supervised_ce_loss: no labeled examples")
    return parts[0] if len(parts) == 1 else add(parts[0], parts[1])


# Triplet distribution loss

def neighbor_log_distributions(features_norm: Tensor, sigma_sq: float) -> Tensor:
    """
    Row a holds log q_a, the softmax of -||z_i - z_a||^2 / sigma_sq over all
    batch members (the anchor included).
    """
    if features_norm.rows < 2:
        raise ContractError(f"neighbor distributions need at least 2 rows, got {features_norm.rows}")
    if sigma_sq <= 0:
        raise ConfigurationError(f"sigma_sq must be positive, got {sigma_sq}")
    return log_softmax(scale(pairwise_sq_distances(features_norm), -1.0 / sigma_sq))


def neighbor_distribution(features_norm: Tensor, anchor_index: int, sigma_sq: float) -> Tensor:
    """q_a as a 1xM row."""
    if not 0 <= anchor_index < features_norm.rows:
        raise IndexError(f"anchor {anchor_index} outside batch of {features_norm.rows}")
    return exp(take_rows(neighbor_log_distributions(features_norm, sigma_sq), [anchor_index]))


def _anchor_weights(labels: np.ndarray) -> tuple:
    same = labels[:, None] == labels[None, :]
    positives = same & ~np.eye(len(labels), dtype=bool)
    negatives = ~same
    n_pos = positives.sum(axis=1, keepdims=True)
    n_neg = negatives.sum(axis=1, keepdims=True)
    valid = (n_pos > 0) & (n_neg > 0)
    weights = (
        np.divide(positives, n_pos, out=np.zeros(positives.shape), where=n_pos > 0)
        - np.divide(negatives, n_neg, out=np.zeros(negatives.shape), where=n_neg > 0)
    )
    return weights, valid.astype(np.float64)


def triplet_distribution_loss(
    features: Tensor,
    labels: Sequence[int],
    cfg: TripletConfig,
    normalize: bool = True,
) -> Tensor:
    """
    Hinged triplet loss on KL divergences between neighbor distributions.

    For every anchor a, the mean KL(q_a || q_p) over positives p != a minus
    the mean KL(q_a || q_n) over negatives, plus the margin, hinged at 0 and
    summed over anchors. Anchors whose class has no other member are skipped.

    Args:
        features: raw feature rows (normalized here unless normalize=False)
        labels: one class label per row
        cfg: margin and kernel width

    Returns:
        1x1 loss tensor; a constant 0 when fewer than two classes are present
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (features.rows,):
        raise ShapeError("triplet_distribution_loss", features.shape, labels.shape, "one label per row")
    if len(np.unique(labels)) < 2:
        logger.warning("triplet batch holds a single class; no negatives, loss is 0")
        return Tensor(0.0)

    z = l2_normalize(features) if normalize else features
    log_q = neighbor_log_distributions(z, cfg.sigma_sq)
    q = exp(log_q)
    # kl[a, p] = sum_i q_a(i) log q_a(i) - sum_i q_a(i) log q_p(i)
    neg_entropy = reduce_sum(mul(q, log_q), axis=1)
    cross = matmul(q, transpose(log_q))
    kl = add(neg_entropy, scale(cross, -1.0))

    weights, valid = _anchor_weights(labels)
    per_anchor = add(reduce_sum(mul(kl, Tensor(weights)), axis=1), float(cfg.margin))
    return reduce_sum(mul(relu(per_anchor), Tensor(valid)))


# Total objective

@dataclass
class LossTerms:
    """Generator-side terms of one step; None means not computed this step."""
    classification: Optional[Tensor] = None
    marginal: Optional[Tensor] = None
    conditional: Optional[Tensor] = None
    triplet: Optional[Tensor] = None
    extras: dict = field(default_factory=dict)

    def values(self) -> dict:
        out = {}
        for name in ("classification", "marginal", "conditional", "triplet"):
            term = getattr(self, name)
            out[name] = None if term is None else term.item()
        return out


def sum_terms(terms: Sequence[Optional[Tensor]]) -> Optional[Tensor]:
    present = [t for t in terms if t is not None]
    if not present:
        return None
    total = present[0]
    for term in present[1:]:
        total = add(total, term)
    return total


def total_dirl_loss(terms: LossTerms, weights: LossWeights) -> Tensor:
    """
    Weighted sum of the generator-side terms.

    Discriminator losses are optimized in their own steps and never enter
    this total. Terms that are missing or carry weight 0 are skipped.
    """
    pairs = (
        (terms.classification, weights.classification, "classification"),
        (terms.marginal, weights.marginal, "marginal"),
        (terms.conditional, weights.conditional, "conditional"),
        (terms.triplet, weights.triplet, "triplet"),
    )
    weighted = []
    for term, weight, name in pairs:
        if weight < 0 or not np.isfinite(weight):
            raise ConfigurationError(f"loss weight for {name} must be finite and non-negative, got {weight}")
        if term is None or weight == 0:
            continue
        weighted.append(term if weight == 1.0 else scale(term, weight))
    total = sum_terms(weighted)
    return total if total is not None else Tensor(0.0)
