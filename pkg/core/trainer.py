"""
Training Module
Minimax schedule over g, f, D and the C_k bank, pseudo-label gating,
periodic evaluation and early stopping
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from tqdm import tqdm

from core.autodiff import Tape, adam_step, backward, frozen
from core.errors import DegenerateFeatureError, DiagnosticSnapshot, NonFiniteError, TrainingAborted
from core.evaluation import evaluate_snapshot
from core.losses import (
    LossTerms,
    conditional_disc_loss,
    conditional_gen_loss,
    marginal_disc_loss,
    marginal_gen_loss,
    sum_terms,
    supervised_ce_loss,
    total_dirl_loss,
    triplet_distribution_loss,
)
from core.networks import (
    ModelBundle,
    classify,
    discriminate_class,
    discriminate_domain,
    features,
    init_bundle,
    predict_proba,
    save_checkpoint,
)
from data.batching import ClassBatch, LabeledPool, MiniBatch, sample_classwise_batch, sample_mixed_batch
from data.synthetic import DomainDataset, ScenarioData, select_labeled_target
from schemas.config import ProbeConfig, PseudoConfig, TrainConfig, TrainingMode
from schemas.report import EvalSnapshot, RunReport, StepRecord

logger = logging.getLogger(__name__)

RNG_STREAMS = ("batch", "classwise")


# ---------------------------------------------------------------------------
# pseudo-labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PseudoLabel:
    index: int
    class_label: int
    confidence: float


@dataclass
class PseudoLabelPool:
    """Per class, the retained (index, confidence) pairs, most confident first."""
    entries: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def indices(self) -> np.ndarray:
        return np.array([e.index for k in sorted(self.entries) for e in self.entries[k]], dtype=np.int64)

    def labels(self) -> np.ndarray:
        return np.array([e.class_label for k in sorted(self.entries) for e in self.entries[k]], dtype=np.int64)

    def class_sizes(self) -> dict:
        return {k: len(v) for k, v in sorted(self.entries.items())}

    def as_labeled_pool(self, target: DomainDataset) -> LabeledPool:
        if not len(self):
            return LabeledPool.empty(target.dim)
        return LabeledPool(target.features[self.indices()], self.labels())

    def precision(self, target: DomainDataset) -> Optional[float]:
        """Share of pseudo-labels matching retained ground truth, when the dataset kept it."""
        if not len(self) or target.true_labels is None:
            return None
        return float(np.mean(target.true_labels[self.indices()] == self.labels()))


def select_top_pseudo_labels(probs: np.ndarray, indices, top_n: int) -> PseudoLabelPool:
    """
    Keep, for each class, the top_n examples predicted as that class.

    Args:
        probs: predicted class probabilities, one row per candidate
        indices: dataset index of each candidate row
        top_n: maximum entries per class

    Returns:
        PseudoLabelPool with confidences descending; ties go to the lower index
    """
    probs = np.asarray(probs, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    predicted = np.argmax(probs, axis=1) if len(probs) else np.zeros(0, dtype=np.int64)
    confidence = probs.max(axis=1) if len(probs) else np.zeros(0)
    pool = PseudoLabelPool()
    for k in range(probs.shape[1]):
        members = np.flatnonzero(predicted == k)
        order = members[np.lexsort((indices[members], -confidence[members]))][:top_n]
        pool.entries[k] = [PseudoLabel(int(indices[i]), k, float(confidence[i])) for i in order]
        if not len(order):
            logger.info("no unlabeled target example is predicted as class %d", k)
    return pool


def assign_pseudo_labels(bundle: ModelBundle, target: DomainDataset, cfg: PseudoConfig) -> PseudoLabelPool:
    """Score the unlabeled target rows with f(g(x)) and keep the top-n per class."""
    candidates = target.unlabeled_indices()
    if not len(candidates):
        return PseudoLabelPool({k: [] for k in range(bundle.num_classes)})
    probs = predict_proba(bundle, target.features[candidates])
    return select_top_pseudo_labels(probs, candidates, cfg.top_n_per_class)


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    bundle: ModelBundle
    cfg: TrainConfig
    source: DomainDataset
    target: DomainDataset
    rngs: dict
    iteration: int = 0
    pseudo_pool: PseudoLabelPool = field(default_factory=PseudoLabelPool)

    @property
    def mode(self) -> TrainingMode:
        return TrainingMode(self.cfg.mode)

    @property
    def uses_pseudo(self) -> bool:
        return self.cfg.pseudo.enabled and (self.mode.uses_conditional or self.mode.uses_triplet)

    @property
    def labeled_fraction(self) -> float:
        return self.cfg.labeled_target_fraction if len(self.target.labeled_indices()) else 0.0


def spawn_streams(seed: int) -> dict:
    """Independent generators per sampling concern, so one mode's draws never shift another's."""
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(RNG_STREAMS, children)}


def init_state(source: DomainDataset, target: DomainDataset, cfg: TrainConfig) -> TrainState:
    net = cfg.network
    bundle = init_bundle(source.dim, net.feature_dim, source.num_classes, net.hidden, seed=cfg.seed)
    return TrainState(bundle=bundle, cfg=cfg, source=source, target=target, rngs=spawn_streams(cfg.seed))


def draw_batches(state: TrainState) -> tuple:
    """The mixed batch for this step and, when conditional terms are on, the per-class batch."""
    pseudo = state.pseudo_pool.as_labeled_pool(state.target) if state.uses_pseudo else None
    batch = sample_mixed_batch(
        state.source,
        state.target,
        state.cfg.batch_size,
        state.labeled_fraction,
        state.rngs["batch"],
        pseudo=pseudo,
    )
    class_batch = None
    if state.mode.uses_conditional:
        pool = LabeledPool.labeled_part(state.target)
        if pseudo is not None:
            pool = pool.concat(pseudo)
        class_batch = sample_classwise_batch(
            state.source,
            pool,
            state.cfg.class_batch_size(state.source.num_classes),
            state.rngs["classwise"],
        )
    return batch, class_batch


def _item(tensor) -> Optional[float]:
    return None if tensor is None else tensor.item()


def _abort(state: TrainState, term: str, exc: Exception) -> TrainingAborted:
    snapshot = DiagnosticSnapshot(
        iteration=state.iteration,
        term=term,
        reason=str(exc),
        parameter_norms=state.bundle.parameter_norms(),
    )
    logger.error("training aborted at iteration %d in %s: %s", state.iteration, term, exc)
    return TrainingAborted(snapshot)


def _domain_step(state: TrainState, batch: MiniBatch) -> float:
    bundle = state.bundle
    with frozen(bundle.feature_params()):
        with Tape() as tape:
            loss = marginal_disc_loss(
                discriminate_domain(bundle, features(bundle, batch.source_x)),
                discriminate_domain(bundle, features(bundle, batch.target_x)),
            )
        backward(tape, loss)
    adam_step(bundle.domain_params(), state.cfg.lr)
    return loss.item()


def _class_step(state: TrainState, class_batch: ClassBatch) -> Optional[float]:
    bundle = state.bundle
    if not class_batch.groups:
        return None
    with frozen(bundle.feature_params()):
        with Tape() as tape:
            loss = sum_terms([
                conditional_disc_loss(
                    discriminate_class(bundle, k, features(bundle, group.source_x)),
                    discriminate_class(bundle, k, features(bundle, group.target_x)),
                    k,
                )
                for k, group in sorted(class_batch.groups.items())
            ])
        backward(tape, loss)
    adam_step([p for k in class_batch.classes for p in bundle.c[k].parameters()], state.cfg.lr)
    return loss.item()


def _classification_term(state: TrainState, batch: MiniBatch):
    bundle, mode = state.bundle, state.mode
    use_target = (
        state.cfg.target_labels_in_ce
        or mode in (TrainingMode.target_only, TrainingMode.source_target)
    ) and len(batch.labeled_target_y) > 0
    src_logits = classify(bundle, features(bundle, batch.source_x)) if mode.uses_source_ce else None
    tgt_logits = classify(bundle, features(bundle, batch.labeled_target_x)) if use_target else None
    return supervised_ce_loss(
        src_logits, batch.source_y,
        tgt_logits, batch.labeled_target_y if use_target else None,
    )


def _generator_step(state: TrainState, batch: MiniBatch, class_batch: Optional[ClassBatch], record: dict) -> float:
    bundle, mode, cfg = state.bundle, state.mode, state.cfg
    terms = LossTerms()
    with frozen(bundle.domain_params() + bundle.class_disc_params()):
        with Tape() as tape:
            record["term"] = "classification"
            terms.classification = _classification_term(state, batch)
            if mode.uses_marginal:
                record["term"] = "marginal_gen"
                terms.marginal = marginal_gen_loss(discriminate_domain(bundle, features(bundle, batch.target_x)))
            if mode.uses_conditional and class_batch is not None and class_batch.groups:
                record["term"] = "conditional_gen"
                terms.conditional = sum_terms([
                    conditional_gen_loss(discriminate_class(bundle, k, features(bundle, group.target_x)), k)
                    for k, group in sorted(class_batch.groups.items())
                ])
            if mode.uses_triplet:
                record["term"] = "triplet"
                pool = batch.triplet_pool()
                terms.triplet = triplet_distribution_loss(features(bundle, pool.x), pool.y, cfg.triplet)
            record["term"] = "total"
            total = total_dirl_loss(terms, cfg.weights)
        backward(tape, total)
    adam_step(bundle.feature_params() + bundle.classifier_params(), cfg.lr)
    record.update(
        classification=_item(terms.classification),
        marginal_gen=_item(terms.marginal),
        conditional_gen=_item(terms.conditional),
        triplet=_item(terms.triplet),
    )
    return total.item()


def train_step(state: TrainState, batch: MiniBatch, class_batch: Optional[ClassBatch] = None) -> StepRecord:
    """
    One alternation: D on the domain loss with g frozen, the C_k bank on the
    per-class domain losses with g frozen, then g and f on the weighted total
    with every discriminator frozen. Terms the mode excludes are never computed.
    """
    state.iteration += 1
    mode = state.mode
    record = {"term": "marginal_disc"}
    try:
        marginal_disc = _domain_step(state, batch) if mode.uses_marginal else None
        record["term"] = "conditional_disc"
        conditional_disc = _class_step(state, class_batch) if mode.uses_conditional and class_batch else None
        total = _generator_step(state, batch, class_batch, record)
    except (NonFiniteError, DegenerateFeatureError) as exc:
        raise _abort(state, record["term"], exc) from exc

    return StepRecord(
        iteration=state.iteration,
        classification=record["classification"],
        marginal_gen=record["marginal_gen"],
        conditional_gen=record["conditional_gen"],
        triplet=record["triplet"],
        marginal_disc=marginal_disc,
        conditional_disc=conditional_disc,
        total=total,
        skipped_classes=list(class_batch.skipped) if class_batch is not None else [],
    )


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _pseudo_due(state: TrainState) -> bool:
    pseudo = state.cfg.pseudo
    since = state.iteration - pseudo.warmup_iterations
    return state.uses_pseudo and since >= 0 and since % pseudo.refresh_every == 0


def window_loss(steps: list) -> float:
    """Mean generator total over one eval window of step records."""
    return float(np.mean([step.total for step in steps]))


def _plateaued(history: list, iteration: int, cfg: TrainConfig) -> bool:
    """
    True once the windowed generator loss has gone a full patience span
    without beating its earlier best by more than min_delta.

    history holds (iteration, window loss) pairs, one per eval point.
    """
    if cfg.early_stop_patience is None:
        return False
    earliest = cfg.early_stop_min_iterations
    if cfg.pseudo.enabled:
        # the pseudo-labeled regime gets a full patience window of its own
        earliest = max(earliest, cfg.pseudo.warmup_iterations + cfg.early_stop_patience)
    if iteration < earliest:
        return False
    cutoff = iteration - cfg.early_stop_patience
    before = [loss for at, loss in history if at <= cutoff]
    recent = [loss for at, loss in history if at > cutoff]
    if not before or not recent:
        return False
    return min(recent) >= min(before) - cfg.early_stop_min_delta


def run_training(
    datasets: ScenarioData,
    cfg: TrainConfig,
    probe_cfg: Optional[ProbeConfig] = None,
    checkpoint_dir: Optional[Path] = None,
    on_snapshot: Optional[Callable[[EvalSnapshot], None]] = None,
    progress: bool = False,
    run_id: str = "",
) -> tuple:
    """
    Train a fresh bundle on the given datasets.

    The target training set keeps k_shot labels per class (seeded by
    cfg.seed); accuracy, recall and silhouette are measured on the target
    test set every eval_every iterations, and the probes run on the final
    snapshot (or on every snapshot with probe_every_eval). Early stopping
    only reads the training loss, never the target test labels.

    Args:
        datasets: source, target_train, target_test
        cfg: training schedule
        probe_cfg: discrepancy probe settings
        checkpoint_dir: where eval-time checkpoints go, if anywhere
        on_snapshot: called with every snapshot as it is taken
        progress: show a progress bar

    Returns:
        (ModelBundle, RunReport)
    """
    mode = TrainingMode(cfg.mode)
    target = select_labeled_target(datasets.target_train, cfg.k_shot, seed=cfg.seed)
    state = init_state(datasets.source, target, cfg)
    report = RunReport(run_id=run_id, mode=mode.value)
    snapshots = []
    loss_history, window_start = [], 0
    last_pool_size, last_precision = 0, None

    def snapshot(with_probes: bool) -> EvalSnapshot:
        return evaluate_snapshot(
            state.bundle, datasets.source, datasets.target_test, state.iteration,
            probe_cfg, run_probes=with_probes,
            pseudo_pool_size=last_pool_size, pseudo_precision=last_precision,
        )

    logger.info("training mode=%s for %d iterations (k_shot=%d)", mode.value, cfg.iterations, cfg.k_shot)
    for _ in tqdm(range(cfg.iterations), desc=mode.value, disable=not progress, leave=False):
        if _pseudo_due(state):
            state.pseudo_pool = assign_pseudo_labels(state.bundle, target, cfg.pseudo)
            last_pool_size, last_precision = len(state.pseudo_pool), state.pseudo_pool.precision(target)
            logger.info("pseudo-labels at iteration %d: %s (precision %s)",
                        state.iteration, state.pseudo_pool.class_sizes(), last_precision)

        batch, class_batch = draw_batches(state)
        report.steps.append(train_step(state, batch, class_batch))

        if state.iteration % cfg.eval_every == 0 or state.iteration == cfg.iterations:
            snap = snapshot(cfg.probe_every_eval or state.iteration == cfg.iterations)
            snapshots.append(snap)
            loss_history.append((state.iteration, window_loss(report.steps[window_start:])))
            window_start = len(report.steps)
            if on_snapshot is not None:
                on_snapshot(snap)
            if checkpoint_dir is not None and cfg.checkpoint_every_eval:
                save_checkpoint(state.bundle, Path(checkpoint_dir) / f"iter_{state.iteration:06d}.npz",
                                state.iteration)
            if _plateaued(loss_history, state.iteration, cfg) and state.iteration < cfg.iterations:
                logger.warning("early stop at iteration %d: generator loss not improving over %d iterations",
                               state.iteration, cfg.early_stop_patience)
                report.stopped_early = True
                break

    if snapshots and snapshots[-1].iteration == state.iteration and snapshots[-1].marginal_probe is not None:
        final = snapshots[-1]
    else:
        final = snapshot(True)
        if snapshots and snapshots[-1].iteration == state.iteration:
            snapshots[-1] = final
        else:
            snapshots.append(final)
        if on_snapshot is not None:
            on_snapshot(final)

    report.snapshots = snapshots
    report.iterations_run = state.iteration
    logger.info("finished %s: target accuracy %.3f", mode.value, final.target_accuracy)
    return state.bundle, report
