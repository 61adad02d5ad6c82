import numpy as np
import numpy.testing as npt
import pytest

from core.errors import TrainingAborted
from core import trainer
from core.trainer import (
    PseudoLabelPool,
    _plateaued,
    _pseudo_due,
    assign_pseudo_labels,
    draw_batches,
    init_state,
    run_training,
    select_top_pseudo_labels,
    spawn_streams,
    train_step,
    window_loss,
)
from data.synthetic import select_labeled_target
from schemas.config import LossWeights, PseudoConfig, TrainConfig
from schemas.report import EvalSnapshot, StepRecord


def _copy(params):
    return [p.values.copy() for p in params]


@pytest.fixture
def make_state(small_data):
    def build(**overrides):
        cfg = TrainConfig(**{"iterations": 50, "early_stop_patience": None, "k_shot": 5, **overrides})
        target = select_labeled_target(small_data.target_train, cfg.k_shot, seed=cfg.seed)
        return init_state(small_data.source, target, cfg)
    return build


class TestPseudoLabels:
    def test_keeps_most_confident_per_class(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.6, 0.4], [0.45, 0.55]])
        pool = select_top_pseudo_labels(probs, [10, 11, 12, 13, 14], top_n=2)
        assert [e.index for e in pool.entries[0]] == [10, 12]
        assert [e.index for e in pool.entries[1]] == [11, 14]
        assert pool.entries[0][0].confidence == pytest.approx(0.9)

    def test_short_class_is_truncated(self):
        probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7]])
        pool = select_top_pseudo_labels(probs, [0, 1, 2], top_n=5)
        assert pool.class_sizes() == {0: 2, 1: 1}
        assert len(pool) == 3

    def test_ties_go_to_lower_index(self):
        probs = np.array([[0.7, 0.3], [0.7, 0.3], [0.7, 0.3]])
        pool = select_top_pseudo_labels(probs, [8, 3, 5], top_n=2)
        assert [e.index for e in pool.entries[0]] == [3, 5]

    def test_pool_views(self, small_data):
        target = select_labeled_target(small_data.target_train, 5, seed=0)
        candidates = target.unlabeled_indices()[:4]
        probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.4, 0.6]])
        pool = select_top_pseudo_labels(probs, candidates, top_n=10)
        labeled = pool.as_labeled_pool(target)
        npt.assert_array_equal(labeled.x, target.features[pool.indices()])
        npt.assert_array_equal(labeled.y, [0, 0, 1, 1])
        expected = np.mean(target.true_labels[pool.indices()] == pool.labels())
        assert pool.precision(target) == pytest.approx(expected)

    def test_assign_scores_only_unlabeled_rows(self, small_data, bundle):
        target = select_labeled_target(small_data.target_train, 5, seed=0)
        pool = assign_pseudo_labels(bundle, target, PseudoConfig(enabled=True, top_n_per_class=20))
        assert set(pool.indices()).isdisjoint(set(target.labeled_indices()))
        assert all(size <= 20 for size in pool.class_sizes().values())

    def test_empty_pool(self, small_data):
        pool = PseudoLabelPool()
        assert len(pool) == 0
        assert pool.precision(small_data.target_train) is None
        assert len(pool.as_labeled_pool(small_data.target_train)) == 0


class TestSchedule:
    def test_source_only_never_touches_discriminators(self, make_state):
        state = make_state(mode="source_only")
        before = _copy(state.bundle.domain_params() + state.bundle.class_disc_params())
        g_before = _copy(state.bundle.feature_params())
        for _ in range(3):
            record = train_step(state, *draw_batches(state))
        after = _copy(state.bundle.domain_params() + state.bundle.class_disc_params())
        for a, b in zip(before, after):
            npt.assert_array_equal(a, b)
        assert not all(np.array_equal(a, b) for a, b in zip(g_before, _copy(state.bundle.feature_params())))
        assert record.marginal_disc is None and record.triplet is None

    def test_dirl_updates_every_network(self, make_state):
        state = make_state(mode="dirl")
        before = {name: p.values.copy() for name, p in state.bundle.named_parameters().items()}
        record = train_step(state, *draw_batches(state))
        for head in ("g", "f", "d", "c0", "c1"):
            changed = [name for name, p in state.bundle.named_parameters().items()
                       if name.startswith(f"{head}.") and not np.array_equal(before[name], p.values)]
            assert changed, head
        assert None not in (record.marginal_disc, record.conditional_disc, record.conditional_gen, record.triplet)
        assert record.skipped_classes == []

    def test_marginal_only_skips_class_heads(self, make_state):
        state = make_state(mode="marginal_only")
        c_before = _copy(state.bundle.class_disc_params())
        batch, class_batch = draw_batches(state)
        assert class_batch is None
        record = train_step(state, batch, class_batch)
        for a, b in zip(c_before, _copy(state.bundle.class_disc_params())):
            npt.assert_array_equal(a, b)
        assert record.marginal_gen is not None and record.conditional_gen is None

    def test_generator_step_leaves_discriminator_grads_clear(self, make_state):
        state = make_state(mode="dirl")
        train_step(state, *draw_batches(state))
        for p in state.bundle.parameters():
            assert not p.grad.any()

    def test_streams_are_independent(self):
        a, b = spawn_streams(3), spawn_streams(3)
        npt.assert_array_equal(a["batch"].integers(0, 100, 5), b["batch"].integers(0, 100, 5))
        c = spawn_streams(3)
        assert not np.array_equal(c["batch"].integers(0, 100, 5), c["classwise"].integers(0, 100, 5))

    def test_non_finite_parameters_abort_with_diagnostics(self, make_state):
        state = make_state(mode="dirl")
        state.bundle.g.layers[0].weight.values[0, 0] = np.nan
        with pytest.raises(TrainingAborted) as info:
            train_step(state, *draw_batches(state))
        snapshot = info.value.snapshot
        assert snapshot.iteration == 1
        assert snapshot.term == "marginal_disc"
        assert "g.0.weight" in snapshot.to_dict()["parameter_norms"]


class TestPseudoGate:
    def test_due_after_warmup_on_refresh(self, make_state):
        state = make_state(mode="dirl", pseudo=PseudoConfig(enabled=True, warmup_iterations=10, refresh_every=5))
        due = []
        for it in range(25):
            state.iteration = it
            due.append(_pseudo_due(state))
        assert [it for it, flag in enumerate(due) if flag] == [10, 15, 20]

    def test_never_due_without_conditional_or_triplet_terms(self, make_state):
        state = make_state(mode="marginal_only", pseudo=PseudoConfig(enabled=True, warmup_iterations=0))
        state.iteration = 0
        assert not _pseudo_due(state)


class TestEarlyStop:
    cfg = TrainConfig(early_stop_patience=500, early_stop_min_delta=1e-3, early_stop_min_iterations=2000)

    def test_flat_loss_stops(self):
        history = [(it, 1.2) for it in range(500, 3001, 500)]
        assert _plateaued(history, 3000, self.cfg)

    def test_improving_loss_continues(self):
        history = [(it, 2.0 - it / 10000) for it in range(500, 3001, 500)]
        assert not _plateaued(history, 3000, self.cfg)

    def test_noise_above_the_best_stops(self):
        history = [(500, 2.0), (1000, 1.1), (1500, 1.3), (2000, 1.2), (2500, 1.25)]
        assert _plateaued(history, 2500, self.cfg)

    def test_not_before_minimum(self):
        history = [(it, 1.2) for it in range(500, 1501, 500)]
        assert not _plateaued(history, 1500, self.cfg)

    def test_disabled(self):
        cfg = TrainConfig(early_stop_patience=None)
        history = [(it, 1.2) for it in range(500, 3001, 500)]
        assert not _plateaued(history, 3000, cfg)

    def test_off_by_default(self):
        assert TrainConfig().early_stop_patience is None

    def test_window_loss(self):
        steps = [StepRecord(iteration=i, classification=0.5, total=t) for i, t in enumerate((1.0, 2.0, 3.0), 1)]
        assert window_loss(steps) == 2.0


def _flat_at_chance(bundle, source, target_test, iteration, *args, **kwargs):
    return EvalSnapshot(iteration=iteration, target_accuracy=0.5, source_accuracy=0.5)


class TestEarlyStopInTheLoop:
    cfg = TrainConfig(mode="source_only", iterations=60, eval_every=10, k_shot=5,
                      early_stop_patience=20, early_stop_min_delta=0.0, early_stop_min_iterations=0)

    def test_chance_accuracy_does_not_stop_an_improving_run(self, small_data, quick_probe_cfg, monkeypatch):
        falling = iter(np.linspace(2.0, 1.0, 10))
        monkeypatch.setattr(trainer, "evaluate_snapshot", _flat_at_chance)
        monkeypatch.setattr(trainer, "window_loss", lambda steps: float(next(falling)))
        _, report = run_training(small_data, self.cfg, quick_probe_cfg)
        assert report.iterations_run == 60
        assert not report.stopped_early

    def test_stalled_loss_stops(self, small_data, quick_probe_cfg, monkeypatch):
        monkeypatch.setattr(trainer, "evaluate_snapshot", _flat_at_chance)
        monkeypatch.setattr(trainer, "window_loss", lambda steps: 1.0)
        _, report = run_training(small_data, self.cfg, quick_probe_cfg)
        assert report.stopped_early
        assert report.iterations_run == 30
        assert report.final.iteration == 30


class TestRunTraining:
    def test_same_seed_same_trace(self, small_data, quick_train_cfg, quick_probe_cfg):
        _, first = run_training(small_data, quick_train_cfg, quick_probe_cfg)
        _, second = run_training(small_data, quick_train_cfg, quick_probe_cfg)
        assert [s.model_dump() for s in first.steps] == [s.model_dump() for s in second.steps]
        assert first.final.target_accuracy == second.final.target_accuracy

    def test_zero_marginal_weight_matches_source_only(self, small_data, quick_probe_cfg):
        base = dict(iterations=15, eval_every=15, early_stop_patience=None, k_shot=5)
        source_only = TrainConfig(mode="source_only", **base)
        silenced = TrainConfig(mode="marginal_only", weights=LossWeights(marginal=0.0), **base)
        bundle_a, report_a = run_training(small_data, source_only, quick_probe_cfg)
        bundle_b, report_b = run_training(small_data, silenced, quick_probe_cfg)
        assert report_a.trace("total") == report_b.trace("total")
        for p, q in zip(bundle_a.feature_params() + bundle_a.classifier_params(),
                        bundle_b.feature_params() + bundle_b.classifier_params()):
            npt.assert_array_equal(p.values, q.values)

    def test_single_iteration(self, small_data, quick_probe_cfg):
        cfg = TrainConfig(iterations=1, eval_every=500, early_stop_patience=None, k_shot=5)
        _, report = run_training(small_data, cfg, quick_probe_cfg)
        assert report.iterations_run == 1
        assert len(report.steps) == 1
        assert [s.iteration for s in report.snapshots] == [1]
        assert report.final.marginal_probe is not None

    def test_snapshot_cadence(self, small_data, quick_probe_cfg, tmp_path):
        cfg = TrainConfig(mode="source_only", iterations=1000, eval_every=100, early_stop_patience=None, k_shot=5)
        seen = []
        _, report = run_training(small_data, cfg, quick_probe_cfg, checkpoint_dir=tmp_path, on_snapshot=seen.append)
        assert [s.iteration for s in report.snapshots] == list(range(100, 1001, 100))
        assert len(seen) == 10
        assert report.snapshots[0].marginal_probe is None
        assert report.final.marginal_probe is not None
        assert len(list(tmp_path.glob("iter_*.npz"))) == 10

    def test_pseudo_labels_reach_the_report(self, small_data, quick_probe_cfg):
        cfg = TrainConfig(
            iterations=12, eval_every=6, early_stop_patience=None, k_shot=5,
            pseudo=PseudoConfig(enabled=True, warmup_iterations=5, top_n_per_class=10, refresh_every=5),
        )
        _, report = run_training(small_data, cfg, quick_probe_cfg)
        assert report.final.pseudo_pool_size > 0
        assert report.final.pseudo_precision is not None

    def test_zero_shot_marginal_run(self, small_data, quick_probe_cfg):
        cfg = TrainConfig(mode="marginal_only", iterations=5, eval_every=5, early_stop_patience=None, k_shot=0)
        _, report = run_training(small_data, cfg, quick_probe_cfg)
        assert report.iterations_run == 5


class TestBaselineModes:
    def test_target_only_ignores_source_labels(self, make_state):
        state = make_state(mode="target_only")
        batch, class_batch = draw_batches(state)
        record = train_step(state, batch, class_batch)
        assert class_batch is None
        assert record.marginal_disc is None and record.triplet is None
        assert record.classification == pytest.approx(record.total)

    def test_source_target_adds_labeled_target_term(self, make_state):
        plain = make_state(mode="source_only")
        mixed = make_state(mode="source_target")
        batch, _ = draw_batches(plain)
        plain_record = train_step(plain, batch)
        mixed_record = train_step(mixed, batch)
        assert mixed_record.classification > plain_record.classification

    def test_target_labels_flag_extends_cross_entropy(self, make_state):
        plain = make_state(mode="dirl")
        flagged = make_state(mode="dirl", target_labels_in_ce=True)
        batch, class_batch = draw_batches(plain)
        assert train_step(flagged, batch, class_batch).classification > \
            train_step(plain, batch, class_batch).classification


def test_no_early_stop_before_pseudo_labels_settle():
    cfg = TrainConfig(iterations=10000, early_stop_patience=500, pseudo=PseudoConfig(enabled=True))
    flat = [(it, 1.0) for it in range(500, 5001, 500)]
    assert not _plateaued(flat, 4000, cfg)
    assert _plateaued(flat, 4500, cfg)
