from pathlib import Path

import pytest
from pydantic import ValidationError

from cli.commands import load_experiment_config
from schemas.config import ExperimentConfig, GridConfig, ScenarioConfig, TrainConfig, TrainingMode
from schemas.report import EvalSnapshot, RunReport, StepRecord


class TestConfig:
    def test_defaults_follow_the_benchmark(self):
        cfg = ExperimentConfig()
        assert cfg.train.batch_size == 80
        assert cfg.train.lr == 1e-3
        assert cfg.train.iterations == 10000
        assert cfg.train.weights.triplet == 1.0
        assert cfg.scenario.num_classes == 2
        assert cfg.scenario.input_dim == 2

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate({"train": {"learning_rate": 0.1}})

    def test_odd_batch(self):
        with pytest.raises(ValidationError):
            TrainConfig(batch_size=81)

    def test_negative_weight(self):
        with pytest.raises(ValidationError):
            TrainConfig(weights={"marginal": -0.5})

    def test_pseudo_warmup_beyond_run(self):
        with pytest.raises(ValidationError):
            TrainConfig(iterations=100, pseudo={"enabled": True, "warmup_iterations": 100})

    def test_target_only_needs_labels(self):
        with pytest.raises(ValidationError):
            TrainConfig(mode="target_only", k_shot=0)

    def test_mismatched_class_counts(self):
        with pytest.raises(ValidationError):
            ScenarioConfig(target_means=[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])

    def test_grid_bounds_ordered(self):
        with pytest.raises(ValidationError):
            GridConfig(bounds=(1.0, -1.0, 0.0, 1.0))

    def test_class_batch_default(self):
        assert TrainConfig(batch_size=80).class_batch_size(2) == 20
        assert TrainConfig(batch_size=80, class_batch_per_class=7).class_batch_size(2) == 7

    def test_overrides(self):
        cfg = ExperimentConfig().with_overrides(seed=4, mode="source_only", output_dir="elsewhere")
        assert cfg.scenario.seed == cfg.train.seed == 4
        assert cfg.train.mode is TrainingMode.source_only
        assert cfg.output_dir == "elsewhere"

    def test_resolved_dump_reproduces_config(self):
        cfg = ExperimentConfig().with_overrides(seed=9)
        assert ExperimentConfig.model_validate(cfg.resolved()) == cfg

    def test_run_name_is_a_plain_name(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(run_name="../escape")

    @pytest.mark.parametrize("mode, marginal, conditional, triplet", [
        ("source_only", False, False, False),
        ("marginal_only", True, False, False),
        ("triplet_only", False, False, True),
        ("dirl", True, True, True),
    ])
    def test_mode_terms(self, mode, marginal, conditional, triplet):
        m = TrainingMode(mode)
        assert (m.uses_marginal, m.uses_conditional, m.uses_triplet) == (marginal, conditional, triplet)


class TestReport:
    def test_recall_range(self):
        with pytest.raises(ValidationError):
            EvalSnapshot(iteration=1, target_accuracy=0.5, source_accuracy=0.5, target_recall=[1.5])

    def test_snapshots_sorted(self):
        snaps = [EvalSnapshot(iteration=i, target_accuracy=0.5, source_accuracy=0.5) for i in (20, 10)]
        with pytest.raises(ValidationError):
            RunReport(run_id="r", mode="dirl", snapshots=snaps)

    def test_trace_skips_missing_terms(self):
        report = RunReport(run_id="r", mode="source_only", steps=[
            StepRecord(iteration=1, classification=0.7, total=0.7),
            StepRecord(iteration=2, classification=0.6, total=0.6),
        ])
        assert report.trace("total") == [0.7, 0.6]
        assert report.trace("marginal_gen") == []

    def test_final_metrics(self):
        snap = EvalSnapshot(iteration=3, target_accuracy=0.9, source_accuracy=1.0, target_recall=[0.8, None])
        report = RunReport(run_id="r", mode="dirl", snapshots=[snap])
        metrics = report.final_metrics()
        assert "iteration" not in metrics
        assert metrics["target_accuracy"] == 0.9
        assert snap.recall_of(1) is None


@pytest.mark.parametrize("path", sorted(Path(__file__).resolve().parent.parent.joinpath("configs").glob("*.yaml")),
                         ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    cfg = load_experiment_config(path)
    assert cfg.run_name
    assert cfg.train.batch_size % 2 == 0
