# schemas/config.py

"""
Configuration schemas
Every record rejects unknown keys and validates its invariants on creation
"""

from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SIMPLEX_TOLERANCE = 1e-12


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Scenario(str, Enum):
    base = "base"
    label_swap = "label_swap"
    label_shift = "label_shift"


class TrainingMode(str, Enum):
    source_only = "source_only"
    marginal_only = "marginal_only"
    triplet_only = "triplet_only"
    dirl = "dirl"
    target_only = "target_only"
    source_target = "source_target"

    @property
    def uses_marginal(self) -> bool:
        return self in (TrainingMode.marginal_only, TrainingMode.dirl)

    @property
    def uses_conditional(self) -> bool:
        return self is TrainingMode.dirl

    @property
    def uses_triplet(self) -> bool:
        return self in (TrainingMode.triplet_only, TrainingMode.dirl)

    @property
    def uses_source_ce(self) -> bool:
        return self is not TrainingMode.target_only


def _check_simplex(name: str, values: list) -> list:
    if any(v < 0 for v in values):
        raise ValueError(f"{name} has negative entries: {values}")
    if abs(sum(values) - 1.0) > SIMPLEX_TOLERANCE:
        raise ValueError(f"{name} must sum to 1, got {sum(values)!r}")
    return values


class ScenarioConfig(_Strict):
    """Generator constants for the two-Gaussian-per-domain benchmark."""
    scenario: Scenario = Scenario.base
    source_means: list[list[float]] = Field(default_factory=lambda: [[-2.5, -1.5], [-1.0, -1.0]])
    target_means: list[list[float]] = Field(default_factory=lambda: [[1.0, 1.0], [2.5, 1.5]])
    sigma_sq: float = Field(0.1, gt=0)
    w_scale: float = Field(0.25, ge=0)
    n_source: int = Field(1000, gt=0)
    n_target: int = Field(1000, gt=0)
    n_target_test: int = Field(100, gt=0)
    source_proportions: list[float] = Field(default_factory=lambda: [0.5, 0.5])
    target_proportions: list[float] = Field(default_factory=lambda: [0.5, 0.5])
    target_test_proportions: list[float] = Field(default_factory=lambda: [0.5, 0.5])
    label_shift_proportions: list[float] = Field(default_factory=lambda: [0.8, 0.2])
    seed: int = Field(0, ge=0, lt=2 ** 64)

    @field_validator("source_proportions", "target_proportions",
                     "target_test_proportions", "label_shift_proportions")
    @classmethod
    def _simplex(cls, value, info):
        return _check_simplex(info.field_name, value)

    @model_validator(mode="after")
    def _consistent(self):
        k = len(self.source_means)
        if k < 2:
            raise ValueError("at least two classes are required")
        if len(self.target_means) != k:
            raise ValueError(f"target_means has {len(self.target_means)} classes, source_means has {k}")
        dims = {len(m) for m in self.source_means + self.target_means}
        if len(dims) != 1:
            raise ValueError(f"all class means need the same dimension, got {sorted(dims)}")
        for name in ("source_proportions", "target_proportions",
                     "target_test_proportions", "label_shift_proportions"):
            if len(getattr(self, name)) != k:
                raise ValueError(f"{name} needs {k} entries")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.source_means)

    @property
    def input_dim(self) -> int:
        return len(self.source_means[0])


class LossWeights(_Strict):
    """Weights of the generator objective: λ1 classification, λ2 marginal, λ3 conditional, λ4 triplet."""
    classification: float = Field(1.0, ge=0, allow_inf_nan=False)
    marginal: float = Field(1.0, ge=0, allow_inf_nan=False)
    conditional: float = Field(1.0, ge=0, allow_inf_nan=False)
    triplet: float = Field(1.0, ge=0, allow_inf_nan=False)


class TripletConfig(_Strict):
    margin: float = Field(1.0, ge=0, allow_inf_nan=False)
    sigma_sq: float = Field(0.5, gt=0, allow_inf_nan=False)


class PseudoConfig(_Strict):
    enabled: bool = False
    warmup_iterations: int = Field(4000, ge=0)
    top_n_per_class: int = Field(50, ge=1)
    refresh_every: int = Field(500, ge=1)


class NetworkConfig(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [7, 7, 7])
    feature_dim: int = Field(7, gt=0)

    @field_validator("hidden")
    @classmethod
    def _positive(cls, value):
        if any(width <= 0 for width in value):
            raise ValueError(f"hidden widths must be positive, got {value}")
        return value


class ProbeConfig(_Strict):
    """Auxiliary domain classifier used to measure discrepancy."""
    hidden: list[int] = Field(default_factory=lambda: [7, 7, 7])
    steps: int = Field(2000, gt=0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(128, gt=0)
    holdout_fraction: float = Field(0.2, gt=0, lt=1)
    min_per_domain: int = Field(5, ge=2)
    seed: int = Field(0, ge=0)


class GridConfig(_Strict):
    bounds: tuple[float, float, float, float] = (-5.0, 5.0, -4.0, 4.0)
    resolution: int = Field(100, ge=2)

    @model_validator(mode="after")
    def _ordered(self):
        x_min, x_max, y_min, y_max = self.bounds
        if not (x_min < x_max and y_min < y_max):
            raise ValueError(f"grid bounds must be (x_min, x_max, y_min, y_max) with min < max, got {self.bounds}")
        return self


class TrainConfig(_Strict):
    """
    Training schedule; defaults follow the 2D benchmark at desk scale.

    The 60K-iteration schedule at lr 1e-4 is compressed into 10K iterations
    at lr 1e-3. Early stopping is opt-in and watches the generator loss.
    """
    mode: TrainingMode = TrainingMode.dirl
    weights: LossWeights = Field(default_factory=LossWeights)
    lr: float = Field(1e-3, gt=0)
    iterations: int = Field(10000, gt=0)
    batch_size: int = Field(80, gt=0)
    labeled_target_fraction: float = Field(0.25, ge=0, le=1)
    class_batch_per_class: Optional[int] = Field(None, gt=0)
    k_shot: int = Field(5, ge=0)
    target_labels_in_ce: bool = False
    pseudo: PseudoConfig = Field(default_factory=PseudoConfig)
    triplet: TripletConfig = Field(default_factory=TripletConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    eval_every: int = Field(500, gt=0)
    probe_every_eval: bool = False
    early_stop_patience: Optional[int] = Field(None, gt=0)
    early_stop_min_delta: float = Field(1e-3, ge=0)
    early_stop_min_iterations: int = Field(2000, ge=0)
    checkpoint_every_eval: bool = True

    @model_validator(mode="after")
    def _consistent(self):
        if self.batch_size % 2:
            raise ValueError(f"batch_size must be even, got {self.batch_size}")
        if self.pseudo.enabled and self.pseudo.warmup_iterations >= self.iterations:
            raise ValueError(
                f"pseudo warmup ({self.pseudo.warmup_iterations}) must be below iterations ({self.iterations})"
            )
        if self.mode is TrainingMode.target_only and (self.k_shot == 0 or self.labeled_target_fraction == 0):
            raise ValueError("target_only mode needs k_shot > 0 and labeled_target_fraction > 0")
        return self

    def class_batch_size(self, num_classes: int) -> int:
        if self.class_batch_per_class is not None:
            return self.class_batch_per_class
        return max(1, self.batch_size // (2 * num_classes))


class ExperimentConfig(_Strict):
    """Everything one run needs; a resolved dump reproduces the run."""
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    compare_modes: list[TrainingMode] = Field(
        default_factory=lambda: [
            TrainingMode.source_only,
            TrainingMode.marginal_only,
            TrainingMode.triplet_only,
            TrainingMode.dirl,
        ]
    )
    output_dir: str = "runs"
    run_name: str = "dirl"

    @field_validator("run_name")
    @classmethod
    def _safe_name(cls, value):
        if not value or "/" in value or value in (".", ".."):
            raise ValueError(f"run_name must be a plain directory name, got {value!r}")
        return value

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def with_overrides(
        self,
        seed: Optional[int] = None,
        mode: Optional[str] = None,
        output_dir: Optional[str] = None,
    ) -> "ExperimentConfig":
        data = self.resolved()
        if seed is not None:
            data["scenario"]["seed"] = seed
            data["train"]["seed"] = seed
        if mode is not None:
            data["train"]["mode"] = mode
        if output_dir is not None:
            data["output_dir"] = output_dir
        return ExperimentConfig.model_validate(data)
