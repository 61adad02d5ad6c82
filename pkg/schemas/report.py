# schemas/report.py

"""
Run records
Loss traces, evaluation snapshots and the run manifest
"""

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

TRACE_COLUMNS = (
    "classification",
    "marginal_gen",
    "conditional_gen",
    "triplet",
    "marginal_disc",
    "conditional_disc",
    "total",
)


class StepRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iteration: int = Field(ge=1)
    classification: Optional[float] = None
    marginal_gen: Optional[float] = None
    conditional_gen: Optional[float] = None
    triplet: Optional[float] = None
    marginal_disc: Optional[float] = None
    conditional_disc: Optional[float] = None
    total: float = 0.0
    skipped_classes: list[int] = Field(default_factory=list)


class EvalSnapshot(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iteration: int = Field(ge=0)
    target_accuracy: float = Field(ge=0, le=1)
    source_accuracy: float = Field(ge=0, le=1)
    target_recall: list[Optional[float]] = Field(default_factory=list)
    silhouette: Optional[float] = Field(None, ge=-1, le=1)
    silhouette_source: Optional[float] = Field(None, ge=-1, le=1)
    silhouette_target: Optional[float] = Field(None, ge=-1, le=1)
    marginal_probe: Optional[float] = Field(None, ge=0, le=1)
    conditional_probe: dict[str, Optional[float]] = Field(default_factory=dict)
    conditional_probe_mean: Optional[float] = Field(None, ge=0, le=1)
    pseudo_pool_size: int = 0
    pseudo_precision: Optional[float] = Field(None, ge=0, le=1)

    @field_validator("target_recall")
    @classmethod
    def _recall_range(cls, value):
        if any(r is not None and not 0.0 <= r <= 1.0 for r in value):
            raise ValueError(f"recall values must lie in [0, 1], got {value}")
        return value

    def recall_of(self, k: int) -> Optional[float]:
        return self.target_recall[k] if k < len(self.target_recall) else None


class RunReport(BaseModel):
    run_id: str
    mode: str
    steps: list[StepRecord] = Field(default_factory=list)
    snapshots: list[EvalSnapshot] = Field(default_factory=list)
    iterations_run: int = 0
    stopped_early: bool = False
    embeddings_path: Optional[str] = None

    @field_validator("snapshots")
    @classmethod
    def _sorted(cls, value):
        iterations = [s.iteration for s in value]
        if iterations != sorted(iterations):
            raise ValueError("snapshots must be sorted by iteration")
        return value

    @property
    def final(self) -> Optional[EvalSnapshot]:
        return self.snapshots[-1] if self.snapshots else None

    def trace(self, term: str) -> list:
        return [getattr(step, term) for step in self.steps if getattr(step, term) is not None]

    def final_metrics(self) -> dict:
        if self.final is None:
            return {}
        return self.final.model_dump(exclude={"iteration"})


class RunManifest(BaseModel):
    """Everything needed to reproduce a run and read its outcome."""
    run_id: str
    run_name: str
    status: str = "completed"
    config: dict
    dataset_checksum: str
    data_dir: Optional[str] = None
    iterations_run: int = 0
    stopped_early: bool = False
    final_metrics: dict = Field(default_factory=dict)
    files: dict[str, str] = Field(default_factory=dict)
