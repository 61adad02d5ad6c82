"""
Dataset Files
CSV import/export with header x0,x1,...,label,domain,is_labeled and content checksums
"""

import hashlib
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from core.errors import ContractError
from data.synthetic import UNLABELED, Domain, DomainDataset

FLOAT_FORMAT = "%.17g"


def dataset_frame(dataset: DomainDataset) -> pd.DataFrame:
    frame = pd.DataFrame(dataset.features, columns=[f"x{i}" for i in range(dataset.dim)])
    frame["label"] = dataset.labels
    frame["domain"] = dataset.domain.value
    frame["is_labeled"] = dataset.is_labeled.astype(int)
    return frame


def save_dataset(dataset: DomainDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(dataset).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def load_dataset(path, num_classes: Optional[int] = None, name: Optional[str] = None) -> DomainDataset:
    """Read a dataset CSV written by save_dataset."""
    path = Path(path)
    frame = pd.read_csv(path, float_precision="round_trip")
    feature_cols = sorted((c for c in frame.columns if c.startswith("x")), key=lambda c: int(c[1:]))
    missing = {"label", "domain", "is_labeled"} - set(frame.columns)
    if missing or not feature_cols:
        raise ContractError(f"{path}: missing columns {sorted(missing) or ['x0']}")

    labels = frame["label"].to_numpy(dtype=np.int64)
    flags = frame["is_labeled"].to_numpy(dtype=np.int64).astype(bool)
    if not np.array_equal(flags, labels != UNLABELED):
        raise ContractError(f"{path}: is_labeled disagrees with label column")
    domains = frame["domain"].unique()
    if len(domains) != 1:
        raise ContractError(f"{path}: expected a single domain, found {list(domains)}")

    if num_classes is None:
        num_classes = int(labels.max()) + 1 if flags.any() else 1
    return DomainDataset(
        features=frame[feature_cols].to_numpy(dtype=np.float64),
        labels=labels,
        domain=Domain(domains[0]),
        num_classes=num_classes,
        name=name or path.stem,
    )


def dataset_checksum(datasets: Iterable[DomainDataset]) -> str:
    """SHA-256 over features and visible labels of the given datasets."""
    digest = hashlib.sha256()
    for dataset in datasets:
        digest.update(dataset.name.encode())
        digest.update(np.ascontiguousarray(dataset.features).tobytes())
        digest.update(np.ascontiguousarray(dataset.labels).tobytes())
    return digest.hexdigest()
