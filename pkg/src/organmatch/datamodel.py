"""Canonical dataset representation, CSV ingestion, normalization, splitting.

A :class:`Dataset` stores recipient features, donor features and factual
outcomes as dense arrays, plus optional synthetic ground truth (the full
potential-outcome vector, untreated survival, and true type labels).
Outcomes are survival times in days and are never normalized; feature
normalization statistics are fit on the training split only.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import InsufficientDataError, rng_stream


class IngestionError(ValueError):
    pass


@dataclass
class MatchRecord:
    recipient: np.ndarray
    donor: np.ndarray
    outcome: float
    true_potentials: np.ndarray | None = None
    untreated_survival: float | None = None
    true_recipient_type: int | None = None
    true_donor_type: int | None = None


@dataclass
class Normalization:
    recipient_mean: np.ndarray
    recipient_scale: np.ndarray
    donor_mean: np.ndarray
    donor_scale: np.ndarray


@dataclass
class Dataset:
    recipients: np.ndarray  # (n, d_r)
    donors: np.ndarray  # (n, d_o)
    outcomes: np.ndarray  # (n,)
    recipient_names: list[str]
    donor_names: list[str]
    true_potentials: np.ndarray | None = None  # (n, K)
    untreated_survival: np.ndarray | None = None  # (n,)
    true_recipient_type: np.ndarray | None = None  # (n,) 1-based
    true_donor_type: np.ndarray | None = None  # (n,) 1-based
    normalization: Normalization | None = None

    def __post_init__(self):
        n = len(self.outcomes)
        if self.recipients.shape[0] != n or self.donors.shape[0] != n:
            raise IngestionError("feature blocks and outcomes disagree in length")
        if not np.all(np.isfinite(self.outcomes)):
            raise IngestionError("non-finite outcome")

    def __len__(self) -> int:
        return len(self.outcomes)

    @property
    def d_r(self) -> int:
        return self.recipients.shape[1]

    @property
    def d_o(self) -> int:
        return self.donors.shape[1]

    @property
    def has_ground_truth(self) -> bool:
        return self.true_potentials is not None and self.untreated_survival is not None

    def record(self, i: int) -> MatchRecord:
        return MatchRecord(
            recipient=self.recipients[i],
            donor=self.donors[i],
            outcome=float(self.outcomes[i]),
            true_potentials=None if self.true_potentials is None else self.true_potentials[i],
            untreated_survival=(None if self.untreated_survival is None
                                else float(self.untreated_survival[i])),
            true_recipient_type=(None if self.true_recipient_type is None
                                 else int(self.true_recipient_type[i])),
            true_donor_type=(None if self.true_donor_type is None
                             else int(self.true_donor_type[i])),
        )

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            recipients=self.recipients[idx],
            donors=self.donors[idx],
            outcomes=self.outcomes[idx],
            recipient_names=self.recipient_names,
            donor_names=self.donor_names,
            true_potentials=None if self.true_potentials is None else self.true_potentials[idx],
            untreated_survival=(None if self.untreated_survival is None
                                else self.untreated_survival[idx]),
            true_recipient_type=(None if self.true_recipient_type is None
                                 else self.true_recipient_type[idx]),
            true_donor_type=(None if self.true_donor_type is None
                             else self.true_donor_type[idx]),
            normalization=self.normalization,
        )


@dataclass
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray


def split(dataset: Dataset, fraction: float = 0.9, seed: int = 0) -> SplitIndices:
    """Deterministic uniform 90/10 train/validation split."""
    n = len(dataset)
    if n < 10:
        raise InsufficientDataError(f"need at least 10 records, got {n}")
    rng = rng_stream(seed, "datamodel", "split")
    perm = rng.permutation(n)
    n_train = int(round(fraction * n))
    return SplitIndices(train=np.sort(perm[:n_train]), validation=np.sort(perm[n_train:]))


def _standardize(block: np.ndarray, train_idx: np.ndarray):
    mean = block[train_idx].mean(axis=0)
    scale = block[train_idx].std(axis=0, ddof=0)
    zero = scale < 1e-12
    if np.any(zero):
        warnings.warn("zero-variance column; scale set to 1")
        scale = np.where(zero, 1.0, scale)
    return mean, scale


def normalize_fit_transform(dataset: Dataset, indices: SplitIndices) -> Dataset:
    """Standardize features with statistics computed on the training split only.

    Outcomes are left in raw day units.
    """
    r_mean, r_scale = _standardize(dataset.recipients, indices.train)
    d_mean, d_scale = _standardize(dataset.donors, indices.train)
    norm = Normalization(r_mean, r_scale, d_mean, d_scale)
    out = Dataset(
        recipients=(dataset.recipients - r_mean) / r_scale,
        donors=(dataset.donors - d_mean) / d_scale,
        outcomes=dataset.outcomes.copy(),
        recipient_names=dataset.recipient_names,
        donor_names=dataset.donor_names,
        true_potentials=dataset.true_potentials,
        untreated_survival=dataset.untreated_survival,
        true_recipient_type=dataset.true_recipient_type,
        true_donor_type=dataset.true_donor_type,
        normalization=norm,
    )
    return out


def denormalize(dataset: Dataset) -> Dataset:
    if dataset.normalization is None:
        raise ValueError("dataset is not normalized")
    norm = dataset.normalization
    out = Dataset(
        recipients=dataset.recipients * norm.recipient_scale + norm.recipient_mean,
        donors=dataset.donors * norm.donor_scale + norm.donor_mean,
        outcomes=dataset.outcomes.copy(),
        recipient_names=dataset.recipient_names,
        donor_names=dataset.donor_names,
        true_potentials=dataset.true_potentials,
        untreated_survival=dataset.untreated_survival,
        true_recipient_type=dataset.true_recipient_type,
        true_donor_type=dataset.true_donor_type,
        normalization=None,
    )
    return out


def normalization_to_dict(norm: Normalization) -> dict:
    return {
        "recipient_mean": norm.recipient_mean.tolist(),
        "recipient_scale": norm.recipient_scale.tolist(),
        "donor_mean": norm.donor_mean.tolist(),
        "donor_scale": norm.donor_scale.tolist(),
    }


def normalization_from_dict(doc: dict) -> Normalization:
    return Normalization(
        recipient_mean=np.asarray(doc["recipient_mean"], dtype=float),
        recipient_scale=np.asarray(doc["recipient_scale"], dtype=float),
        donor_mean=np.asarray(doc["donor_mean"], dtype=float),
        donor_scale=np.asarray(doc["donor_scale"], dtype=float),
    )


def apply_normalization(dataset: Dataset, norm: Normalization) -> Dataset:
    """Standardize a raw dataset with previously fitted statistics."""
    return Dataset(
        recipients=(dataset.recipients - norm.recipient_mean) / norm.recipient_scale,
        donors=(dataset.donors - norm.donor_mean) / norm.donor_scale,
        outcomes=dataset.outcomes.copy(),
        recipient_names=dataset.recipient_names,
        donor_names=dataset.donor_names,
        true_potentials=dataset.true_potentials,
        untreated_survival=dataset.untreated_survival,
        true_recipient_type=dataset.true_recipient_type,
        true_donor_type=dataset.true_donor_type,
        normalization=norm,
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


@dataclass
class SchemaConfig:
    """Declares which CSV columns hold recipient/donor features and the outcome.

    ``categorical`` maps a column name to its explicit category list; such
    columns are one-hot encoded (no data-driven category discovery). Missing
    numeric values are imputed with the column mean of the remaining rows and
    flagged with a companion ``<col>__missing`` indicator column.
    """

    recipient_columns: list[str]
    donor_columns: list[str]
    outcome_column: str
    categorical: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def from_json(cls, path) -> "SchemaConfig":
        doc = json.loads(Path(path).read_text())
        return cls(
            recipient_columns=doc["recipient_columns"],
            donor_columns=doc["donor_columns"],
            outcome_column=doc["outcome_column"],
            categorical=doc.get("categorical", {}),
        )


def _encode_block(rows: list[dict], columns: list[str], schema: SchemaConfig):
    names: list[str] = []
    feats: list[np.ndarray] = []
    for col in columns:
        raw = [r[col] for r in rows]
        if col in schema.categorical:
            cats = schema.categorical[col]
            onehot = np.zeros((len(rows), len(cats)))
            for i, v in enumerate(raw):
                if v not in cats:
                    raise IngestionError(f"row {i}, column {col!r}: undeclared category {v!r}")
                onehot[i, cats.index(v)] = 1.0
            feats.append(onehot)
            names.extend(f"{col}={c}" for c in cats)
        else:
            vals = np.empty(len(rows))
            missing = np.zeros(len(rows))
            for i, v in enumerate(raw):
                if v is None or v == "":
                    vals[i] = np.nan
                    missing[i] = 1.0
                else:
                    try:
                        vals[i] = float(v)
                    except ValueError:
                        raise IngestionError(
                            f"row {i}, column {col!r}: unparseable cell {v!r}") from None
            if np.any(missing > 0):
                observed = vals[missing == 0]
                if observed.size == 0:
                    raise IngestionError(f"column {col!r} has no observed values")
                vals = np.where(missing > 0, observed.mean(), vals)
                feats.append(vals[:, None])
                feats.append(missing[:, None])
                names.extend([col, f"{col}__missing"])
            else:
                feats.append(vals[:, None])
                names.append(col)
    return np.hstack(feats) if feats else np.zeros((len(rows), 0)), names


def load_csv(path, schema: SchemaConfig) -> Dataset:
    """Parse a UTF-8 comma-separated file with a header row into a Dataset."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = set(schema.recipient_columns) | set(schema.donor_columns) | {schema.outcome_column}
        missing_cols = needed - set(reader.fieldnames or [])
        if missing_cols:
            raise IngestionError(f"unknown column(s): {sorted(missing_cols)}")
        rows = list(reader)
    if not rows:
        raise IngestionError("empty file")
    recipients, r_names = _encode_block(rows, schema.recipient_columns, schema)
    donors, d_names = _encode_block(rows, schema.donor_columns, schema)
    outcomes = np.empty(len(rows))
    for i, r in enumerate(rows):
        try:
            outcomes[i] = float(r[schema.outcome_column])
        except (TypeError, ValueError):
            raise IngestionError(
                f"row {i}, column {schema.outcome_column!r}: unparseable outcome") from None
    return Dataset(recipients, donors, outcomes, r_names, d_names)


def write_csv(dataset: Dataset, path) -> None:
    """Write features and outcome; inverse of load_csv for all-numeric schemas."""
    header = ([f"r_{n}" for n in dataset.recipient_names]
              + [f"d_{n}" for n in dataset.donor_names] + ["outcome"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.recipients[i]]
            row += [repr(float(v)) for v in dataset.donors[i]]
            row.append(repr(float(dataset.outcomes[i])))
            writer.writerow(row)


def attach_ground_truth_csv(dataset: Dataset, path) -> Dataset:
    """Attach the ground-truth columns written by write_ground_truth_csv."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != len(dataset):
        raise IngestionError("ground-truth file and dataset disagree in length")
    pot_cols = sorted((c for c in rows[0] if c.startswith("potential_")),
                      key=lambda c: int(c.split("_")[1]))
    if not pot_cols:
        raise IngestionError("ground-truth file has no potential_* columns")
    return Dataset(
        recipients=dataset.recipients,
        donors=dataset.donors,
        outcomes=dataset.outcomes,
        recipient_names=dataset.recipient_names,
        donor_names=dataset.donor_names,
        true_potentials=np.array([[float(r[c]) for c in pot_cols] for r in rows]),
        untreated_survival=np.array([float(r["untreated_survival"]) for r in rows]),
        true_recipient_type=np.array([int(r["true_recipient_type"]) for r in rows]),
        true_donor_type=np.array([int(r["true_donor_type"]) for r in rows]),
        normalization=dataset.normalization,
    )


def write_ground_truth_csv(dataset: Dataset, path) -> None:
    if not dataset.has_ground_truth:
        raise ValueError("dataset has no ground truth")
    k = dataset.true_potentials.shape[1]
    header = (["true_recipient_type", "true_donor_type"]
              + [f"potential_{j + 1}" for j in range(k)] + ["untreated_survival"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [int(dataset.true_recipient_type[i]), int(dataset.true_donor_type[i])]
            row += [repr(float(v)) for v in dataset.true_potentials[i]]
            row.append(repr(float(dataset.untreated_survival[i])))
            writer.writerow(row)
