"""Counterfactual-evaluation metrics and allocation-comparison helpers.

All metric functions are pure and permutation-invariant over records.
``eps_factual`` and ``eps_wmse`` are mean squared errors in squared days;
``aodt`` (accuracy of the best donor type) is an argmax-agreement fraction
with ties broken toward the lowest index on both sides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np


class MissingGroundTruthError(ValueError):
    pass


@dataclass
class EvalReport:
    eps_f: float
    eps_wmse: float | None
    aodt: float | None
    mean_best_prediction: float
    n: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        return asdict(self)


def _check_2d(predictions: np.ndarray) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=float)
    if predictions.ndim != 2:
        raise ValueError("predictions must be an (n, K) matrix")
    return predictions


def eps_factual(predictions: np.ndarray, factual_labels: np.ndarray,
                outcomes: np.ndarray) -> float:
    """(1/n) sum_i (yhat_i[k_i] - y_i)^2 with 0-based factual labels k_i."""
    predictions = _check_2d(predictions)
    factual_labels = np.asarray(factual_labels, dtype=int)
    outcomes = np.asarray(outcomes, dtype=float)
    n = predictions.shape[0]
    if factual_labels.shape != (n,) or outcomes.shape != (n,):
        raise ValueError("predictions, labels and outcomes disagree in length")
    if np.any((factual_labels < 0) | (factual_labels >= predictions.shape[1])):
        raise ValueError("factual label out of range")
    err = predictions[np.arange(n), factual_labels] - outcomes
    return float(np.mean(err * err))


def eps_wmse(predictions: np.ndarray, true_potentials: np.ndarray | None) -> float:
    """(1/n) sum_i sum_k (yhat_i[k] - y_i[k])^2 over all K potential outcomes."""
    predictions = _check_2d(predictions)
    if true_potentials is None:
        raise MissingGroundTruthError("eps_wmse needs ground-truth potentials")
    true_potentials = np.asarray(true_potentials, dtype=float)
    if true_potentials.shape != predictions.shape:
        raise ValueError("predictions and potentials disagree in shape")
    err = predictions - true_potentials
    return float(np.mean(np.sum(err * err, axis=1)))


def aodt(predictions: np.ndarray, true_potentials: np.ndarray | None) -> float:
    """Fraction of records whose predicted-best and true-best types agree."""
    predictions = _check_2d(predictions)
    if true_potentials is None:
        raise MissingGroundTruthError("aodt needs ground-truth potentials")
    true_potentials = np.asarray(true_potentials, dtype=float)
    if true_potentials.shape != predictions.shape:
        raise ValueError("predictions and potentials disagree in shape")
    return float(np.mean(np.argmax(predictions, axis=1) == np.argmax(true_potentials, axis=1)))


def mean_best_prediction(predictions: np.ndarray) -> float:
    """(1/n) sum_i max_k yhat_i[k] — the average predicted best outcome."""
    predictions = _check_2d(predictions)
    return float(np.mean(np.max(predictions, axis=1)))


def evaluate(predictions: np.ndarray, factual_labels: np.ndarray,
             outcomes: np.ndarray, true_potentials: np.ndarray | None = None) -> EvalReport:
    predictions = _check_2d(predictions)
    has_truth = true_potentials is not None
    return EvalReport(
        eps_f=eps_factual(predictions, factual_labels, outcomes),
        eps_wmse=eps_wmse(predictions, true_potentials) if has_truth else None,
        aodt=aodt(predictions, true_potentials) if has_truth else None,
        mean_best_prediction=mean_best_prediction(predictions),
        n=predictions.shape[0],
    )


def remap_potentials_to_learned(true_potentials: np.ndarray,
                                true_donor_type: np.ndarray,
                                learned_labels: np.ndarray,
                                k: int):
    """Express ground-truth potentials in the learned donor-type space.

    Learned clusters need not align one-to-one with the generative donor
    types (nearby types can legitimately merge), so potentials are averaged
    under the empirical conditional P(true type | learned cluster) estimated
    from the hard labels of the same donors:

        y_tilde[i, j] = sum_k P(true k | learned j) * y_i[k].

    Returns (y_tilde, nonempty) where ``nonempty[j]`` flags learned clusters
    that contain at least one donor; empty clusters carry no donors and
    should be excluded from argmax comparisons.
    """
    true_potentials = np.asarray(true_potentials, dtype=float)
    true0 = np.asarray(true_donor_type, dtype=int) - 1  # to 0-based
    learned_labels = np.asarray(learned_labels, dtype=int)
    n_true = true_potentials.shape[1]
    counts = np.zeros((n_true, k))
    np.add.at(counts, (true0, learned_labels), 1.0)
    totals = counts.sum(axis=0)
    nonempty = totals > 0
    cond = counts / np.maximum(totals, 1.0)
    return true_potentials @ cond, nonempty


def aodt_learned_space(predictions: np.ndarray, true_potentials: np.ndarray,
                       true_donor_type: np.ndarray, learned_labels: np.ndarray) -> float:
    """AoDT computed in the learned cluster space (empty clusters excluded)."""
    predictions = _check_2d(predictions)
    y_tilde, nonempty = remap_potentials_to_learned(
        true_potentials, true_donor_type, learned_labels, predictions.shape[1])
    masked_pred = np.where(nonempty, predictions, -np.inf)
    masked_true = np.where(nonempty, y_tilde, -np.inf)
    return float(np.mean(np.argmax(masked_pred, axis=1) == np.argmax(masked_true, axis=1)))


def flipped_ratio(original_types: np.ndarray, new_types: np.ndarray,
                  recipient_types: np.ndarray | None = None,
                  recipient_type_filter: int | None = None,
                  original_type_filter: int | None = None) -> float | None:
    """Among recipients passing the filters, the fraction whose newly
    assigned donor type differs from the original one.

    Entries with a negative type in either log (recipient never transplanted
    under that policy) are excluded. Returns None when the filtered set is
    empty (not applicable).
    """
    original_types = np.asarray(original_types, dtype=int)
    new_types = np.asarray(new_types, dtype=int)
    if original_types.shape != new_types.shape:
        raise ValueError("assignment logs disagree in length")
    mask = (original_types >= 0) & (new_types >= 0)
    if recipient_type_filter is not None:
        if recipient_types is None:
            raise ValueError("recipient_type_filter needs recipient_types")
        mask &= np.asarray(recipient_types, dtype=int) == recipient_type_filter
    if original_type_filter is not None:
        mask &= original_types == original_type_filter
    if not np.any(mask):
        return None
    return float(np.mean(original_types[mask] != new_types[mask]))
