"""Synthetic and semi-synthetic data generation.

The synthetic generative model: recipients come from a 2-component Gaussian
mixture (types m in {1, 2}), donors from a 3-component mixture (types k in
{1, 2, 3}); a biased matching table P(k|m) pairs them, and each recipient
draws a full potential-outcome vector (one survival time per donor type)
from per-(m, k) normals. The factual outcome is the potential at the
factually matched donor type, so the counterfactual oracle is exact.

For ingested real-world-shaped tables where no counterfactual ground truth
exists, :func:`semi_synthetic_outcomes` overwrites outcomes with a surrogate
model: donors are clustered into pseudo-types by k-means and each pseudo-type
response is a frozen random linear-softplus function of recipient features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .datamodel import Dataset
from .numkit import kmeans_fit, rng_stream


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n: int = 5000
    seed: int = 0
    recipient_type_weights: list[float] = field(default_factory=lambda: [0.5, 0.5])
    # match_table[m-1][k-1] = P(k | m)
    match_table: list[list[float]] = field(
        default_factory=lambda: [[0.6, 0.2, 0.2], [0.1, 0.7, 0.2]])
    recipient_means: list[list[float]] = field(
        default_factory=lambda: [[-2.0, 0.0], [2.0, 0.0]])
    recipient_vars: list[list[float]] = field(
        default_factory=lambda: [[1.0, 1.0], [1.0, 1.0]])
    donor_means: list[list[float]] = field(
        default_factory=lambda: [[-2.0, -2.0], [2.0, 2.0], [3.0, 1.0]])
    donor_vars: list[list[float]] = field(
        default_factory=lambda: [[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    # outcome_means[m-1][k-1] = mean survival days; outcome_vars are variances
    outcome_means: list[list[float]] = field(
        default_factory=lambda: [[500.0, 1000.0, 1100.0], [100.0, 800.0, 900.0]])
    outcome_vars: list[list[float]] = field(
        default_factory=lambda: [[50.0, 100.0, 100.0], [10.0, 100.0, 100.0]])
    # Untreated survival per recipient type, truncated at 1 day.
    # "exponential" (memoryless, the default) uses untreated_means only;
    # "normal" uses Normal(mean, sd^2). The memoryless default keeps a
    # waitlisted recipient's expected remaining survival independent of how
    # long they have already waited, which is what makes first-come-first-
    # serve and benefit-first allocation genuinely different policies.
    untreated_dist: str = "exponential"
    untreated_means: list[float] = field(default_factory=lambda: [400.0, 350.0])
    untreated_sds: list[float] = field(default_factory=lambda: [50.0, 50.0])

    @property
    def n_recipient_types(self) -> int:
        return len(self.recipient_type_weights)

    @property
    def n_donor_types(self) -> int:
        return len(self.match_table[0])

    def validate(self) -> None:
        m, k = self.n_recipient_types, self.n_donor_types
        if abs(sum(self.recipient_type_weights) - 1.0) > 1e-9:
            raise ConfigError("recipient_type_weights must sum to 1")
        if len(self.match_table) != m:
            raise ConfigError("match_table must have one row per recipient type")
        for row in self.match_table:
            if len(row) != k or abs(sum(row) - 1.0) > 1e-9 or min(row) < 0:
                raise ConfigError("each match_table row must be a probability vector")
        for table, rows in (("outcome_means", m), ("outcome_vars", m)):
            vals = getattr(self, table)
            if len(vals) != rows or any(len(r) != k for r in vals):
                raise ConfigError(f"{table} must be {rows}x{k}")
        if any(v <= 0 for row in self.outcome_vars for v in row):
            raise ConfigError("outcome variances must be positive")
        if any(v <= 0 for row in self.recipient_vars + self.donor_vars for v in row):
            raise ConfigError("feature variances must be positive")
        if self.untreated_dist not in ("exponential", "normal"):
            raise ConfigError("untreated_dist must be 'exponential' or 'normal'")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticConfig":
        return cls(**json.loads(text))


def paper_preset(n: int = 5000, seed: int = 0) -> SyntheticConfig:
    """The default replication configuration (preset name ``paper-5.1``)."""
    return SyntheticConfig(n=n, seed=seed)


def true_potential_means(config: SyntheticConfig, m: int) -> np.ndarray:
    """Mean survival days per donor type for recipient type m (1-based)."""
    if not 1 <= m <= config.n_recipient_types:
        raise ConfigError(f"invalid recipient type {m}")
    return np.asarray(config.outcome_means[m - 1], dtype=float)


def sample_dataset(config: SyntheticConfig) -> Dataset:
    """Draw n recipient-donor pairs with full counterfactual ground truth."""
    config.validate()
    rng = rng_stream(config.seed, "synthgen", "sample")
    n = config.n
    n_k = config.n_donor_types
    weights = np.asarray(config.recipient_type_weights)
    match = np.asarray(config.match_table)

    m_idx = rng.choice(config.n_recipient_types, size=n, p=weights)  # 0-based
    r_means = np.asarray(config.recipient_means)[m_idx]
    r_sds = np.sqrt(np.asarray(config.recipient_vars))[m_idx]
    recipients = rng.normal(r_means, r_sds)

    # k | m, then donor features from component k
    k_idx = np.empty(n, dtype=int)
    for m in range(config.n_recipient_types):
        mask = m_idx == m
        k_idx[mask] = rng.choice(n_k, size=int(mask.sum()), p=match[m])
    d_means = np.asarray(config.donor_means)[k_idx]
    d_sds = np.sqrt(np.asarray(config.donor_vars))[k_idx]
    donors = rng.normal(d_means, d_sds)

    out_means = np.asarray(config.outcome_means)[m_idx]  # (n, K)
    out_sds = np.sqrt(np.asarray(config.outcome_vars))[m_idx]
    potentials = rng.normal(out_means, out_sds)
    outcomes = potentials[np.arange(n), k_idx]

    u_mean = np.asarray(config.untreated_means)[m_idx]
    if config.untreated_dist == "exponential":
        untreated = rng.exponential(u_mean)
    else:
        u_sd = np.asarray(config.untreated_sds)[m_idx]
        untreated = rng.normal(u_mean, u_sd)
    untreated = np.maximum(untreated, 1.0)

    d_r = recipients.shape[1]
    d_o = donors.shape[1]
    return Dataset(
        recipients=recipients,
        donors=donors,
        outcomes=outcomes,
        recipient_names=[f"x{i}" for i in range(d_r)],
        donor_names=[f"x{i}" for i in range(d_o)],
        true_potentials=potentials,
        untreated_survival=untreated,
        true_recipient_type=m_idx + 1,
        true_donor_type=k_idx + 1,
    )


def semi_synthetic_outcomes(dataset: Dataset, k: int, seed: int,
                            scale: float = 400.0, noise_sd: float = 10.0,
                            untreated_mean: float = 400.0,
                            untreated_sd: float = 50.0) -> Dataset:
    """Surrogate outcome model for real-feature tables.

    Donors are clustered into ``k`` pseudo-types by k-means; pseudo-type j's
    potential outcome is softplus(w_j . x_r + b_j) * scale plus Gaussian
    noise, with (w_j, b_j) drawn once from the seed and frozen. The factual
    outcome is overwritten with the potential at the factual donor's
    pseudo-type, so the counterfactual oracle is exact by construction.
    """
    rng = rng_stream(seed, "synthgen", "semi")
    centers, labels, _ = kmeans_fit(dataset.donors, k, rng_stream(seed, "synthgen", "semi-kmeans"))
    d_r = dataset.d_r
    w = rng.normal(0.0, 1.0 / np.sqrt(max(d_r, 1)), size=(k, d_r))
    b = rng.normal(0.0, 0.5, size=k)
    z = dataset.recipients @ w.T + b  # (n, k)
    potentials = np.logaddexp(0.0, z) * scale + rng.normal(0.0, noise_sd, size=z.shape)
    potentials = np.maximum(potentials, 1.0)
    outcomes = potentials[np.arange(len(dataset)), labels]
    untreated = np.maximum(rng.normal(untreated_mean, untreated_sd, size=len(dataset)), 1.0)
    return Dataset(
        recipients=dataset.recipients,
        donors=dataset.donors,
        outcomes=outcomes,
        recipient_names=dataset.recipient_names,
        donor_names=dataset.donor_names,
        true_potentials=potentials,
        untreated_survival=untreated,
        true_recipient_type=None,
        true_donor_type=labels + 1,
        normalization=dataset.normalization,
    )
