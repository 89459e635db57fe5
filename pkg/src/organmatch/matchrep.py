"""Matching-representation model.

Three jointly trained components:

* a donor-type map ``T``: autoencoder-pretrained encoder plus K cluster
  centers, refined with a deep-embedded-clustering (DEC) self-training loss;
* a recipient encoder ``Phi`` whose output distribution is pushed to be the
  same across donor-type-conditioned subpopulations (diagonal-Gaussian KL);
* a K-headed predictor ``f`` producing one survival-time estimate per donor
  type.

The combined objective is ``L = L_f + alpha * L_DEC + beta * L_Phi``. All
gradients are hand-derived and validated against finite differences.
Learned donor-type labels are 0-based throughout this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numkit
from .numkit import (
    AdamState,
    DenseNet,
    DimensionMismatchError,
    Layer,
    TrainingDivergedError,
    adam_step,
    init_dense_net,
    kmeans_fit,
    mlp_backward,
    mlp_forward,
    rng_stream,
)

T_CLAMP = 1e-12


class DeadClusterError(RuntimeError):
    def __init__(self, cluster: int):
        super().__init__(f"cluster {cluster} has zero total soft assignment")
        self.cluster = cluster


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    k: int = 3
    alpha: float = 0.1
    # L_f is in squared-day units (~1e4 on the synthetic preset) while the
    # rep-loss KL is O(1); beta's default puts the two gradients on a
    # comparable footing so the invariance term actually binds.
    beta: float = 100.0
    learning_rate: float = 1e-3
    batch_size: int = 128
    pretrain_epochs: int = 50
    joint_epochs: int = 200
    rep_dim: int = 8  # d', output dimension of Phi
    embed_dim: int = 8  # donor embedding dimension
    hidden: int = 32
    dec_exponent: float = -0.5  # exponent in the soft-assignment kernel
    center_init: str = "kmeans"  # "kmeans" | "random"
    target_update_interval: int = 1  # epochs between target-distribution refreshes
    min_cluster_count: int = 8
    # A cluster must end training with at least this fraction of the donors
    # to stay active; DEC merging routinely leaves residual clusters holding
    # a few stragglers whose prediction head never saw meaningful data.
    min_cluster_frac: float = 0.01
    kl_direction: str = "conditional-to-marginal"
    # Donor-map refinement schedule. The DEC term is minimized with plain SGD
    # (step dec_lr * alpha) because Adam's per-parameter normalization erases
    # the loss scale and with it the self-training dynamics that let ambiguous
    # clusters merge. A reconstruction anchor (Adam) and a small embedding
    # norm-decay keep the SGD refinement from collapsing or rescaling the
    # embedding; refinement halts once hard assignments stabilize.
    dec_lr: float = 1.0
    embed_decay: float = 0.004
    dec_min_epochs: int = 5
    dec_stop_tol: float = 0.005  # stop when < this fraction of labels change per epoch
    seed: int = 0

    def validate(self) -> None:
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.center_init not in ("kmeans", "random"):
            raise ValueError("center_init must be 'kmeans' or 'random'")
        if self.kl_direction not in ("conditional-to-marginal", "marginal-to-conditional"):
            raise ValueError("bad kl_direction")
        if self.dec_lr < 0 or self.embed_decay < 0:
            raise ValueError("dec_lr and embed_decay must be nonnegative")
        if not 0.0 <= self.dec_stop_tol <= 1.0:
            raise ValueError("dec_stop_tol must be in [0, 1]")
        if not 0.0 <= self.min_cluster_frac < 1.0:
            raise ValueError("min_cluster_frac must be in [0, 1)")


@dataclass
class DonorTypeMap:
    encoder: DenseNet
    decoder: DenseNet
    centers: np.ndarray | None = None  # (K, embed_dim)


@dataclass
class MatchEncoder:
    net: DenseNet


@dataclass
class MultiHeadPredictor:
    """K heads over the shared Phi output (identity trunk).

    Heads operate in standardized outcome units internally; predictions are
    mapped back to days via (outcome_mean, outcome_scale).
    """

    heads: list[DenseNet]
    outcome_mean: float
    outcome_scale: float


@dataclass
class MatchRepModel:
    donor_map: DonorTypeMap
    encoder: MatchEncoder
    predictor: MultiHeadPredictor
    config: TrainConfig
    trained: bool = False
    # Clusters that ended training with at least min_cluster_count donors.
    # DEC merging can leave a residual cluster holding a handful of points;
    # its head never saw enough data to be meaningful, so assignment is
    # restricted to active clusters. None means all clusters are active.
    active: np.ndarray | None = None

    def parameters(self) -> list[np.ndarray]:
        params = list(self.donor_map.encoder.parameters())
        params.append(self.donor_map.centers)
        params.extend(self.encoder.net.parameters())
        for head in self.predictor.heads:
            params.extend(head.parameters())
        return params


# ---------------------------------------------------------------------------
# DEC soft assignment and loss
# ---------------------------------------------------------------------------


def soft_assign(embeds: np.ndarray, centers: np.ndarray, exponent: float = -0.5) -> np.ndarray:
    """t_ij = (1 + ||d_i - mu_j||^2)^exponent, row-normalized."""
    embeds = np.asarray(embeds, dtype=float)
    centers = np.asarray(centers, dtype=float)
    if embeds.shape[1] != centers.shape[1]:
        raise DimensionMismatchError("embedding/center dimensions disagree")
    d2 = np.sum((embeds[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    s = (1.0 + d2) ** exponent
    return s / s.sum(axis=1, keepdims=True)


def target_distribution(t: np.ndarray) -> np.ndarray:
    """Sharpened target p_ij = (t_ij^2 / f_j) / sum_j (t_ij^2 / f_j), f_j = sum_i t_ij."""
    f = t.sum(axis=0)
    dead = np.nonzero(f <= 0.0)[0]
    if dead.size:
        raise DeadClusterError(int(dead[0]))
    w = (t * t) / f
    return w / w.sum(axis=1, keepdims=True)


def dec_loss_and_grads(embeds: np.ndarray, centers: np.ndarray, p: np.ndarray,
                       exponent: float = -0.5):
    """KL(P || T) with gradients w.r.t. embeddings and centers.

    P is treated as a constant target. Returns (loss, d_embeds, d_centers).
    """
    diff = embeds[:, None, :] - centers[None, :, :]  # (n, K, e)
    d2 = np.sum(diff * diff, axis=2)
    s = (1.0 + d2) ** exponent
    big_s = s.sum(axis=1, keepdims=True)
    t = s / big_s
    t_safe = np.maximum(t, T_CLAMP)
    loss = float(np.sum(p * np.log(np.maximum(p, T_CLAMP) / t_safe)))
    # dL/ds_ik = (1 - p_ik / t_ik) / S_i ; ds/dd = 2*exp*(1+d2)^(exp-1)*(d - mu)
    c = (1.0 - p / t_safe) / big_s
    g = c * (2.0 * exponent) * (1.0 + d2) ** (exponent - 1.0)  # (n, K)
    d_embeds = np.sum(g[:, :, None] * diff, axis=1)
    d_centers = -np.sum(g[:, :, None] * diff, axis=0)
    return loss, d_embeds, d_centers


# ---------------------------------------------------------------------------
# Representation (distribution-matching) loss
# ---------------------------------------------------------------------------


def _moments(x: np.ndarray):
    """Sample mean / (n-1) variance with floor; returns (mean, var, clamped mask)."""
    mean = x.mean(axis=0)
    var = x.var(axis=0, ddof=1)
    clamped = var < numkit.VAR_FLOOR
    return mean, np.where(clamped, numkit.VAR_FLOOR, var), clamped


def rep_loss_and_grads(xprime: np.ndarray, labels: np.ndarray, k: int,
                       min_cluster_count: int = 8,
                       direction: str = "conditional-to-marginal"):
    """Sum over clusters of diagonal-Gaussian KL between the per-cluster and
    batch-marginal distributions of the encoded recipients.

    Clusters with fewer than ``min_cluster_count`` samples are skipped.
    Returns (loss, d_xprime, n_clusters_used).
    """
    n, d = xprime.shape
    grad = np.zeros_like(xprime)
    if n < max(min_cluster_count, 2):
        return 0.0, grad, 0
    mu_a, var_a, cl_a = _moments(xprime)
    d_mu_a = np.zeros(d)
    d_var_a = np.zeros(d)
    loss = 0.0
    used = 0
    for c in range(k):
        members = np.nonzero(labels == c)[0]
        nc = members.size
        if nc < max(min_cluster_count, 2):
            continue
        used += 1
        mu_c, var_c, cl_c = _moments(xprime[members])
        if direction == "conditional-to-marginal":
            mu_p, var_p, mu_q, var_q = mu_c, var_c, mu_a, var_a
        else:
            mu_p, var_p, mu_q, var_q = mu_a, var_a, mu_c, var_c
        delta = mu_p - mu_q
        loss += float(np.sum(0.5 * (np.log(var_q / var_p) + var_p / var_q
                                    + delta * delta / var_q - 1.0)))
        d_mu_p = delta / var_q
        d_var_p = 0.5 * (1.0 / var_q - 1.0 / var_p)
        d_mu_q = -delta / var_q
        d_var_q = 0.5 * (1.0 / var_q - var_p / var_q ** 2 - delta * delta / var_q ** 2)
        if direction == "conditional-to-marginal":
            d_mu_c, d_var_c = d_mu_p, np.where(cl_c, 0.0, d_var_p)
            d_mu_a += d_mu_q
            d_var_a += np.where(cl_a, 0.0, d_var_q)
        else:
            d_mu_c, d_var_c = d_mu_q, np.where(cl_c, 0.0, d_var_q)
            d_mu_a += d_mu_p
            d_var_a += np.where(cl_a, 0.0, d_var_p)
        centered = xprime[members] - mu_c
        grad[members] += d_mu_c / nc + d_var_c * 2.0 * centered / (nc - 1)
    if used:
        centered_all = xprime - mu_a
        grad += d_mu_a / n + d_var_a * 2.0 * centered_all / (n - 1)
    return loss, grad, used


# ---------------------------------------------------------------------------
# Factual loss
# ---------------------------------------------------------------------------


def factual_loss_and_grads(predictor: MultiHeadPredictor, xprime: np.ndarray,
                           outcomes: np.ndarray, labels: np.ndarray):
    """Mean squared error on the factual head, in day units.

    Returns (loss, head_grads per head aligned with head.parameters(),
    d_xprime).
    """
    n = xprime.shape[0]
    d_xprime = np.zeros_like(xprime)
    head_grads = []
    scale = predictor.outcome_scale
    loss = 0.0
    for c, head in enumerate(predictor.heads):
        members = np.nonzero(labels == c)[0]
        if members.size == 0:
            head_grads.append([np.zeros_like(p) for p in head.parameters()])
            continue
        out, cache = mlp_forward(head, xprime[members])
        pred = predictor.outcome_mean + scale * out[:, 0]
        err = pred - outcomes[members]
        loss += float(np.sum(err * err)) / n
        upstream = (2.0 * scale / n) * err[:, None]
        grads, d_in = mlp_backward(head, cache, upstream)
        head_grads.append(grads)
        d_xprime[members] = d_in
    return loss, head_grads, d_xprime


# ---------------------------------------------------------------------------
# Combined loss (used by training and by gradient checks)
# ---------------------------------------------------------------------------


def joint_loss_and_grads(model: MatchRepModel, recipients: np.ndarray,
                         donors: np.ndarray, outcomes: np.ndarray,
                         p_rows: np.ndarray, alpha: float, beta: float,
                         min_cluster_count: int | None = None):
    """L = L_f + alpha*L_DEC + beta*L_Phi on one batch.

    Hard cluster labels (argmax of the soft assignment) select the factual
    head and the rep-loss groups; no gradient flows through the assignment
    into the donor map. Gradients are returned aligned with
    ``model.parameters()``. Also returns the per-term loss values.
    """
    cfg = model.config
    if min_cluster_count is None:
        min_cluster_count = cfg.min_cluster_count
    enc = model.donor_map.encoder
    centers = model.donor_map.centers
    embeds, enc_cache = mlp_forward(enc, donors)
    t = soft_assign(embeds, centers, cfg.dec_exponent)
    labels = np.argmax(t, axis=1)

    l_dec, d_embeds, d_centers = dec_loss_and_grads(embeds, centers, p_rows, cfg.dec_exponent)
    enc_grads, _ = mlp_backward(enc, enc_cache, alpha * d_embeds)

    xprime, phi_cache = mlp_forward(model.encoder.net, recipients)
    l_f, head_grads, d_xp_f = factual_loss_and_grads(model.predictor, xprime, outcomes, labels)
    l_rep, d_xp_rep, _ = rep_loss_and_grads(xprime, labels, cfg.k, min_cluster_count,
                                            cfg.kl_direction)
    phi_grads, _ = mlp_backward(model.encoder.net, phi_cache, d_xp_f + beta * d_xp_rep)

    grads = list(enc_grads)
    grads.append(alpha * d_centers)
    grads.extend(phi_grads)
    for hg in head_grads:
        grads.extend(hg)
    total = l_f + alpha * l_dec + beta * l_rep
    return total, grads, {"L_f": l_f, "L_DEC": l_dec, "L_Phi": l_rep}


# ---------------------------------------------------------------------------
# Training phases
# ---------------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def pretrain_autoencoder(donors: np.ndarray, config: TrainConfig) -> tuple[DonorTypeMap, list[float]]:
    """Reconstruction-MSE pretraining of the donor autoencoder with Adam."""
    config.validate()
    d_o = donors.shape[1]
    if len(np.unique(donors, axis=0)) < config.k:
        raise numkit.InsufficientDataError("need at least K distinct donors")
    h, e = config.hidden, config.embed_dim
    enc = init_dense_net([d_o, h, h, e], ["relu", "relu", "identity"],
                         rng_stream(config.seed, "matchrep", "enc-init"))
    dec = init_dense_net([e, h, h, d_o], ["relu", "relu", "identity"],
                         rng_stream(config.seed, "matchrep", "dec-init"))
    params = enc.parameters() + dec.parameters()
    state = AdamState()
    rng = rng_stream(config.seed, "matchrep", "pretrain-batches")
    n = donors.shape[0]
    losses = []
    for _ in range(config.pretrain_epochs):
        epoch_loss = 0.0
        for idx in _batches(n, config.batch_size, rng):
            x = donors[idx]
            z, enc_cache = mlp_forward(enc, x)
            recon, dec_cache = mlp_forward(dec, z)
            err = recon - x
            loss = float(np.mean(err * err))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    "autoencoder loss diverged; try a lower learning rate")
            epoch_loss += loss * len(idx)
            upstream = 2.0 * err / err.size
            dec_grads, d_z = mlp_backward(dec, dec_cache, upstream)
            enc_grads, _ = mlp_backward(enc, enc_cache, d_z)
            adam_step(params, enc_grads + dec_grads, state, config.learning_rate)
        losses.append(epoch_loss / n)
    return DonorTypeMap(encoder=enc, decoder=dec, centers=None), losses


def init_centers(donor_map: DonorTypeMap, donors: np.ndarray, config: TrainConfig) -> np.ndarray:
    """K-means centers of the encoded donors (default) or random embedded points."""
    embeds, _ = mlp_forward(donor_map.encoder, donors)
    rng = rng_stream(config.seed, "matchrep", "centers")
    if config.center_init == "random":
        idx = rng.choice(embeds.shape[0], size=config.k, replace=False)
        centers = embeds[idx].copy()
    else:
        centers, _, _ = kmeans_fit(embeds, config.k, rng)
    donor_map.centers = centers
    return centers


def _recon_anchor_step(donor_map: DonorTypeMap, x: np.ndarray,
                       ae_params: list[np.ndarray], ae_state: AdamState, lr: float) -> float:
    """One Adam reconstruction-MSE step on the donor autoencoder."""
    z, enc_cache = mlp_forward(donor_map.encoder, x)
    recon, dec_cache = mlp_forward(donor_map.decoder, z)
    err = recon - x
    dec_grads, d_z = mlp_backward(donor_map.decoder, dec_cache, 2.0 * err / err.size)
    enc_grads, _ = mlp_backward(donor_map.encoder, enc_cache, d_z)
    adam_step(ae_params, enc_grads + dec_grads, ae_state, lr)
    return float(np.mean(err * err))


def _dec_sgd_step(donor_map: DonorTypeMap, x: np.ndarray, p_rows: np.ndarray,
                  n_total: int, step: float, config: TrainConfig) -> float:
    """One SGD step on L_DEC plus embedding norm-decay; returns the batch loss."""
    embeds, cache = mlp_forward(donor_map.encoder, x)
    loss, d_embeds, d_centers = dec_loss_and_grads(
        embeds, donor_map.centers, p_rows, config.dec_exponent)
    if not np.isfinite(loss):
        raise TrainingDivergedError("DEC loss diverged; try a lower dec_lr")
    d_embeds = d_embeds + config.embed_decay * 2.0 * embeds / embeds.shape[0]
    d_centers = d_centers + config.embed_decay * 2.0 * donor_map.centers * (x.shape[0] / n_total)
    enc_grads, _ = mlp_backward(donor_map.encoder, cache, d_embeds)
    for pm, g in zip(donor_map.encoder.parameters() + [donor_map.centers],
                     enc_grads + [d_centers]):
        pm -= step * g
    return loss


def _hard_labels(donor_map: DonorTypeMap, donors: np.ndarray, exponent: float) -> np.ndarray:
    embeds, _ = mlp_forward(donor_map.encoder, donors)
    return np.argmax(soft_assign(embeds, donor_map.centers, exponent), axis=1)


def train_joint(recipients: np.ndarray, donors: np.ndarray, outcomes: np.ndarray,
                config: TrainConfig):
    """Full training: autoencoder pretrain, center init, joint minibatch phase.

    The joint phase uses two optimizers per minibatch. The donor map is
    refined with plain SGD on ``alpha * L_DEC`` (plus an embedding norm-decay
    and a concurrent Adam reconstruction anchor); refinement stops once the
    per-epoch fraction of changed hard labels drops below ``dec_stop_tol``.
    The recipient encoder and heads take Adam steps on ``L_f + beta * L_Phi``
    throughout. Returns (model, log) where log has one dict per joint epoch
    with the epoch-mean loss components.
    """
    config.validate()
    donor_map, _ = pretrain_autoencoder(donors, config)
    init_centers(donor_map, donors, config)

    phi = init_dense_net([recipients.shape[1], config.hidden, config.hidden, config.rep_dim],
                         ["relu", "relu", "identity"],
                         rng_stream(config.seed, "matchrep", "phi-init"))
    head_rng = rng_stream(config.seed, "matchrep", "heads-init")
    heads = [init_dense_net([config.rep_dim, config.hidden, config.hidden, 1],
                            ["relu", "relu", "identity"], head_rng)
             for _ in range(config.k)]
    predictor = MultiHeadPredictor(
        heads=heads,
        outcome_mean=float(outcomes.mean()),
        outcome_scale=float(max(outcomes.std(), 1.0)),
    )
    model = MatchRepModel(donor_map=donor_map, encoder=MatchEncoder(phi),
                          predictor=predictor, config=config)

    phi_params = phi.parameters() + [p for h in heads for p in h.parameters()]
    phi_state = AdamState()
    ae_params = donor_map.encoder.parameters() + donor_map.decoder.parameters()
    ae_state = AdamState()
    dec_step = config.dec_lr * config.alpha
    dec_active = dec_step > 0.0
    rng = rng_stream(config.seed, "matchrep", "joint-batches")
    n = len(outcomes)
    log = []
    prev_labels = _hard_labels(donor_map, donors, config.dec_exponent)
    p_full = None
    for epoch in range(config.joint_epochs):
        if p_full is None or epoch % max(config.target_update_interval, 1) == 0:
            embeds, _ = mlp_forward(donor_map.encoder, donors)
            p_full = target_distribution(
                soft_assign(embeds, donor_map.centers, config.dec_exponent))
        sums = {"L_f": 0.0, "L_DEC": 0.0, "L_Phi": 0.0}
        n_seen = 0
        for idx in _batches(n, config.batch_size, rng):
            x_o = donors[idx]
            if dec_active:
                _recon_anchor_step(donor_map, x_o, ae_params, ae_state, config.learning_rate)
                l_dec = _dec_sgd_step(donor_map, x_o, p_full[idx], n, dec_step, config)
            else:
                embeds, _ = mlp_forward(donor_map.encoder, x_o)
                l_dec, _, _ = dec_loss_and_grads(
                    embeds, donor_map.centers, p_full[idx], config.dec_exponent)
            labels = _hard_labels(donor_map, x_o, config.dec_exponent)
            xprime, phi_cache = mlp_forward(phi, recipients[idx])
            l_f, head_grads, d_xp_f = factual_loss_and_grads(
                predictor, xprime, outcomes[idx], labels)
            l_rep, d_xp_rep, _ = rep_loss_and_grads(
                xprime, labels, config.k, config.min_cluster_count, config.kl_direction)
            if not np.isfinite(l_f + l_rep):
                err = TrainingDivergedError("joint loss diverged; try a lower learning rate")
                err.last_model = model
                raise err
            phi_grads, _ = mlp_backward(phi, phi_cache, d_xp_f + config.beta * d_xp_rep)
            grads = list(phi_grads)
            for hg in head_grads:
                grads.extend(hg)
            adam_step(phi_params, grads, phi_state, config.learning_rate)
            for key, val in (("L_f", l_f), ("L_DEC", l_dec), ("L_Phi", l_rep)):
                sums[key] += val * len(idx)
            n_seen += len(idx)
        row = {"epoch": epoch, **{k: v / n_seen for k, v in sums.items()}}
        row["total"] = (row["L_f"] + config.alpha * row["L_DEC"]
                        + config.beta * row["L_Phi"])
        row["dec_active"] = dec_active
        log.append(row)
        if dec_active:
            full_labels = _hard_labels(donor_map, donors, config.dec_exponent)
            changed = float(np.mean(full_labels != prev_labels))
            prev_labels = full_labels
            if epoch + 1 >= config.dec_min_epochs and changed < config.dec_stop_tol:
                dec_active = False
    final_labels = _hard_labels(donor_map, donors, config.dec_exponent)
    counts = np.bincount(final_labels, minlength=config.k)
    threshold = max(config.min_cluster_count, config.min_cluster_frac * len(donors))
    active = counts >= threshold
    model.active = active if active.any() else None
    model.trained = True
    return model, log


def train_dec_standalone(donors: np.ndarray, config: TrainConfig):
    """DEC clustering of donors only (autoencoder pretrain + L_DEC refinement).

    Used by the decoupled baselines; follows the same SGD refinement schedule
    as the joint phase. Returns the trained DonorTypeMap.
    """
    config.validate()
    donor_map, _ = pretrain_autoencoder(donors, config)
    init_centers(donor_map, donors, config)
    ae_params = donor_map.encoder.parameters() + donor_map.decoder.parameters()
    ae_state = AdamState()
    dec_step = config.dec_lr * config.alpha
    rng = rng_stream(config.seed, "matchrep", "dec-standalone-batches")
    n = donors.shape[0]
    prev_labels = _hard_labels(donor_map, donors, config.dec_exponent)
    p_full = None
    for epoch in range(config.joint_epochs):
        if dec_step <= 0.0:
            break
        if p_full is None or epoch % max(config.target_update_interval, 1) == 0:
            embeds, _ = mlp_forward(donor_map.encoder, donors)
            p_full = target_distribution(
                soft_assign(embeds, donor_map.centers, config.dec_exponent))
        for idx in _batches(n, config.batch_size, rng):
            _recon_anchor_step(donor_map, donors[idx], ae_params, ae_state,
                               config.learning_rate)
            _dec_sgd_step(donor_map, donors[idx], p_full[idx], n, dec_step, config)
        full_labels = _hard_labels(donor_map, donors, config.dec_exponent)
        changed = float(np.mean(full_labels != prev_labels))
        prev_labels = full_labels
        if epoch + 1 >= config.dec_min_epochs and changed < config.dec_stop_tol:
            break
    return donor_map


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _require_trained(model: MatchRepModel) -> None:
    if not model.trained:
        raise UntrainedModelError("model has not been trained")


def predict_potential_batch(model: MatchRepModel, recipients: np.ndarray) -> np.ndarray:
    """(n, K) matrix of predicted survival days, one column per donor type."""
    _require_trained(model)
    xprime, _ = mlp_forward(model.encoder.net, np.atleast_2d(recipients))
    cols = []
    for head in model.predictor.heads:
        out, _ = mlp_forward(head, xprime)
        cols.append(model.predictor.outcome_mean + model.predictor.outcome_scale * out[:, 0])
    return np.column_stack(cols)


def predict_potential(model: MatchRepModel, x_r: np.ndarray) -> np.ndarray:
    return predict_potential_batch(model, np.asarray(x_r)[None, :])[0]


def best_donor_type_batch(model: MatchRepModel, recipients: np.ndarray) -> np.ndarray:
    """0-based donor type with the highest predicted outcome per recipient,
    restricted to active clusters."""
    preds = predict_potential_batch(model, recipients)
    if model.active is not None:
        preds = np.where(model.active, preds, -np.inf)
    return np.argmax(preds, axis=1)


def donor_type_batch(model: MatchRepModel, donors: np.ndarray):
    """0-based hard donor-type labels and the soft-assignment matrix."""
    _require_trained(model)
    embeds, _ = mlp_forward(model.donor_map.encoder, np.atleast_2d(donors))
    t = soft_assign(embeds, model.donor_map.centers, model.config.dec_exponent)
    scores = t if model.active is None else np.where(model.active, t, -np.inf)
    return np.argmax(scores, axis=1), t


def donor_type(model: MatchRepModel, x_o: np.ndarray):
    labels, t = donor_type_batch(model, np.asarray(x_o)[None, :])
    return int(labels[0]), t[0]


def compatibility(model: MatchRepModel, x_r: np.ndarray, x_o: np.ndarray) -> float:
    k, _ = donor_type(model, x_o)
    return float(predict_potential(model, x_r)[k])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _net_to_doc(net: DenseNet) -> list[dict]:
    return [{"weight": l.weight.tolist(), "bias": l.bias.tolist(), "activation": l.activation}
            for l in net.layers]


def _net_from_doc(doc: list[dict]) -> DenseNet:
    return DenseNet([Layer(np.asarray(l["weight"], dtype=float),
                           np.asarray(l["bias"], dtype=float), l["activation"])
                     for l in doc])


def save_model(model: MatchRepModel, path, normalization: dict | None = None) -> None:
    doc = {
        "format": "matchrep-v1",
        "config": asdict(model.config),
        "donor_encoder": _net_to_doc(model.donor_map.encoder),
        "donor_decoder": _net_to_doc(model.donor_map.decoder),
        "centers": model.donor_map.centers.tolist(),
        "phi": _net_to_doc(model.encoder.net),
        "heads": [_net_to_doc(h) for h in model.predictor.heads],
        "outcome_mean": model.predictor.outcome_mean,
        "outcome_scale": model.predictor.outcome_scale,
        "active": None if model.active is None else model.active.tolist(),
        "normalization": normalization,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path) -> MatchRepModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "matchrep-v1":
        raise ValueError("not a matchrep-v1 model file")
    config = TrainConfig(**doc["config"])
    donor_map = DonorTypeMap(
        encoder=_net_from_doc(doc["donor_encoder"]),
        decoder=_net_from_doc(doc["donor_decoder"]),
        centers=np.asarray(doc["centers"], dtype=float),
    )
    predictor = MultiHeadPredictor(
        heads=[_net_from_doc(h) for h in doc["heads"]],
        outcome_mean=doc["outcome_mean"],
        outcome_scale=doc["outcome_scale"],
    )
    active = doc.get("active")
    model = MatchRepModel(donor_map=donor_map, encoder=MatchEncoder(_net_from_doc(doc["phi"])),
                          predictor=predictor, config=config, trained=True,
                          active=None if active is None else np.asarray(active, dtype=bool))
    return model
