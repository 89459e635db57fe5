"""Deterministic numerical kernels.

Small dense feed-forward networks with hand-derived backpropagation, Adam,
Lloyd k-means, diagonal-covariance Gaussian mixture EM, diagonal-Gaussian
moment fitting with a closed-form KL divergence, and a finite-difference
gradient checker.

All randomness flows through Philox counter-based generators keyed by
(seed, component name), so identical seeds reproduce bit-identical results
across runs and platforms.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

VAR_FLOOR = 1e-6

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DimensionMismatchError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Philox generator keyed by SHA-256 of (seed, names).

    Independent components derive independent streams from one root seed;
    adding a component never perturbs another component's draws.
    """
    tag = "/".join(str(n) for n in names) + "#" + str(int(seed))
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Dense feed-forward networks
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class DenseNet:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params


def init_dense_net(dims: list[int], activations: list[str], rng: np.random.Generator) -> DenseNet:
    """Glorot-uniform initialisation: weights uniform in +-sqrt(6/(fan_in+fan_out))."""
    if len(activations) != len(dims) - 1:
        raise DimensionMismatchError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(Layer(weight, np.zeros(fan_out), act))
    return DenseNet(layers)


def mlp_forward(net: DenseNet, batch: np.ndarray):
    """Forward pass; returns (outputs, cache) with cache sufficient for backprop."""
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise DimensionMismatchError(
            f"batch has shape {batch.shape}, net expects (*, {net.input_dim})"
        )
    a = batch
    cache = []
    for layer in net.layers:
        z = a @ layer.weight + layer.bias
        a_next = _act(layer.activation, z)
        cache.append((a, z, a_next))
        a = a_next
    return a, cache


def mlp_backward(net: DenseNet, cache, upstream_grad: np.ndarray):
    """Exact chain-rule gradients.

    Returns (param_grads, input_grad); param_grads is ordered like
    ``net.parameters()``.
    """
    upstream_grad = np.asarray(upstream_grad, dtype=float)
    if len(cache) != len(net.layers):
        raise DimensionMismatchError("cache does not match net depth")
    if upstream_grad.shape != cache[-1][2].shape:
        raise DimensionMismatchError(
            f"upstream grad shape {upstream_grad.shape} != output shape {cache[-1][2].shape}"
        )
    grads: list[np.ndarray] = []
    delta = upstream_grad
    for layer, (a_in, z, a_out) in zip(reversed(net.layers), reversed(cache)):
        delta = delta * _act_grad(layer.activation, z, a_out)
        grads.append(np.sum(delta, axis=0))  # bias
        grads.append(a_in.T @ delta)  # weight
        delta = delta @ layer.weight.T
    grads.reverse()
    return grads, delta


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float):
    """In-place Adam update (beta1=0.9, beta2=0.999, eps=1e-8)."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionMismatchError("params/grads/state lengths disagree")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient in Adam step")
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    idx = rng.integers(n)
    centers[0] = points[idx]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def kmeans_fit(points: np.ndarray, k: int, rng: np.random.Generator,
               max_iter: int = 100, tol: float = 1e-10, n_init: int = 1):
    """Lloyd's algorithm with k-means++ seeding.

    Empty-cluster repair: the point farthest from its assigned center becomes
    the new center. With ``n_init > 1`` the algorithm is restarted from fresh
    seedings and the run with the lowest final inertia wins.
    Returns (centers, labels, inertia_history).
    """
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    if n_init > 1:
        best = None
        for _ in range(n_init):
            out = kmeans_fit(points, k, rng, max_iter=max_iter, tol=tol)
            if best is None or out[2][-1] < best[2][-1]:
                best = out
        return best
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if k > n:
        raise InsufficientDataError(f"k={k} exceeds number of points n={n}")
    centers = _kmeans_pp_init(points, k, rng)
    history = []
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        assigned_d2 = d2[np.arange(n), labels]
        for j in range(k):
            if not np.any(labels == j):
                far = int(np.argmax(assigned_d2))
                centers[j] = points[far]
                labels[far] = j
                assigned_d2[far] = 0.0
        history.append(float(assigned_d2.sum()))
        new_centers = np.vstack([points[labels == j].mean(axis=0) for j in range(k)])
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        if shift < tol:
            break
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    history.append(float(d2[np.arange(n), labels].sum()))
    return centers, labels, history


@dataclass
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        if self.mean.shape != self.var.shape:
            raise DimensionMismatchError("mean and var must have the same shape")
        if np.any(self.var < VAR_FLOOR * (1 - 1e-12)):
            raise ValueError("variance below floor")


def fit_diag_gaussian(points: np.ndarray) -> DiagGaussian:
    """Per-dimension sample mean and (n-1) variance, variance floored at 1e-6."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 2:
        raise InsufficientDataError("need at least 2 points")
    mean = points.mean(axis=0)
    var = points.var(axis=0, ddof=1)
    return DiagGaussian(mean, np.maximum(var, VAR_FLOOR))


def kl_gaussian_diag(p: DiagGaussian, q: DiagGaussian) -> float:
    """KL(p || q) for diagonal Gaussians, summed over dimensions."""
    if p.mean.shape != q.mean.shape:
        raise DimensionMismatchError("dimension mismatch between p and q")
    ratio = p.var / q.var
    return float(np.sum(0.5 * (np.log(q.var / p.var) + ratio
                               + (p.mean - q.mean) ** 2 / q.var - 1.0)))


def gmm_em_fit(points: np.ndarray, k: int, rng: np.random.Generator,
               max_iter: int = 100, tol: float = 1e-8):
    """EM for a diagonal-covariance Gaussian mixture.

    Initialised from k-means. Degenerate variances are floored (with a
    warning). Returns (weights, components, responsibilities, loglik_history).
    """
    points = np.asarray(points, dtype=float)
    n, d = points.shape
    if k > n:
        raise InsufficientDataError(f"k={k} exceeds number of points n={n}")
    centers, labels, _ = kmeans_fit(points, k, rng)
    means = centers.copy()
    variances = np.empty((k, d))
    weights = np.empty(k)
    for j in range(k):
        members = points[labels == j]
        weights[j] = max(len(members), 1) / n
        variances[j] = members.var(axis=0) if len(members) > 1 else np.ones(d)
    weights /= weights.sum()
    if np.any(variances < VAR_FLOOR):
        warnings.warn("variance floored in GMM initialisation")
    variances = np.maximum(variances, VAR_FLOOR)

    history = []
    resp = np.full((n, k), 1.0 / k)
    for _ in range(max_iter):
        # E-step: log responsibilities
        log_prob = (
            -0.5 * np.sum((points[:, None, :] - means[None]) ** 2 / variances[None], axis=2)
            - 0.5 * np.sum(np.log(2.0 * np.pi * variances), axis=1)[None, :]
            + np.log(weights)[None, :]
        )
        norm = np.logaddexp.reduce(log_prob, axis=1)
        history.append(float(norm.sum()))
        resp = np.exp(log_prob - norm[:, None])
        # M-step
        nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ points) / nk[:, None]
        variances = (resp.T @ (points ** 2)) / nk[:, None] - means ** 2
        if np.any(variances < VAR_FLOOR):
            warnings.warn("variance floored in GMM M-step")
        variances = np.maximum(variances, VAR_FLOOR)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol * (1 + abs(history[-2])):
            break
    components = [DiagGaussian(means[j], variances[j]) for j in range(k)]
    return weights, components, resp, history


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_block: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(loss_and_grads, params: list[np.ndarray], h: float = 1e-4,
                      tol: float = 1e-4, max_entries_per_block: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grads(params) -> (loss, grads)`` must be deterministic. If
    ``max_entries_per_block`` is given, only a random subset of entries is
    checked per parameter block (speeds up large nets).
    """
    _, grads = loss_and_grads(params)
    per_block = []
    for b, (p, g) in enumerate(zip(params, grads)):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        idx = np.arange(flat_p.size)
        if max_entries_per_block is not None and flat_p.size > max_entries_per_block:
            idx = (rng or np.random.default_rng(0)).choice(
                flat_p.size, size=max_entries_per_block, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat_p[i]
            flat_p[i] = orig + h
            lo_hi, _ = loss_and_grads(params)
            flat_p[i] = orig - h
            lo_lo, _ = loss_and_grads(params)
            flat_p[i] = orig
            fd = (lo_hi - lo_lo) / (2.0 * h)
            denom = max(abs(fd), abs(flat_g[i]), 1e-4)
            worst = max(worst, abs(fd - flat_g[i]) / denom)
        per_block.append(worst)
    return GradCheckReport(max(per_block) if per_block else 0.0, per_block, tol)
