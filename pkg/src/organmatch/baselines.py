"""Comparison models: decoupled clusterer/predictor pairs and pair regressors.

Cluster-predictor baselines first cluster donors (k-means, EM, or standalone
DEC) and freeze the labels, then fit one outcome predictor per cluster —
either a closed-form ridge-regularized linear head or a multi-head neural
network (optionally with the distribution-matching representation term).
Pair regressors skip clustering entirely and regress the outcome on the
concatenated (recipient, donor) feature vector.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import matchrep, numkit
from .matchrep import MultiHeadPredictor, TrainConfig
from .numkit import (
    AdamState,
    DenseNet,
    DiagGaussian,
    adam_step,
    gmm_em_fit,
    init_dense_net,
    kmeans_fit,
    mlp_backward,
    mlp_forward,
    rng_stream,
)

CLUSTERERS = ("kmeans", "em", "dec")
PREDICTORS = ("linear-per-head", "multihead-nn")
PAIR_KINDS = ("reg-nn", "reg-tree", "lasso", "ridge", "elasticnet")

RIDGE_PENALTY = 1e-3
CD_DUALITY_GAP = 1e-6
TREE_MAX_DEPTH = 8
TREE_MIN_LEAF = 16


@dataclass
class BaselineSpec:
    clusterer: str = "kmeans"
    predictor: str = "linear-per-head"
    with_rep: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.clusterer not in CLUSTERERS:
            raise ValueError(f"clusterer must be one of {CLUSTERERS}")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}")
        self.train.validate()

    @property
    def name(self) -> str:
        suffix = "+rep" if self.with_rep else ""
        return f"{self.clusterer}/{self.predictor}{suffix}"


# ---------------------------------------------------------------------------
# Donor clusterers (fit on donor features only, then frozen)
# ---------------------------------------------------------------------------


@dataclass
class DonorClusterer:
    kind: str
    k: int
    centers: np.ndarray | None = None  # kmeans
    weights: np.ndarray | None = None  # em
    components: list[DiagGaussian] | None = None  # em
    donor_map: "matchrep.DonorTypeMap | None" = None  # dec
    dec_exponent: float = -0.5

    def assign(self, donors: np.ndarray) -> np.ndarray:
        donors = np.atleast_2d(np.asarray(donors, dtype=float))
        if self.kind == "kmeans":
            d2 = np.sum((donors[:, None, :] - self.centers[None]) ** 2, axis=2)
            return np.argmin(d2, axis=1)
        if self.kind == "em":
            means = np.stack([c.mean for c in self.components])
            variances = np.stack([c.var for c in self.components])
            log_prob = (
                -0.5 * np.sum((donors[:, None, :] - means[None]) ** 2 / variances[None], axis=2)
                - 0.5 * np.sum(np.log(2.0 * np.pi * variances), axis=1)[None, :]
                + np.log(self.weights)[None, :]
            )
            return np.argmax(log_prob, axis=1)
        embeds, _ = mlp_forward(self.donor_map.encoder, donors)
        t = matchrep.soft_assign(embeds, self.donor_map.centers, self.dec_exponent)
        return np.argmax(t, axis=1)


def fit_clusterer(donors: np.ndarray, kind: str, config: TrainConfig) -> DonorClusterer:
    k = config.k
    if kind == "kmeans":
        centers, _, _ = kmeans_fit(donors, k, rng_stream(config.seed, "baselines", "kmeans"),
                                   n_init=10)
        return DonorClusterer(kind=kind, k=k, centers=centers)
    if kind == "em":
        weights, components, _, _ = gmm_em_fit(
            donors, k, rng_stream(config.seed, "baselines", "em"))
        return DonorClusterer(kind=kind, k=k, weights=weights, components=components)
    if kind == "dec":
        donor_map = matchrep.train_dec_standalone(donors, config)
        return DonorClusterer(kind=kind, k=k, donor_map=donor_map,
                              dec_exponent=config.dec_exponent)
    raise ValueError(f"unknown clusterer {kind!r}")


# ---------------------------------------------------------------------------
# Cluster-predictor baselines
# ---------------------------------------------------------------------------


def _ridge_solve(x: np.ndarray, y: np.ndarray, penalty: float):
    """Closed-form ridge with unpenalized intercept; raises penalty if singular."""
    n, d = x.shape
    x_mean = x.mean(axis=0)
    y_mean = float(y.mean())
    xc = x - x_mean
    yc = y - y_mean
    lam = penalty
    for _ in range(40):
        a = xc.T @ xc + lam * n * np.eye(d)
        try:
            w = np.linalg.solve(a, xc.T @ yc)
            break
        except np.linalg.LinAlgError:
            warnings.warn("singular ridge system; penalty raised")
            lam *= 10.0
    else:
        raise numkit.TrainingDivergedError("ridge system unsolvable")
    b = y_mean - float(x_mean @ w)
    return w, b


@dataclass
class ClusterPredictorBaseline:
    spec: BaselineSpec
    clusterer: DonorClusterer
    # linear heads: one (w, b) per cluster, or None for global-mean fallback
    linear_heads: list[tuple[np.ndarray, float] | None] | None = None
    global_mean: float = 0.0
    # nn predictor
    phi: DenseNet | None = None
    predictor: MultiHeadPredictor | None = None

    def predict_potentials(self, recipients: np.ndarray) -> np.ndarray:
        recipients = np.atleast_2d(np.asarray(recipients, dtype=float))
        if self.spec.predictor == "linear-per-head":
            cols = []
            for head in self.linear_heads:
                if head is None:
                    cols.append(np.full(recipients.shape[0], self.global_mean))
                else:
                    w, b = head
                    cols.append(recipients @ w + b)
            return np.column_stack(cols)
        xprime, _ = mlp_forward(self.phi, recipients)
        cols = []
        for head in self.predictor.heads:
            out, _ = mlp_forward(head, xprime)
            cols.append(self.predictor.outcome_mean + self.predictor.outcome_scale * out[:, 0])
        return np.column_stack(cols)

    def donor_labels(self, donors: np.ndarray) -> np.ndarray:
        return self.clusterer.assign(donors)


def _fit_linear_heads(recipients, outcomes, labels, k):
    heads = []
    for c in range(k):
        members = np.nonzero(labels == c)[0]
        if members.size < 2:
            warnings.warn(f"cluster {c} empty or singleton; falling back to global mean")
            heads.append(None)
            continue
        heads.append(_ridge_solve(recipients[members], outcomes[members], RIDGE_PENALTY))
    return heads


def _fit_nn_heads(recipients, outcomes, labels, spec: BaselineSpec):
    cfg = spec.train
    phi = init_dense_net([recipients.shape[1], cfg.hidden, cfg.hidden, cfg.rep_dim],
                         ["relu", "relu", "identity"],
                         rng_stream(cfg.seed, "baselines", "phi-init"))
    head_rng = rng_stream(cfg.seed, "baselines", "heads-init")
    heads = [init_dense_net([cfg.rep_dim, cfg.hidden, cfg.hidden, 1],
                            ["relu", "relu", "identity"], head_rng)
             for _ in range(cfg.k)]
    predictor = MultiHeadPredictor(
        heads=heads,
        outcome_mean=float(outcomes.mean()),
        outcome_scale=float(max(outcomes.std(), 1.0)),
    )
    params = phi.parameters() + [p for h in heads for p in h.parameters()]
    state = AdamState()
    rng = rng_stream(cfg.seed, "baselines", "nn-batches")
    n = len(outcomes)
    beta = cfg.beta if spec.with_rep else 0.0
    for _ in range(cfg.joint_epochs):
        for idx in matchrep._batches(n, cfg.batch_size, rng):
            xprime, cache = mlp_forward(phi, recipients[idx])
            l_f, head_grads, d_xp = matchrep.factual_loss_and_grads(
                predictor, xprime, outcomes[idx], labels[idx])
            if beta > 0.0:
                l_rep, d_xp_rep, _ = matchrep.rep_loss_and_grads(
                    xprime, labels[idx], cfg.k, cfg.min_cluster_count, cfg.kl_direction)
                d_xp = d_xp + beta * d_xp_rep
                l_f = l_f + beta * l_rep
            if not np.isfinite(l_f):
                raise numkit.TrainingDivergedError("baseline NN loss diverged")
            phi_grads, _ = mlp_backward(phi, cache, d_xp)
            grads = list(phi_grads)
            for hg in head_grads:
                grads.extend(hg)
            adam_step(params, grads, state, cfg.learning_rate)
    return phi, predictor


def fit_cluster_predictor(recipients: np.ndarray, donors: np.ndarray,
                          outcomes: np.ndarray, spec: BaselineSpec) -> ClusterPredictorBaseline:
    """Fit the donor clusterer, freeze its labels, then fit the predictor."""
    spec.validate()
    clusterer = fit_clusterer(donors, spec.clusterer, spec.train)
    labels = clusterer.assign(donors)
    model = ClusterPredictorBaseline(spec=spec, clusterer=clusterer,
                                     global_mean=float(outcomes.mean()))
    if spec.predictor == "linear-per-head":
        model.linear_heads = _fit_linear_heads(recipients, outcomes, labels, spec.train.k)
    else:
        model.phi, model.predictor = _fit_nn_heads(recipients, outcomes, labels, spec)
    return model


# ---------------------------------------------------------------------------
# Pair regressors
# ---------------------------------------------------------------------------


def _enet_cd(x: np.ndarray, y: np.ndarray, l1: float, l2: float,
             gap_tol: float = CD_DUALITY_GAP, max_sweeps: int = 10000):
    """Coordinate descent for (1/2n)||y - Xw - b||^2 + l1*||w||_1 + (l2/2)*||w||^2.

    The intercept is handled by centering. The l2 part is folded into an
    augmented lasso design so one duality-gap criterion covers both lasso
    and elastic net. Returns (w, b).
    """
    n, d = x.shape
    x_mean = x.mean(axis=0)
    y_mean = float(y.mean())
    xc = x - x_mean
    yc = y - y_mean
    if l2 > 0.0:
        xc = np.vstack([xc, np.sqrt(n * l2) * np.eye(d)])
        yc = np.concatenate([yc, np.zeros(d)])
    col_sq = np.sum(xc * xc, axis=0) / n
    w = np.zeros(d)
    resid = yc.copy()
    y_sq = float(yc @ yc)
    for _ in range(max_sweeps):
        for j in range(d):
            if col_sq[j] == 0.0:
                continue
            rho = float(xc[:, j] @ resid) / n + col_sq[j] * w[j]
            new = np.sign(rho) * max(abs(rho) - l1, 0.0) / col_sq[j]
            if new != w[j]:
                resid -= xc[:, j] * (new - w[j])
                w[j] = new
        # duality gap for the (augmented) lasso problem
        primal = float(resid @ resid) / (2 * n) + l1 * float(np.abs(w).sum())
        corr = np.abs(xc.T @ resid).max() / n if d else 0.0
        scale = min(1.0, l1 / corr) if corr > l1 else 1.0
        theta = scale * resid / n
        dual = float(theta @ yc) - n / 2 * float(theta @ theta)
        if primal - dual <= gap_tol:
            break
    b = y_mean - float(x_mean @ w)
    return w, b


def _variance_reduction_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Best (feature, threshold) by squared-error reduction, or None."""
    n, d = x.shape
    best = None
    best_score = np.inf
    for j in range(d):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        ys = y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys * ys)
        total_sum, total_sq = csum[-1], csq[-1]
        for i in range(min_leaf, n - min_leaf + 1):
            if i < n and xs[i - 1] == xs[i]:
                continue  # cannot split between equal values
            left_sum, left_sq = csum[i - 1], csq[i - 1]
            right_sum = total_sum - left_sum
            right_sq = total_sq - left_sq
            sse = (left_sq - left_sum ** 2 / i) + (right_sq - right_sum ** 2 / (n - i))
            if sse < best_score - 1e-12:
                best_score = sse
                threshold = 0.5 * (xs[i - 1] + xs[i]) if i < n else xs[i - 1]
                best = (j, float(threshold))
    return best


@dataclass
class TreeNode:
    value: float
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _grow_tree(x, y, depth, max_depth, min_leaf):
    node = TreeNode(value=float(y.mean()))
    if depth >= max_depth or len(y) < 2 * min_leaf or np.ptp(y) == 0.0:
        return node
    split = _variance_reduction_split(x, y, min_leaf)
    if split is None:
        return node
    j, thr = split
    mask = x[:, j] <= thr
    node.feature, node.threshold = j, thr
    node.left = _grow_tree(x[mask], y[mask], depth + 1, max_depth, min_leaf)
    node.right = _grow_tree(x[~mask], y[~mask], depth + 1, max_depth, min_leaf)
    return node


def _tree_predict(node: TreeNode, x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0])
    stack = [(node, np.arange(x.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if nd.is_leaf or idx.size == 0:
            out[idx] = nd.value
            continue
        mask = x[idx, nd.feature] <= nd.threshold
        stack.append((nd.left, idx[mask]))
        stack.append((nd.right, idx[~mask]))
    return out


@dataclass
class PairRegressor:
    kind: str
    weights: np.ndarray | None = None  # linear kinds
    intercept: float = 0.0
    tree: TreeNode | None = None
    net: DenseNet | None = None
    outcome_mean: float = 0.0
    outcome_scale: float = 1.0

    def predict(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.atleast_2d(np.asarray(pairs, dtype=float))
        if self.kind in ("lasso", "ridge", "elasticnet"):
            return pairs @ self.weights + self.intercept
        if self.kind == "reg-tree":
            return _tree_predict(self.tree, pairs)
        out, _ = mlp_forward(self.net, pairs)
        return self.outcome_mean + self.outcome_scale * out[:, 0]


def _fit_reg_nn(pairs: np.ndarray, outcomes: np.ndarray, config: TrainConfig) -> PairRegressor:
    net = init_dense_net([pairs.shape[1], 32, 32, 1], ["relu", "relu", "identity"],
                         rng_stream(config.seed, "baselines", "regnn-init"))
    mean = float(outcomes.mean())
    scale = float(max(outcomes.std(), 1.0))
    target = (outcomes - mean) / scale
    params = net.parameters()
    state = AdamState()
    rng = rng_stream(config.seed, "baselines", "regnn-batches")
    n = len(outcomes)
    for _ in range(config.joint_epochs):
        for idx in matchrep._batches(n, config.batch_size, rng):
            out, cache = mlp_forward(net, pairs[idx])
            err = out[:, 0] - target[idx]
            loss = float(np.mean(err * err))
            if not np.isfinite(loss):
                raise numkit.TrainingDivergedError("reg-nn loss diverged")
            grads, _ = mlp_backward(net, cache, (2.0 / len(idx)) * err[:, None])
            adam_step(params, grads, state, config.learning_rate)
    return PairRegressor(kind="reg-nn", net=net, outcome_mean=mean, outcome_scale=scale)


def fit_pair_regressor(recipients: np.ndarray, donors: np.ndarray, outcomes: np.ndarray,
                       kind: str, penalty: float = 1.0, l1_ratio: float = 0.5,
                       config: TrainConfig | None = None) -> PairRegressor:
    """Fit a direct (recipient, donor) -> outcome regressor."""
    if kind not in PAIR_KINDS:
        raise ValueError(f"kind must be one of {PAIR_KINDS}")
    pairs = np.hstack([recipients, donors])
    outcomes = np.asarray(outcomes, dtype=float)
    if kind == "ridge":
        w, b = _ridge_solve(pairs, outcomes, penalty if penalty > 0 else RIDGE_PENALTY)
        return PairRegressor(kind=kind, weights=w, intercept=b)
    if kind == "lasso":
        w, b = _enet_cd(pairs, outcomes, l1=penalty, l2=0.0)
        return PairRegressor(kind=kind, weights=w, intercept=b)
    if kind == "elasticnet":
        w, b = _enet_cd(pairs, outcomes, l1=penalty * l1_ratio, l2=penalty * (1.0 - l1_ratio))
        return PairRegressor(kind=kind, weights=w, intercept=b)
    if kind == "reg-tree":
        tree = _grow_tree(pairs, outcomes, 0, TREE_MAX_DEPTH, TREE_MIN_LEAF)
        return PairRegressor(kind=kind, tree=tree)
    return _fit_reg_nn(pairs, outcomes, config or TrainConfig())


def predict_pair(regressor: PairRegressor, x_r: np.ndarray, x_o: np.ndarray) -> float:
    pair = np.concatenate([np.asarray(x_r, dtype=float), np.asarray(x_o, dtype=float)])
    return float(regressor.predict(pair[None, :])[0])


# ---------------------------------------------------------------------------
# Serialization (same envelope style as the matchrep model files)
# ---------------------------------------------------------------------------


def _tree_to_doc(node: TreeNode) -> dict:
    doc = {"value": node.value}
    if not node.is_leaf:
        doc.update(feature=node.feature, threshold=node.threshold,
                   left=_tree_to_doc(node.left), right=_tree_to_doc(node.right))
    return doc


def _tree_from_doc(doc: dict) -> TreeNode:
    node = TreeNode(value=doc["value"])
    if "feature" in doc:
        node.feature = doc["feature"]
        node.threshold = doc["threshold"]
        node.left = _tree_from_doc(doc["left"])
        node.right = _tree_from_doc(doc["right"])
    return node


def save_pair_regressor(model: PairRegressor, path) -> None:
    doc = {"format": "baseline-v1", "kind": model.kind}
    if model.kind in ("lasso", "ridge", "elasticnet"):
        doc["weights"] = model.weights.tolist()
        doc["intercept"] = model.intercept
    elif model.kind == "reg-tree":
        doc["tree"] = _tree_to_doc(model.tree)
    else:
        doc["net"] = matchrep._net_to_doc(model.net)
        doc["outcome_mean"] = model.outcome_mean
        doc["outcome_scale"] = model.outcome_scale
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def save_cluster_predictor(model: ClusterPredictorBaseline, path) -> None:
    spec = model.spec
    doc = {
        "format": "baseline-cluster-v1",
        "spec": {"clusterer": spec.clusterer, "predictor": spec.predictor,
                 "with_rep": spec.with_rep, "train": asdict(spec.train)},
        "global_mean": model.global_mean,
    }
    cl = model.clusterer
    doc["clusterer"] = {"kind": cl.kind, "k": cl.k, "dec_exponent": cl.dec_exponent}
    if cl.kind == "kmeans":
        doc["clusterer"]["centers"] = cl.centers.tolist()
    elif cl.kind == "em":
        doc["clusterer"]["weights"] = cl.weights.tolist()
        doc["clusterer"]["components"] = [
            {"mean": c.mean.tolist(), "var": c.var.tolist()} for c in cl.components]
    else:
        doc["clusterer"]["donor_encoder"] = matchrep._net_to_doc(cl.donor_map.encoder)
        doc["clusterer"]["donor_decoder"] = matchrep._net_to_doc(cl.donor_map.decoder)
        doc["clusterer"]["centers"] = cl.donor_map.centers.tolist()
    if spec.predictor == "linear-per-head":
        doc["linear_heads"] = [None if h is None else {"w": h[0].tolist(), "b": h[1]}
                               for h in model.linear_heads]
    else:
        doc["phi"] = matchrep._net_to_doc(model.phi)
        doc["heads"] = [matchrep._net_to_doc(h) for h in model.predictor.heads]
        doc["outcome_mean"] = model.predictor.outcome_mean
        doc["outcome_scale"] = model.predictor.outcome_scale
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_cluster_predictor(path) -> ClusterPredictorBaseline:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "baseline-cluster-v1":
        raise ValueError("not a baseline-cluster-v1 model file")
    sd = doc["spec"]
    spec = BaselineSpec(clusterer=sd["clusterer"], predictor=sd["predictor"],
                        with_rep=sd["with_rep"], train=TrainConfig(**sd["train"]))
    cd = doc["clusterer"]
    clusterer = DonorClusterer(kind=cd["kind"], k=cd["k"], dec_exponent=cd["dec_exponent"])
    if cd["kind"] == "kmeans":
        clusterer.centers = np.asarray(cd["centers"], dtype=float)
    elif cd["kind"] == "em":
        clusterer.weights = np.asarray(cd["weights"], dtype=float)
        clusterer.components = [DiagGaussian(np.asarray(c["mean"]), np.asarray(c["var"]))
                                for c in cd["components"]]
    else:
        clusterer.donor_map = matchrep.DonorTypeMap(
            encoder=matchrep._net_from_doc(cd["donor_encoder"]),
            decoder=matchrep._net_from_doc(cd["donor_decoder"]),
            centers=np.asarray(cd["centers"], dtype=float),
        )
    model = ClusterPredictorBaseline(spec=spec, clusterer=clusterer,
                                     global_mean=doc["global_mean"])
    if spec.predictor == "linear-per-head":
        model.linear_heads = [None if h is None else (np.asarray(h["w"], dtype=float), h["b"])
                              for h in doc["linear_heads"]]
    else:
        model.phi = matchrep._net_from_doc(doc["phi"])
        model.predictor = MultiHeadPredictor(
            heads=[matchrep._net_from_doc(h) for h in doc["heads"]],
            outcome_mean=doc["outcome_mean"],
            outcome_scale=doc["outcome_scale"],
        )
    return model


def load_pair_regressor(path) -> PairRegressor:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "baseline-v1":
        raise ValueError("not a baseline-v1 model file")
    kind = doc["kind"]
    if kind in ("lasso", "ridge", "elasticnet"):
        return PairRegressor(kind=kind, weights=np.asarray(doc["weights"], dtype=float),
                             intercept=doc["intercept"])
    if kind == "reg-tree":
        return PairRegressor(kind=kind, tree=_tree_from_doc(doc["tree"]))
    return PairRegressor(kind=kind, net=matchrep._net_from_doc(doc["net"]),
                         outcome_mean=doc["outcome_mean"], outcome_scale=doc["outcome_scale"])
