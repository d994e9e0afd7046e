"""Reference detectors: isolation forest, diagonal GMM, next-step LSTM predictor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import digamma, logsumexp

from . import corenn as nn
from .corenn import LstmLayerSpec, ParamSet, Tape
from .inversion import AnomalyScoreSeries

EULER_GAMMA = 0.5772156649015329


def _series_from(windows, scores, model: str) -> AnomalyScoreSeries:
    return AnomalyScoreSeries(
        start_index=np.array([w.start_index for w in windows.windows], dtype=np.int64),
        start_time=[w.start_time for w in windows.windows],
        end_time=[w.end_time for w in windows.windows],
        scores=np.asarray(scores, dtype=np.float64),
        model=model,
    )


# --- isolation forest ---------------------------------------------------------

def harmonic(n: int) -> float:
    return float(digamma(n + 1) + EULER_GAMMA)


def average_path_length(n: int) -> float:
    """c(n) = 2 H(n-1) - 2 (n-1) / n, the mean unsuccessful-search depth in a BST."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass
class IsoForestConfig:
    tree_count: int = 100
    subsample_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.tree_count < 1:
            raise ValueError("tree_count must be >= 1")
        if self.subsample_size < 2:
            raise ValueError("subsample_size must be >= 2")


class _Node:
    __slots__ = ("feature", "split", "left", "right", "size")

    def __init__(self, feature=-1, split=0.0, left=None, right=None, size=0):
        self.feature, self.split, self.left, self.right, self.size = feature, split, left, right, size


def _build_tree(X: np.ndarray, depth: int, limit: int, rng: np.random.Generator) -> _Node:
    n = len(X)
    if depth >= limit or n <= 1:
        return _Node(size=n)
    lo, hi = X.min(axis=0), X.max(axis=0)
    usable = np.flatnonzero(hi > lo)
    if usable.size == 0:
        return _Node(size=n)
    feature = int(usable[rng.integers(usable.size)])
    split = rng.uniform(lo[feature], hi[feature])
    mask = X[:, feature] < split
    return _Node(feature, split,
                 _build_tree(X[mask], depth + 1, limit, rng),
                 _build_tree(X[~mask], depth + 1, limit, rng))


def _path_length(x: np.ndarray, node: _Node) -> float:
    depth = 0
    while node.left is not None:
        node = node.left if x[node.feature] < node.split else node.right
        depth += 1
    return depth + average_path_length(node.size)


class IsolationForest:
    def __init__(self, config: IsoForestConfig = IsoForestConfig()):
        self.config = config
        self.trees: list[_Node] = []
        self.sample_size = 0

    def fit(self, X) -> "IsolationForest":
        X = np.asarray(X, dtype=np.float64)
        if len(X) < 2:
            raise ValueError("isolation forest needs at least 2 samples")
        rng = np.random.default_rng([self.config.seed, 3])
        psi = min(self.config.subsample_size, len(X))
        limit = math.ceil(math.log2(psi))
        self.sample_size = psi
        self.trees = []
        for _ in range(self.config.tree_count):
            idx = rng.choice(len(X), size=psi, replace=False)
            self.trees.append(_build_tree(X[idx], 0, limit, rng))
        return self

    def mean_path_length(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.array([np.mean([_path_length(x, t) for t in self.trees]) for x in X])

    def score(self, X) -> np.ndarray:
        """2^(-E[h(x)] / c(psi)); values near 1 are anomalous."""
        return 2.0 ** (-self.mean_path_length(X) / average_path_length(self.sample_size))


def iso_forest_score(windows, cfg: IsoForestConfig = IsoForestConfig(), fit_windows=None) -> AnomalyScoreSeries:
    """Fit on ``fit_windows`` (default: the scored windows) and score ``windows``."""
    X = windows.values_array()
    if len(X) < 2:
        raise ValueError("isolation forest scoring needs at least 2 windows")
    train = X if fit_windows is None else fit_windows.values_array()
    forest = IsolationForest(cfg).fit(train)
    return _series_from(windows, forest.score(X), "isoforest")


# --- Gaussian mixture -----------------------------------------------------------

@dataclass
class GmmConfig:
    k: int = 3
    max_iter: int = 100
    tol: float = 1e-6
    covariance_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.covariance_floor <= 0:
            raise ValueError("covariance_floor must be positive")


@dataclass
class GmmModel:
    means: np.ndarray       # (K, D)
    variances: np.ndarray   # (K, D) diagonal covariances
    weights: np.ndarray     # (K,)
    log_likelihoods: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    converged: bool = False

    def log_density(self, X) -> np.ndarray:
        """log p(x) under the mixture, one value per row of X."""
        return logsumexp(_component_log_prob(np.atleast_2d(X), self), axis=1)


def _component_log_prob(X: np.ndarray, m: GmmModel) -> np.ndarray:
    # log(pi_k) + log N(x | mu_k, diag(var_k)), shape (N, K)
    D = X.shape[1]
    log_det = np.sum(np.log(m.variances), axis=1)
    maha = np.stack([np.sum((X - mu) ** 2 / var, axis=1) for mu, var in zip(m.means, m.variances)], axis=1)
    with np.errstate(divide="ignore"):
        log_w = np.log(m.weights)
    return log_w - 0.5 * (D * math.log(2 * math.pi) + log_det + maha)


def gmm_fit(windows, cfg: GmmConfig = GmmConfig()) -> GmmModel:
    """Expectation-maximisation for a diagonal-covariance Gaussian mixture."""
    X = windows.values_array() if hasattr(windows, "values_array") else np.atleast_2d(np.asarray(windows, float))
    N, D = X.shape
    if N < cfg.k:
        raise ValueError(f"need at least k={cfg.k} windows, got {N}")
    rng = np.random.default_rng([cfg.seed, 4])
    init = rng.choice(N, size=cfg.k, replace=False)
    model = GmmModel(means=X[init].copy(),
                     variances=np.tile(np.maximum(X.var(axis=0), cfg.covariance_floor), (cfg.k, 1)),
                     weights=np.full(cfg.k, 1.0 / cfg.k))
    prev = -np.inf
    for it in range(cfg.max_iter):
        # E step
        logp = _component_log_prob(X, model)
        total = logsumexp(logp, axis=1)
        resp = np.exp(logp - total[:, None])
        # M step
        nk = resp.sum(axis=0)
        empty = nk <= 1e-12
        nk_safe = np.where(empty, 1.0, nk)
        means = (resp.T @ X) / nk_safe[:, None]
        variances = np.stack([resp[:, k] @ (X - means[k]) ** 2 for k in range(cfg.k)]) / nk_safe[:, None]
        means[empty] = model.means[empty]
        variances[empty] = model.variances[empty]
        low = variances < cfg.covariance_floor
        if low.any():
            model.warnings.append(
                f"iteration {it}: {int(low.sum())} variance entries clamped to {cfg.covariance_floor}")
            variances = np.maximum(variances, cfg.covariance_floor)
        model.means, model.variances = means, variances
        model.weights = nk / nk.sum()
        ll = float(model.log_density(X).sum())
        model.log_likelihoods.append(ll)
        if ll - prev < cfg.tol:
            model.converged = True
            break
        prev = ll
    return model


def gmm_score(model: GmmModel, windows) -> AnomalyScoreSeries:
    """Negative log-likelihood of each window; thresholds are applied later."""
    return _series_from(windows, -model.log_density(windows.values_array()), "gmm")


# --- next-step LSTM predictor -------------------------------------------------------

@dataclass
class VanLstmConfig:
    hidden: tuple = (256, 512)
    dropout: float = 0.2
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("invalid epochs / lr / batch_size")


class VanLstm:
    """Stacked LSTM mapping the previous ``s_w`` values to the next one."""

    def __init__(self, cfg: VanLstmConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 5])
        self.params = ParamSet()
        sizes = (1,) + cfg.hidden
        self.specs = [LstmLayerSpec(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        for k, spec in enumerate(self.specs):
            nn.init_lstm(self.params, f"lstm{k}", spec, rng)
        nn.init_dense(self.params, "head", cfg.hidden[-1], 1, rng)
        self.loss_history: list[float] = []

    def _predict_on(self, tape: Tape, contexts: np.ndarray, trainable: bool,
                    rng: Optional[np.random.Generator]) -> nn.Var:
        h = tape.constant(contexts[..., None])
        for k, spec in enumerate(self.specs):
            h = nn.lstm_layer(spec, *(tape.param(self.params, f"lstm{k}.{n}", trainable)
                                      for n in ("w_ih", "w_hh", "b")), h)
            h = nn.dropout(h, self.cfg.dropout, rng)
        last = nn.take_last(h, axis=1)
        out = nn.dense_layer(tape.param(self.params, "head.w", trainable),
                             tape.param(self.params, "head.b", trainable), last)
        return nn.reshape(out, (len(contexts),))

    def predict(self, contexts) -> np.ndarray:
        return self._predict_on(Tape(), np.atleast_2d(contexts), False, None).value

    def fit(self, contexts: np.ndarray, targets: np.ndarray) -> "VanLstm":
        rng = np.random.default_rng([self.cfg.seed, 6])
        m = self.cfg.batch_size
        for epoch in range(self.cfg.epochs):
            order = rng.permutation(len(contexts))
            total = 0.0
            for start in range(0, len(order), m):
                idx = order[start:start + m]
                tape = Tape()
                pred = self._predict_on(tape, contexts[idx], True, rng)
                loss = nn.mse_loss(pred, targets[idx])
                if not math.isfinite(float(loss.value)):
                    raise RuntimeError(f"non-finite VanLstm loss at epoch {epoch + 1}")
                nn.backward(tape, loss)
                nn.sgd_step(self.params, self.cfg.lr)
                total += float(loss.value) * len(idx)
            self.loss_history.append(total / len(order))
        return self


def next_step_contexts(values: np.ndarray, s_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Context of the ``s_w`` preceding values for every t >= 1.

    Early positions are left-padded with the first value so every point from
    t = 1 onward gets a prediction.
    """
    padded = np.concatenate((np.full(s_w - 1, values[0]), values))
    idx = np.arange(1, len(values))
    ctx = np.stack([padded[t - 1:t - 1 + s_w] for t in idx])
    return ctx, values[idx]


def van_lstm_score(series, cfg: VanLstmConfig, s_w: int, windows, return_model: bool = False):
    """Train on next-step prediction, then score each window by its mean |error|.

    ``series`` must already be normalised; ``windows`` are the scoring windows.
    """
    values = np.asarray(series.values, dtype=np.float64)
    ctx, targets = next_step_contexts(values, s_w)
    model = VanLstm(cfg).fit(ctx, targets)
    errors = np.full(len(values), np.nan)
    for start in range(0, len(ctx), 256):
        errors[1 + start:1 + start + 256] = np.abs(model.predict(ctx[start:start + 256])
                                                   - targets[start:start + 256])
    scores = []
    for w in windows.windows:
        seg = errors[w.start_index:w.start_index + len(w.values)]
        scores.append(float(np.nanmean(seg)))
    out = _series_from(windows, scores, "vanlstm")
    return (out, model) if return_model else out
