"""Latent-space inversion of real windows and reconstruction-based anomaly scores."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import corenn as nn
from .corenn import Tape
from .gan import GanModel


class InversionError(RuntimeError):
    pass


@dataclass
class InversionConfig:
    iterations: int = 50
    gamma: float = 0.1
    lr_z: float = 0.02
    seed: int = 0
    restarts: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.lr_z <= 0:
            raise ValueError("lr_z must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class InversionResult:
    final_z: np.ndarray
    residual_loss: float
    discrimination_loss: float
    combined_loss: float
    loss_trace: list[float]
    best_loss: float


@dataclass
class AnomalyScoreSeries:
    """One score per scoring window, in window order.  Higher = more anomalous."""

    start_index: np.ndarray
    start_time: list
    end_time: list
    scores: np.ndarray
    residual: Optional[np.ndarray] = None
    discrimination: Optional[np.ndarray] = None
    model: str = "lstm_gan"

    def __len__(self):
        return len(self.scores)

    def to_csv(self, path, with_model: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            write_scores_csv(fh, self, with_model)


def write_scores_csv(fh, series: AnomalyScoreSeries, with_model: bool = False) -> None:
    w = csv.writer(fh, lineterminator="\n")
    header = ["start_index", "start_time", "end_time", "residual_loss",
              "discrimination_loss", "anomaly_score"]
    if with_model:
        header = ["model"] + header
    w.writerow(header)
    n = len(series)
    res = series.residual if series.residual is not None else [None] * n
    dis = series.discrimination if series.discrimination is not None else [None] * n
    for k in range(n):
        row = [int(series.start_index[k]), _fmt_time(series.start_time[k]),
               _fmt_time(series.end_time[k]), _fmt(res[k]), _fmt(dis[k]),
               repr(float(series.scores[k]))]
        if with_model:
            row = [series.model] + row
        w.writerow(row)


def read_scores_csv(path) -> AnomalyScoreSeries:
    import datetime as dt
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    parse = lambda s: dt.datetime.strptime(s, "%Y-%m-%d %H:%M:%S")
    opt = lambda key: (np.array([float(r[key]) for r in rows])
                       if rows and rows[0].get(key) not in ("", None) else None)
    return AnomalyScoreSeries(
        start_index=np.array([int(r["start_index"]) for r in rows], dtype=np.int64),
        start_time=[parse(r["start_time"]) for r in rows],
        end_time=[parse(r["end_time"]) for r in rows],
        scores=np.array([float(r["anomaly_score"]) for r in rows]),
        residual=opt("residual_loss"),
        discrimination=opt("discrimination_loss"),
        model=rows[0]["model"] if rows and "model" in rows[0] else "lstm_gan",
    )


def _fmt(v):
    return "" if v is None else repr(float(v))


def _fmt_time(t):
    return t.strftime("%Y-%m-%d %H:%M:%S") if hasattr(t, "strftime") else str(t)


def residual_loss(x, gz) -> float:
    x, gz = nn.as_tensor(x), nn.as_tensor(gz)
    if x.shape != gz.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {gz.shape}")
    return float(np.sum(np.abs(x - gz)))


def discrimination_loss(fx, fgz) -> float:
    fx, fgz = nn.as_tensor(fx), nn.as_tensor(fgz)
    if fx.shape != fgz.shape:
        raise ValueError(f"feature shape mismatch: {fx.shape} vs {fgz.shape}")
    return float(np.sum(np.abs(fx - fgz)))


def combined_loss(l_r: float, l_d: float, gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return (1.0 - gamma) * l_r + gamma * l_d


def feature_map(model: GanModel, x) -> np.ndarray:
    """Per-timestep hidden states of the discriminator LSTM, shape (s_w, hidden)."""
    return model.features(nn.as_tensor(x))


def _invert(model: GanModel, X: np.ndarray, cfg: InversionConfig, z0: np.ndarray):
    """Gradient descent on z for a batch of windows; windows do not interact."""
    gamma = cfg.gamma
    fx = model.features(X)
    z = z0.copy()
    B = len(X)
    trace = np.empty((cfg.iterations, B))
    for lam in range(cfg.iterations):
        tape = Tape()
        zv = tape.watch(z)
        gz = model.generate_on(tape, zv)
        _, fgz = model.discriminate_on(tape, gz)
        res = nn.sum_(nn.absolute(nn.sub(gz, X)), axis=1)
        dis = nn.sum_(nn.reshape(nn.absolute(nn.sub(fgz, fx)), (B, -1)), axis=1)
        per_window = nn.add(nn.mul(res, 1.0 - gamma), nn.mul(dis, gamma))
        combined = (1.0 - gamma) * res.value + gamma * dis.value
        if not np.all(np.isfinite(combined)):
            bad = int(np.flatnonzero(~np.isfinite(combined))[0])
            raise InversionError(f"non-finite inversion loss at iteration {lam + 1} (window {bad})")
        trace[lam] = combined
        if lam == cfg.iterations - 1:
            return z, res.value.copy(), dis.value.copy(), combined, trace
        nn.backward(tape, nn.sum_(per_window))
        z = z - cfg.lr_z * zv.grad


def invert_batch(model: GanModel, X, cfg: InversionConfig, rng: np.random.Generator,
                 z0=None) -> list[InversionResult]:
    """Invert several windows at once; each window gets its own independent z."""
    X = np.atleast_2d(nn.as_tensor(X))
    n = len(X)
    best = None
    for r in range(cfg.restarts):
        if z0 is not None and r == 0:
            start = nn.as_tensor(z0).reshape((n, model.config.s_w, model.config.latent_dim))
        else:
            start = model.prior.sample(n, rng)
        out = _invert(model, X, cfg, start)
        if best is None:
            best = out
            continue
        # keep, per window, the restart with the lowest final loss
        better = out[3] < best[3]
        best = (np.where(better[:, None, None], out[0], best[0]),
                np.where(better, out[1], best[1]),
                np.where(better, out[2], best[2]),
                np.where(better, out[3], best[3]),
                np.where(better[None, :], out[4], best[4]))
    z, res, dis, comb, trace = best
    results = []
    for k in range(len(X)):
        results.append(InversionResult(final_z=z[k], residual_loss=float(res[k]),
                                       discrimination_loss=float(dis[k]), combined_loss=float(comb[k]),
                                       loss_trace=[float(v) for v in trace[:, k]],
                                       best_loss=float(trace[:, k].min())))
    return results


def invert_window(model: GanModel, x, cfg: InversionConfig, rng: np.random.Generator,
                  z0=None) -> InversionResult:
    return invert_batch(model, nn.as_tensor(x)[None], cfg, rng, z0=z0)[0]


def anomaly_scores(model: GanModel, windows, cfg: InversionConfig,
                   batch_size: int = 64) -> AnomalyScoreSeries:
    """Score every window by the combined inversion loss at the final iterate.

    Windows are inverted in batches; each has its own z drawn in window order
    from a generator seeded by ``cfg.seed``, so the result is deterministic.
    """
    X = windows.values_array()
    if X.shape[1] != model.config.s_w:
        raise nn.ConfigurationError(
            f"window length {X.shape[1]} does not match model s_w {model.config.s_w}")
    rng = np.random.default_rng([cfg.seed, 2])
    results: list[InversionResult] = []
    for start in range(0, len(X), batch_size):
        try:
            results += invert_batch(model, X[start:start + batch_size], cfg, rng)
        except InversionError as exc:
            raise InversionError(f"windows {start}..{start + batch_size - 1}: {exc}") from exc
    res = np.array([r.residual_loss for r in results])
    dis = np.array([r.discrimination_loss for r in results])
    return AnomalyScoreSeries(
        start_index=np.array([w.start_index for w in windows.windows], dtype=np.int64),
        start_time=[w.start_time for w in windows.windows],
        end_time=[w.end_time for w in windows.windows],
        scores=np.array([r.combined_loss for r in results]),
        residual=res,
        discrimination=dis,
    )
