"""Shared test utilities: finite differences and an independent LSTM reference."""
import numpy as np


def sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def reference_lstm(w_ih, w_hh, b, xs, h0=None, c0=None):
    """Plain per-timestep LSTM for one sequence ``xs`` of shape (T, I).

    Written directly from the gate equations, one gate at a time, so it
    shares no code with the library implementation.
    """
    H = w_hh.shape[1]
    h = np.zeros(H) if h0 is None else np.array(h0, dtype=float)
    c = np.zeros(H) if c0 is None else np.array(c0, dtype=float)
    Wi, Wf, Wo, Wg = (w_ih[k * H:(k + 1) * H] for k in range(4))
    Ui, Uf, Uo, Ug = (w_hh[k * H:(k + 1) * H] for k in range(4))
    bi, bf, bo, bg = (b[k * H:(k + 1) * H] for k in range(4))
    out = []
    for x in xs:
        i = sigmoid(Wi @ x + Ui @ h + bi)
        f = sigmoid(Wf @ x + Uf @ h + bf)
        o = sigmoid(Wo @ x + Uo @ h + bo)
        g = np.tanh(Wg @ x + Ug @ h + bg)
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def central_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b, floor: float = 1e-6) -> float:
    """Largest elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def brute_metrics(y_true, y_pred, scores) -> dict:
    """Metrics by direct counting over every window and every (pos, neg) pair."""
    tp = fp = tn = fn = 0
    for t, p in zip(y_true, y_pred):
        if t and p:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    n = tp + fp + tn + fn
    pr = tp / (tp + fp) if tp + fp > 0 else 0.0
    re = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * pr * re / (pr + re) if pr + re > 0 else 0.0
    p_o = (tp + tn) / n
    # chance agreement from the row and column marginals
    p_yes = ((tp + fn) / n) * ((tp + fp) / n)
    p_no = ((tn + fp) / n) * ((tn + fn) / n)
    p_e = p_yes + p_no
    ck = (p_o - p_e) / (1 - p_e) if p_e != 1 else 0.0
    pos = [s for s, t in zip(scores, y_true) if t]
    neg = [s for s, t in zip(scores, y_true) if not t]
    if pos and neg:
        hits = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
        auc = hits / (len(pos) * len(neg))
    else:
        auc = 0.5
    return {"accuracy": p_o, "precision": pr, "recall": re, "f1": f1,
            "cohen_kappa": ck, "auc": auc}


def random_metric_case(rng, n_max: int = 20):
    """Random (labels, predictions, scores) of length 1..n_max with frequent ties and one-class draws."""
    n = int(rng.integers(1, n_max + 1))
    mode = rng.integers(4)
    if mode == 0:
        y = np.zeros(n, int)
    elif mode == 1:
        y = np.ones(n, int)
    else:
        y = rng.integers(0, 2, n)
    p = rng.integers(0, 2, n) if rng.random() > 0.2 else np.full(n, rng.integers(0, 2))
    s = rng.integers(0, 5, n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
    return y, p, s


def inversion_objective(model, x, z, gamma):
    """(1 - gamma) * sum|G(z) - x| + gamma * sum|f(G(z)) - f(x)| from forward passes only."""
    gz = model.generate(z[None])[0]
    fgz = model.features(gz[None])[0]
    fx = model.features(np.asarray(x)[None])[0]
    return (1 - gamma) * np.sum(np.abs(gz - x)) + gamma * np.sum(np.abs(fgz - fx))


def inversion_gradient(model, x, z0, gamma, invert_window, config_cls, lr=1e-3):
    """The gradient the library applied to z, recovered from one descent step."""
    cfg = config_cls(iterations=2, gamma=gamma, lr_z=lr)
    out = invert_window(model, x, cfg, np.random.default_rng(0), z0=z0.copy())
    return (z0 - out.final_z) / lr
