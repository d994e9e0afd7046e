"""Compiled inner loops of the LSTM recurrence.

Arrays are time-major and C-contiguous.  Gate blocks along the last axis
are ordered input, forget, output, candidate.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def lstm_cell_kernel(gt, c_prev, c_out):
    """One recurrence step after ``tanh`` was applied to the pre-activations.

    The input, forget and output blocks of ``gt`` hold tanh(a/2) and are
    turned into sigmoid(a) = (1 + tanh(a/2)) / 2 in place.  The new cell
    state is written to ``c_out``.
    """
    B, G = gt.shape
    H = G // 4
    for n in range(B):
        for k in range(H):
            i = 0.5 + 0.5 * gt[n, k]
            f = 0.5 + 0.5 * gt[n, H + k]
            gt[n, k] = i
            gt[n, H + k] = f
            gt[n, 2 * H + k] = 0.5 + 0.5 * gt[n, 2 * H + k]
            c_out[n, k] = f * c_prev[n, k] + i * gt[n, 3 * H + k]


@njit(cache=True)
def lstm_backward_kernel(dhs, gates, cells, tanh_c, c0, whh):
    """Back-propagate hidden-state gradients ``dhs`` (T, B, H) through time.
    Returns the gradient with respect to the gate pre-activations."""
    T, B, H = dhs.shape
    d_pre = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        for n in range(B):
            for k in range(H):
                i = gates[t, n, k]
                f = gates[t, n, H + k]
                o = gates[t, n, 2 * H + k]
                g = gates[t, n, 3 * H + k]
                tc = tanh_c[t, n, k]
                cp = cells[t - 1, n, k] if t > 0 else c0[n, k]
                dh = dhs[t, n, k] + dh_next[n, k]
                dc = dh * o * (1.0 - tc * tc) + dc_next[n, k]
                d_pre[t, n, k] = dc * g * i * (1.0 - i)
                d_pre[t, n, H + k] = dc * cp * f * (1.0 - f)
                d_pre[t, n, 2 * H + k] = dh * tc * o * (1.0 - o)
                d_pre[t, n, 3 * H + k] = dc * i * (1.0 - g * g)
                dc_next[n, k] = dc * f
        dh_next = d_pre[t] @ whh
    return d_pre
