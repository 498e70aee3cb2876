"""Hot numeric kernels: LSTM sequence recursions and the transducer lattice.

The kernels are JIT-compiled with numba by default; set
``BILINGUAL_RNNT_NO_NUMBA=1`` (or uninstall numba) to run the identical
source as plain numpy/Python. The lattice kernels match bit for bit across
the two paths; the LSTM kernels agree to float64 roundoff (BLAS vs compiled
dot products associate differently). Each path on its own is fully
deterministic, and running a prefix of the input reproduces the prefix of
the output bit-exactly. When numba is active, the interpreted fallback of a
kernel remains reachable as ``kernel.py_func`` — that is what
``benchmarks/bench_kernels.py`` times the JIT path against.
"""

import math
import os

import numpy as np

NEG_INF = -np.inf

_env = os.environ.get("BILINGUAL_RNNT_NO_NUMBA", "").strip()
NUMBA_DISABLED = _env not in ("", "0")

try:
    if NUMBA_DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAS_NUMBA = True

    def njit(fn):
        return _njit(cache=True)(fn)

except ImportError:
    HAS_NUMBA = False

    def njit(fn):
        return fn


# ---------------------------------------------------------------------------
# LSTM over a full sequence (gate order: input, forget, cell, output)
# ---------------------------------------------------------------------------


@njit
def lstm_seq_forward(x, h0, c0, wx, wh, b):
    """Run one LSTM layer over x (T, D); returns (h_seq, c_seq, gates).

    ``gates`` stores the post-activation gate values (T, 4H) needed by the
    backward pass. The per-step matvec keeps truncation bit-exact within a
    path: running a prefix of x reproduces the prefix of h_seq.
    """
    T = x.shape[0]
    H = h0.shape[0]
    h_seq = np.empty((T, H))
    c_seq = np.empty((T, H))
    gates = np.empty((T, 4 * H))
    h = h0.copy()
    c = c0.copy()
    for t in range(T):
        z = x[t] @ wx + h @ wh + b
        i = 1.0 / (1.0 + np.exp(-z[:H]))
        f = 1.0 / (1.0 + np.exp(-z[H : 2 * H]))
        g = np.tanh(z[2 * H : 3 * H])
        o = 1.0 / (1.0 + np.exp(-z[3 * H :]))
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[t, :H] = i
        gates[t, H : 2 * H] = f
        gates[t, 2 * H : 3 * H] = g
        gates[t, 3 * H :] = o
        h_seq[t] = h
        c_seq[t] = c
    return h_seq, c_seq, gates


@njit
def lstm_seq_backward(dh_out, x, h0, c0, wx, wh, h_seq, c_seq, gates):
    """Backprop through time for one LSTM layer.

    dh_out is dLoss/dh_seq (T, H). Returns gradients for
    (x, wx, wh, b, h0, c0).
    """
    T = x.shape[0]
    H = h0.shape[0]
    dx = np.zeros_like(x)
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * H)
    dh = np.zeros(H)
    dc = np.zeros(H)
    dz = np.empty(4 * H)
    for t in range(T - 1, -1, -1):
        i = gates[t, :H]
        f = gates[t, H : 2 * H]
        g = gates[t, 2 * H : 3 * H]
        o = gates[t, 3 * H :]
        c_prev = c_seq[t - 1] if t > 0 else c0
        h_prev = h_seq[t - 1] if t > 0 else h0
        tc = np.tanh(c_seq[t])
        dh_t = dh + dh_out[t]
        do = dh_t * tc
        dc_t = dc + dh_t * o * (1.0 - tc * tc)
        dz[:H] = (dc_t * g) * i * (1.0 - i)
        dz[H : 2 * H] = (dc_t * c_prev) * f * (1.0 - f)
        dz[2 * H : 3 * H] = (dc_t * i) * (1.0 - g * g)
        dz[3 * H :] = do * o * (1.0 - o)
        dx[t] = wx @ dz
        dwx += np.outer(x[t], dz)
        dwh += np.outer(h_prev, dz)
        db += dz
        dh = wh @ dz
        dc = dc_t * f
    return dx, dwx, dwh, db, dh, dc


# ---------------------------------------------------------------------------
# Transducer alignment lattice (forward/backward DP in the log domain)
# ---------------------------------------------------------------------------


@njit
def logadd(a, b):
    # max + log1p(exp(-|delta|)); -inf-safe
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit
def lattice_alpha(logp, labels, blank):
    """Forward DP over the (T, U+1) lattice; returns (alpha, log_likelihood).

    alpha[t, u] is the log mass of all partial alignments that arrive at
    node (t, u), i.e. have consumed t frames' worth of blanks and emitted
    labels[:u], before the node's own emission.
    """
    T, U1, _ = logp.shape
    U = U1 - 1
    alpha = np.full((T, U1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(1, T):
        alpha[t, 0] = alpha[t - 1, 0] + logp[t - 1, 0, blank]
    for u in range(1, U1):
        alpha[0, u] = alpha[0, u - 1] + logp[0, u - 1, labels[u - 1]]
    for t in range(1, T):
        for u in range(1, U1):
            a = alpha[t - 1, u] + logp[t - 1, u, blank]
            b = alpha[t, u - 1] + logp[t, u - 1, labels[u - 1]]
            alpha[t, u] = logadd(a, b)
    ll = alpha[T - 1, U] + logp[T - 1, U, blank]
    return alpha, ll


@njit
def lattice_beta(logp, labels, blank):
    """Backward DP; beta[t, u] = log P(completing the alignment from (t, u))."""
    T, U1, _ = logp.shape
    U = U1 - 1
    beta = np.full((T, U1), NEG_INF)
    beta[T - 1, U] = logp[T - 1, U, blank]
    for t in range(T - 2, -1, -1):
        beta[t, U] = beta[t + 1, U] + logp[t, U, blank]
    for u in range(U - 1, -1, -1):
        beta[T - 1, u] = beta[T - 1, u + 1] + logp[T - 1, u, labels[u]]
    for t in range(T - 2, -1, -1):
        for u in range(U - 1, -1, -1):
            a = logp[t, u, blank] + beta[t + 1, u]
            b = logp[t, u, labels[u]] + beta[t, u + 1]
            beta[t, u] = logadd(a, b)
    return beta


@njit
def lattice_grad(logp, labels, blank):
    """Occupancy gradient of the negative log-likelihood w.r.t. logp.

    grad[t, u, k] = -P(alignment emits k at node (t, u) | labels). Returns
    (log_likelihood, grad); grad is all-zero when the label sequence has
    zero probability (ll == -inf).
    """
    T, U1, _ = logp.shape
    U = U1 - 1
    alpha, ll = lattice_alpha(logp, labels, blank)
    grad = np.zeros_like(logp)
    if ll == NEG_INF:
        return ll, grad
    beta = lattice_beta(logp, labels, blank)
    for t in range(T):
        for u in range(U1):
            if alpha[t, u] == NEG_INF:
                continue
            if t + 1 < T:
                bnext = beta[t + 1, u]
            elif u == U:
                bnext = 0.0
            else:
                bnext = NEG_INF
            if bnext != NEG_INF:
                grad[t, u, blank] -= math.exp(
                    alpha[t, u] + logp[t, u, blank] + bnext - ll
                )
            if u < U and beta[t, u + 1] != NEG_INF:
                k = labels[u]
                grad[t, u, k] -= math.exp(
                    alpha[t, u] + logp[t, u, k] + beta[t, u + 1] - ll
                )
    return ll, grad


def warmup():
    """Trigger JIT compilation with tiny inputs (no-op on the numpy path)."""
    x = np.zeros((2, 3))
    h0 = np.zeros(2)
    c0 = np.zeros(2)
    wx = np.zeros((3, 8))
    wh = np.zeros((2, 8))
    b = np.zeros(8)
    h_seq, c_seq, gates = lstm_seq_forward(x, h0, c0, wx, wh, b)
    lstm_seq_backward(np.zeros((2, 2)), x, h0, c0, wx, wh, h_seq, c_seq, gates)
    logp = np.log(np.full((2, 2, 3), 1.0 / 3.0))
    labels = np.array([1], dtype=np.int64)
    lattice_alpha(logp, labels, 0)
    lattice_beta(logp, labels, 0)
    lattice_grad(logp, labels, 0)
