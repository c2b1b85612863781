"""Shared test oracles, implemented independently of the library kernels."""

import numpy as np


def unrolled_reference(u, delta, b_seq, c_seq, trans):
    """Closed-form scan output: each step as an explicit weighted sum.

    H_k = sum_{j<=k} (prod_{i=j+1..k} A_bar_i) * (delta_j B_j u_j), evaluated
    with cumulative products instead of the recurrence, so it shares no code
    path with the sequential kernel.
    """
    u = np.asarray(u, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    b_seq = np.asarray(b_seq, dtype=np.float64)
    c_seq = np.asarray(c_seq, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    bsz, t, d = u.shape
    s = trans.shape[1]
    a_bar = np.exp(np.maximum(delta[..., None] * trans, -60.0))
    dbu = (delta * u)[..., None] * b_seq[..., None, :]
    y = np.empty((bsz, t, d), dtype=np.float64)
    for bi in range(bsz):
        for k in range(t):
            weights = np.ones((k + 1, d, s))
            if k > 0:
                weights[:k] = np.cumprod(a_bar[bi, k:0:-1], axis=0)[::-1]
            h_k = (weights * dbu[bi, :k + 1]).sum(axis=0)
            y[bi, k] = h_k @ c_seq[bi, k]
    return y


def rk4_hold_response(a, b, delta, x0=0.0, n_sub=1024):
    """Integrate dx/dt = a x + b (input held at 1) over one step with RK4."""
    h = delta / n_sub
    x = float(x0)
    for _ in range(n_sub):
        k1 = a * x + b
        k2 = a * (x + 0.5 * h * k1) + b
        k3 = a * (x + 0.5 * h * k2) + b
        k4 = a * (x + h * k3) + b
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def random_scan_instance(gen, t, d=3, n_s=2, batch=1):
    """Well-conditioned random scan inputs (stable hold, bounded growth)."""
    u = gen.standard_normal((batch, t, d))
    delta = gen.uniform(0.05, 0.5, (batch, t, d))
    b_seq = gen.standard_normal((batch, t, n_s))
    c_seq = gen.standard_normal((batch, t, n_s))
    trans = -gen.uniform(0.3, 3.0, (d, n_s))
    return u, delta, b_seq, c_seq, trans
