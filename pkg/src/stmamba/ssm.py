"""Selective state-space layer: discretization, scan kernels, and the layer forward.

The recurrence operates on a diagonal transition matrix, so the hidden state
is a (channels, states) grid updated elementwise:

    H_k = A_bar_k * H_{k-1} + (delta_k * B_k * u_k)
    y_k[i] = sum_s C_k[s] * H_k[i, s]

with A_bar_k = exp(delta_k * A) (zero-order hold).  The step size and the
input/output maps are produced from the sequence itself, which is what makes
the scan selective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .embedding import xavier_uniform
from .errors import NumericError, ShapeError, StabilityError
from .tensor import (
    Tensor,
    _active_tape,
    _apply,
    add,
    as_tensor,
    concat,
    exp,
    matmul,
    mul,
    neg,
    reshape,
    silu,
    softplus,
    sum_axis,
    take_index,
)

# Floor for the exponent of the discrete transition.  exp(-60) ~ 8.8e-27 is
# far below f32 resolution, so clamping there changes nothing numerically but
# keeps the exponential away from denormal territory.
EXP_FLOOR = -60.0


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

def zoh_exact(a: float, b: float, delta: float) -> tuple[float, float]:
    """Exact zero-order-hold discretization of the scalar system (a, b).

    Returns (a_d, b_d) with a_d = exp(a*delta) and b_d = (exp(a*delta)-1)/a * b.
    At a == 0 the closed form degenerates; the limit b_d = delta*b is used
    (documented branch, not an error).
    """
    delta = float(delta)
    if delta <= 0.0:
        raise ValueError(f"step size must be positive, got {delta}")
    a = float(a)
    b = float(b)
    if a == 0.0:
        return 1.0, delta * b
    a_d = np.exp(a * delta)
    b_d = np.expm1(a * delta) / a * b
    return float(a_d), float(b_d)


def discretize(A: np.ndarray, B_k: np.ndarray, delta_k: np.ndarray):
    """First-order (Euler) discretization of one step of the diagonal system.

    A: (D, S) continuous transition (entries must be <= 0 after scaling),
    B_k: (S,) input map for this step, delta_k: (D,) per-channel step sizes.
    Returns (A_bar, B_bar) of shape (D, S): A_bar = exp(delta*A) exactly,
    B_bar = delta*B which is the O(delta) approximation of the exact hold.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    delta_k = np.atleast_1d(np.asarray(delta_k, dtype=np.float64))
    B_k = np.atleast_1d(np.asarray(B_k, dtype=np.float64))
    if A.shape[0] != delta_k.shape[0]:
        raise ShapeError(
            f"transition rows {A.shape} do not match step sizes {delta_k.shape}"
        )
    if A.shape[1] != B_k.shape[0]:
        raise ShapeError(f"transition cols {A.shape} do not match input map {B_k.shape}")
    da = delta_k[:, None] * A
    if np.any(da > 0.0):
        raise StabilityError(
            "positive transition exponent: delta*A must be <= 0 for a stable hold"
        )
    a_bar = np.exp(np.maximum(da, EXP_FLOOR))
    b_bar = delta_k[:, None] * B_k[None, :]
    return a_bar, b_bar


def _discretize_all(u, delta, b_seq, A):
    """Vectorized hold over a whole batch of sequences.

    u, delta: (B, T, D); b_seq: (B, T, S); A: (D, S).
    Returns a_bar, dbu of shape (B, T, D, S) and the clamp mask for backward.
    """
    da = delta[..., None] * A
    if np.any(da > 0.0):
        raise StabilityError(
            "positive transition exponent: step sizes and transition signs"
            " produce an unstable hold"
        )
    a_bar = np.exp(np.maximum(da, EXP_FLOOR))
    dbu = (delta * u)[..., None] * b_seq[..., None, :]
    return a_bar, dbu


# ---------------------------------------------------------------------------
# plain-array scan kernels
# ---------------------------------------------------------------------------

def scan_sequential(u, delta, b_seq, c_seq, A, save_states=False, check_finite=True):
    """Run the diagonal recurrence left to right.

    u, delta: (B, T, D); b_seq, c_seq: (B, T, S); A: (D, S).  Returns
    (y, states) with y (B, T, D) and states (B, T, D, S) when requested.
    """
    u = np.asarray(u)
    bsz, t, d = u.shape
    s = A.shape[-1]
    a_bar, dbu = _discretize_all(u, delta, b_seq, A)
    h = np.zeros((bsz, d, s), dtype=u.dtype)
    y = np.empty_like(u)
    states = np.empty((bsz, t, d, s), dtype=u.dtype) if save_states else None
    for k in range(t):
        h = a_bar[:, k] * h + dbu[:, k]
        if check_finite and not np.isfinite(h).all():
            raise NumericError(f"scan state became non-finite at step {k}")
        if save_states:
            states[:, k] = h
        y[:, k] = np.einsum("bs,bds->bd", c_seq[:, k], h)
    return y, states


def compose_chunks(first, second):
    """Associative composition of two affine chunk summaries.

    A chunk acting on an entry state H is H -> p*H + q (elementwise).  Running
    ``first`` then ``second`` gives the pair below; composing summaries in any
    grouping yields the same total map.
    """
    p1, q1 = first
    p2, q2 = second
    return p1 * p2, p2 * q1 + q2


def scan_chunked(u, delta, b_seq, c_seq, A, chunk: int, check_finite=True):
    """Chunked evaluation of the same recurrence.

    Each chunk is scanned locally from a zero entry state; per-chunk
    summaries (transition product, local end state) are composed across
    chunks to recover entry states, and outputs are then emitted per chunk.
    chunk=1 reproduces the sequential path operation-for-operation.
    """
    if chunk < 1:
        raise ValueError(f"chunk length must be >= 1, got {chunk}")
    u = np.asarray(u)
    bsz, t, d = u.shape
    s = A.shape[-1]
    a_bar, dbu = _discretize_all(u, delta, b_seq, A)

    pieces = []  # (start, stop, local_states, prefix_products)
    for k0 in range(0, t, chunk):
        k1 = min(k0 + chunk, t)
        local = np.empty((bsz, k1 - k0, d, s), dtype=u.dtype)
        h = np.zeros((bsz, d, s), dtype=u.dtype)
        for k in range(k0, k1):
            h = a_bar[:, k] * h + dbu[:, k]
            if check_finite and not np.isfinite(h).all():
                raise NumericError(f"scan state became non-finite at step {k}")
            local[:, k - k0] = h
        prefix = np.cumprod(a_bar[:, k0:k1], axis=1)
        pieces.append((k0, k1, local, prefix))

    # compose summaries left to right; with a zero initial state each chunk's
    # entry state is the offset of the composition of everything before it
    entries = [np.zeros((bsz, d, s), dtype=u.dtype)]
    running = None
    for _, _, local, prefix in pieces[:-1]:
        piece = (prefix[:, -1], local[:, -1])
        running = piece if running is None else compose_chunks(running, piece)
        entries.append(running[1])

    y = np.empty_like(u)
    for (k0, k1, local, prefix), h0 in zip(pieces, entries):
        h_all = local + prefix * h0[:, None]
        y[:, k0:k1] = np.einsum("bks,bkds->bkd", c_seq[:, k0:k1], h_all)
    return y


# ---------------------------------------------------------------------------
# taped scan
# ---------------------------------------------------------------------------

def selective_scan(u, delta, b_seq, c_seq, A, check_finite=True) -> Tensor:
    """Differentiable scan over (B, T, D) inputs.

    The forward pass saves the per-step states; the backward pass runs the
    adjoint recurrence right to left, so the whole sequence costs O(T) in
    both directions.
    """
    u = as_tensor(u)
    delta = as_tensor(delta)
    b_seq = as_tensor(b_seq)
    c_seq = as_tensor(c_seq)
    A = as_tensor(A)
    if u.ndim != 3 or delta.shape != u.shape:
        raise ShapeError(
            f"scan inputs must share a (batch, steps, channels) shape, got"
            f" {u.shape} and {delta.shape}"
        )
    if b_seq.shape != c_seq.shape or b_seq.shape[:2] != u.shape[:2]:
        raise ShapeError(
            f"selective maps {b_seq.shape} / {c_seq.shape} do not match input"
            f" {u.shape}"
        )
    if A.shape != (u.shape[2], b_seq.shape[2]):
        raise ShapeError(
            f"transition shape {A.shape} does not match channels"
            f" {u.shape[2]} and states {b_seq.shape[2]}"
        )

    recording = _active_tape() is not None and any(
        t.requires_grad for t in (u, delta, b_seq, c_seq, A)
    )
    y, states = scan_sequential(
        u.data, delta.data, b_seq.data, c_seq.data, A.data,
        save_states=recording, check_finite=check_finite,
    )

    def backward(gout):
        ud, dd, bd, cd, ad = u.data, delta.data, b_seq.data, c_seq.data, A.data
        a_bar, _ = _discretize_all(ud, dd, bd, ad)
        bsz, t, d = ud.shape
        dh = np.zeros((bsz, d, ad.shape[1]), dtype=gout.dtype)
        du = np.zeros_like(ud)
        ddelta = np.zeros_like(dd)
        db = np.zeros_like(bd)
        dc = np.zeros_like(cd)
        da_total = np.zeros_like(ad)
        for k in range(t - 1, -1, -1):
            g_k = gout[:, k]  # (B, D)
            h_k = states[:, k]
            dc[:, k] = np.einsum("bd,bds->bs", g_k, h_k)
            dh += g_k[:, :, None] * cd[:, k][:, None, :]
            # transition term: a_bar = exp(clip(delta*A)); clipped entries
            # are constants and contribute no gradient
            if k > 0:
                d_abar = dh * states[:, k - 1]
                live = (dd[:, k][:, :, None] * ad) > EXP_FLOOR
                g_da = d_abar * a_bar[:, k] * live
                ddelta[:, k] += np.einsum("bds,ds->bd", g_da, ad)
                da_total += np.einsum("bds,bd->ds", g_da, dd[:, k])
            # input term: dbu = delta*u*B
            drive = np.einsum("bds,bs->bd", dh, bd[:, k])
            du[:, k] += drive * dd[:, k]
            ddelta[:, k] += drive * ud[:, k]
            db[:, k] += np.einsum("bds,bd->bs", dh, dd[:, k] * ud[:, k])
            dh = dh * a_bar[:, k]
        return du, ddelta, db, dc, da_total

    return _apply("selective_scan", (u, delta, b_seq, c_seq, A), y, backward)


# ---------------------------------------------------------------------------
# depthwise causal convolution
# ---------------------------------------------------------------------------

def causal_conv(x, w, b) -> Tensor:
    """Depthwise causal convolution over the step axis.

    x: (..., T, C); w: (C, K); b: (C,).  Output step t sees inputs
    t-K+1 .. t (zero padded on the left), so no future leakage.  The kernel
    [0, ..., 0, 1] is the identity.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    b = as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"conv kernel {w.shape} / bias {b.shape} do not match input {x.shape}"
        )
    k_taps = w.shape[1]
    out = np.broadcast_to(b.data, x.shape).copy()
    for j in range(k_taps):
        shift = k_taps - 1 - j  # tap j reads x[t - shift]
        if shift == 0:
            out += w.data[:, j] * x.data
        else:
            out[..., shift:, :] += w.data[:, j] * x.data[..., :-shift, :]

    def backward(gout):
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        lead = tuple(range(gout.ndim - 1))
        for j in range(k_taps):
            shift = k_taps - 1 - j
            if shift == 0:
                dx += w.data[:, j] * gout
                dw[:, j] = (x.data * gout).sum(axis=lead)
            else:
                dx[..., :-shift, :] += w.data[:, j] * gout[..., shift:, :]
                dw[:, j] = (x.data[..., :-shift, :] * gout[..., shift:, :]).sum(axis=lead)
        db = gout.sum(axis=lead)
        return dx, dw, db

    return _apply("causal_conv", (x, w, b), out, backward)


# ---------------------------------------------------------------------------
# layer parameters and forward
# ---------------------------------------------------------------------------

@dataclass
class SsmParams:
    """Learnable tensors for one selective state-space layer."""

    a_log: Tensor        # (D, S); transition is -exp(a_log)
    delta_w: Tensor      # (D, D)
    delta_base: Tensor   # (D,) pre-activation offset for the step size
    b_w: Tensor          # (D, S)
    b_b: Tensor          # (S,)
    c_w: Tensor          # (D, S)
    c_b: Tensor          # (S,)
    conv_w: Tensor       # (D, K)
    conv_b: Tensor       # (D,)
    in_w: Tensor         # (d_h, D)
    in_b: Tensor         # (D,)
    out_w: Tensor        # (D, d_h)
    out_b: Tensor        # (d_h,)

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def n_state(self) -> int:
        return self.a_log.shape[1]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        order = (
            "a_log", "delta_w", "delta_base", "b_w", "b_b", "c_w", "c_b",
            "conv_w", "conv_b", "in_w", "in_b", "out_w", "out_b",
        )
        return {prefix + name: getattr(self, name) for name in order}


def init_ssm_params(
    d_hidden: int,
    n_state: int,
    expand: int,
    d_conv: int,
    gen: np.random.Generator,
    dtype=np.float32,
) -> SsmParams:
    """Initialize one layer.

    The transition starts at the real diagonal ramp A[i, s] = -(s+1), stored
    as its log so the sign stays fixed during training.  The step-size offset
    is chosen so initial steps land log-uniformly in [1e-3, 0.1].
    """
    d_inner = expand * d_hidden
    ramp = np.log(np.arange(1, n_state + 1, dtype=np.float64))
    a_log = Tensor(np.tile(ramp, (d_inner, 1)).astype(dtype), requires_grad=True)

    dt = np.exp(gen.uniform(np.log(1e-3), np.log(0.1), size=d_inner))
    # inverse softplus so softplus(0 + base) == dt at the start
    delta_base = Tensor(np.log(np.expm1(dt)).astype(dtype), requires_grad=True)
    delta_w = xavier_uniform(gen, (d_inner, d_inner), d_inner, d_inner, dtype)

    b_w = xavier_uniform(gen, (d_inner, n_state), d_inner, n_state, dtype)
    b_b = Tensor(np.zeros(n_state, dtype=dtype), requires_grad=True)
    c_w = xavier_uniform(gen, (d_inner, n_state), d_inner, n_state, dtype)
    c_b = Tensor(np.zeros(n_state, dtype=dtype), requires_grad=True)

    bound = 1.0 / np.sqrt(d_conv)
    conv_w = Tensor(
        gen.uniform(-bound, bound, size=(d_inner, d_conv)).astype(dtype),
        requires_grad=True,
    )
    conv_b = Tensor(np.zeros(d_inner, dtype=dtype), requires_grad=True)

    in_w = xavier_uniform(gen, (d_hidden, d_inner), d_hidden, d_inner, dtype)
    in_b = Tensor(np.zeros(d_inner, dtype=dtype), requires_grad=True)
    out_w = xavier_uniform(gen, (d_inner, d_hidden), d_inner, d_hidden, dtype)
    out_b = Tensor(np.zeros(d_hidden, dtype=dtype), requires_grad=True)

    return SsmParams(
        a_log=a_log, delta_w=delta_w, delta_base=delta_base,
        b_w=b_w, b_b=b_b, c_w=c_w, c_b=c_b,
        conv_w=conv_w, conv_b=conv_b,
        in_w=in_w, in_b=in_b, out_w=out_w, out_b=out_b,
    )


def transition(params: SsmParams) -> Tensor:
    """Continuous transition A = -exp(a_log); strictly negative by construction."""
    return neg(exp(params.a_log))


def selective_parameters(u: Tensor, params: SsmParams):
    """Input-dependent step sizes and state maps.

    u: (B, T, D).  Returns delta (B, T, D) strictly positive via softplus,
    and b_seq, c_seq (B, T, S).
    """
    delta = softplus(add(matmul(u, params.delta_w), params.delta_base))
    b_seq = add(matmul(u, params.b_w), params.b_b)
    c_seq = add(matmul(u, params.c_w), params.c_b)
    if not np.isfinite(delta.data).all():
        raise NumericError("step-size projection produced non-finite values")
    return delta, b_seq, c_seq


def causal_conv_silu(x: Tensor, params: SsmParams) -> Tensor:
    """Local smoothing then gating: silu(causal_conv(x))."""
    return silu(causal_conv(x, params.conv_w, params.conv_b))


def _scan_output_feedback(u: Tensor, params: SsmParams, A: Tensor,
                          check_finite=True) -> Tensor:
    """Scan variant where step k's maps are produced from step k-1's output.

    The first step has no previous output and uses the first input row, so it
    coincides with the input-driven variant there.  Built from per-step taped
    ops; meant for small sequences.
    """
    bsz, t, d_inner = u.shape
    n_state = A.shape[1]
    h = Tensor(np.zeros((bsz, d_inner, n_state), dtype=u.dtype))
    source = take_index(u, 0, axis=1)  # (B, D)
    rows = []
    for k in range(t):
        delta_k = softplus(add(matmul(source, params.delta_w), params.delta_base))
        b_k = add(matmul(source, params.b_w), params.b_b)
        c_k = add(matmul(source, params.c_w), params.c_b)
        da = mul(reshape(delta_k, (bsz, d_inner, 1)), A)
        if np.any(da.data > 0.0):
            raise StabilityError(
                f"positive transition exponent at step {k} of feedback scan"
            )
        u_k = take_index(u, k, axis=1)
        dbu = mul(
            mul(reshape(delta_k, (bsz, d_inner, 1)), reshape(b_k, (bsz, 1, n_state))),
            reshape(u_k, (bsz, d_inner, 1)),
        )
        h = add(mul(exp(da), h), dbu)
        if check_finite and not np.isfinite(h.data).all():
            raise NumericError(f"scan state became non-finite at step {k}")
        y_k = sum_axis(mul(reshape(c_k, (bsz, 1, n_state)), h), axis=-1)
        rows.append(reshape(y_k, (bsz, 1, d_inner)))
        source = y_k
    return concat(rows, axis=1)


def ssm_layer_forward(x: Tensor, params: SsmParams,
                      selective_source: str = "input",
                      check_finite: bool = True) -> Tensor:
    """Full layer: project in, smooth + gate, scan, project out.

    x: (B, T, d_h) -> (B, T, d_h).  ``selective_source`` picks whether the
    per-step maps are read off the current input ("input") or the previous
    step's output ("output_feedback").
    """
    if selective_source not in ("input", "output_feedback"):
        raise ValueError(f"unknown selective source {selective_source!r}")
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"layer input must be (batch, steps, channels), got {x.shape}")
    u0 = add(matmul(x, params.in_w), params.in_b)
    u = causal_conv_silu(u0, params)
    A = transition(params)
    if selective_source == "input":
        delta, b_seq, c_seq = selective_parameters(u, params)
        y = selective_scan(u, delta, b_seq, c_seq, A, check_finite=check_finite)
    else:
        y = _scan_output_feedback(u, params, A, check_finite=check_finite)
    return add(matmul(y, params.out_w), params.out_b)
