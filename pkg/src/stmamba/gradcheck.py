"""Central finite-difference verification of every differentiable operation.

Each check builds double-precision leaves, evaluates a scalar loss twice per
perturbed entry ((f(x+h) - f(x-h)) / 2h), and compares against the taped
gradients with the error measure max |analytic - numeric| / max(1, |numeric|).
Losses are random-weighted sums so a wrong-but-symmetric adjoint cannot hide.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng
from .data import Standardizer, WindowPair
from .embedding import init_embedding_params, embed_window
from .model import ModelConfig, forward, init_model_state, residual_block, _init_block_params
from .ssm import causal_conv, init_ssm_params, selective_scan, ssm_layer_forward
from .tensor import (
    Tape,
    Tensor,
    absolute,
    add,
    broadcast_to,
    concat,
    dropout,
    embedding_lookup,
    exp,
    huber,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    silu,
    softplus,
    sub,
    sum_axis,
    take_index,
    tmean,
    transpose,
    tsum,
)
from .training import destandardize_tensor, loss_tensor

OP_TOL = 1e-6
MODEL_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def _scalar(f: Callable[[], Tensor]) -> float:
    return float(f().item())


def finite_difference(f: Callable[[], Tensor], leaves: Sequence[Tensor],
                      step: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of the scalar f with respect to each leaf entry."""
    grads = []
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = _scalar(f)
            flat[i] = keep - step
            down = _scalar(f)
            flat[i] = keep
            g[i] = (up - down) / (2.0 * step)
        grads.append(g.reshape(leaf.shape))
    return grads


def analytic_gradients(f: Callable[[], Tensor],
                       leaves: Sequence[Tensor]) -> list[np.ndarray]:
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    out = []
    for leaf in leaves:
        g = tape.grad(leaf)
        out.append(np.zeros_like(leaf.data) if g is None else g)
    return out


def relative_error(analytic: Sequence[np.ndarray],
                   numeric: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.abs(n))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check(name: str, f: Callable[[], Tensor], leaves: Sequence[Tensor],
          tol: float = OP_TOL) -> CheckResult:
    err = relative_error(analytic_gradients(f, leaves),
                         finite_difference(f, leaves))
    return CheckResult(name, err, tol)


def _leaf(gen, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(gen.uniform(low, high, size=shape), requires_grad=True)


def _away_from(values: np.ndarray, kink: float, margin: float) -> np.ndarray:
    """Push entries whose distance to `kink` is under `margin` outward."""
    out = values.copy()
    near = np.abs(out - kink) < margin
    out[near] = kink + np.where(out[near] >= kink, margin, -margin) * 2.0
    return out


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return tsum(mul(out, Tensor(w)))


# ---------------------------------------------------------------------------
# individual operation checks
# ---------------------------------------------------------------------------

def run_operator_checks(seed: int = 0) -> list[CheckResult]:
    gen = rng.stream(seed, "gradcheck-ops")
    results = []

    a = _leaf(gen, (3, 4))
    b = _leaf(gen, (4, 5))
    w = gen.standard_normal((3, 5))
    results.append(check("matmul", lambda: _weighted(matmul(a, b), w), [a, b]))

    a = _leaf(gen, (2, 3, 4))
    b = _leaf(gen, (4, 5))
    w = gen.standard_normal((2, 3, 5))
    results.append(check("matmul_batched", lambda: _weighted(matmul(a, b), w), [a, b]))

    x = _leaf(gen, (3, 4))
    y = _leaf(gen, (4,))
    w = gen.standard_normal((3, 4))
    results.append(check("add_broadcast", lambda: _weighted(add(x, y), w), [x, y]))
    results.append(check("mul_broadcast", lambda: _weighted(mul(x, y), w), [x, y]))
    results.append(check("sub", lambda: _weighted(sub(x, y), w), [x, y]))

    x = _leaf(gen, (3, 4), -2.0, 1.5)
    w = gen.standard_normal((3, 4))
    results.append(check("exp", lambda: _weighted(exp(x), w), [x]))
    results.append(check("softplus", lambda: _weighted(softplus(x), w), [x]))
    results.append(check("silu", lambda: _weighted(silu(x), w), [x]))

    x = Tensor(_away_from(gen.uniform(-2, 2, (3, 4)), 0.0, 0.05), requires_grad=True)
    results.append(check("relu", lambda: _weighted(relu(x), w), [x]))
    results.append(check("abs", lambda: _weighted(absolute(x), w), [x]))

    raw = gen.uniform(-3, 3, (3, 4))
    raw = _away_from(_away_from(raw, 1.0, 0.05), -1.0, 0.05)
    x = Tensor(raw, requires_grad=True)
    results.append(check("huber", lambda: _weighted(huber(x, 1.0), w), [x]))

    x = _leaf(gen, (2, 3, 5))
    gamma = _leaf(gen, (5,), 0.5, 1.5)
    beta = _leaf(gen, (5,))
    w = gen.standard_normal((2, 3, 5))
    results.append(check("layer_norm",
                         lambda: _weighted(layer_norm(x, gamma, beta), w),
                         [x, gamma, beta]))

    x = _leaf(gen, (4, 5))
    w = gen.standard_normal((4, 5))
    results.append(check(
        "dropout",
        lambda: _weighted(dropout(x, 0.3, rng.stream(seed, "gradcheck-dropmask"),
                                  train=True), w),
        [x]))

    x = _leaf(gen, (2, 3))
    w = gen.standard_normal((3, 2, 4))
    results.append(check(
        "reshape_transpose_broadcast",
        lambda: _weighted(broadcast_to(reshape(transpose(x, (1, 0)), (3, 2, 1)),
                                       (3, 2, 4)), w),
        [x]))

    x = _leaf(gen, (2, 3))
    y = _leaf(gen, (2, 2))
    w = gen.standard_normal((2, 5))
    results.append(check("concat", lambda: _weighted(concat([x, y], axis=-1), w),
                         [x, y]))

    table = _leaf(gen, (7, 4))
    idx = np.array([[0, 3, 6], [2, 2, 5]])
    w = gen.standard_normal((2, 3, 4))
    results.append(check("embedding_lookup",
                         lambda: _weighted(embedding_lookup(table, idx), w),
                         [table]))

    x = _leaf(gen, (3, 4, 2))
    w = gen.standard_normal((3, 2))
    results.append(check("take_index",
                         lambda: _weighted(take_index(x, 1, axis=1), w), [x]))

    x = _leaf(gen, (3, 4))
    w = gen.standard_normal((3,))
    results.append(check("sum_axis_mean",
                         lambda: add(_weighted(sum_axis(x, axis=1), w), tmean(x)),
                         [x]))

    x = _leaf(gen, (2, 6, 3))
    cw = _leaf(gen, (3, 3))
    cb = _leaf(gen, (3,))
    w = gen.standard_normal((2, 6, 3))
    results.append(check("causal_conv",
                         lambda: _weighted(causal_conv(x, cw, cb), w),
                         [x, cw, cb]))

    bsz, t, d_in, n_s = 2, 5, 3, 2
    u = _leaf(gen, (bsz, t, d_in))
    delta = Tensor(gen.uniform(0.05, 0.3, (bsz, t, d_in)), requires_grad=True)
    b_seq = _leaf(gen, (bsz, t, n_s))
    c_seq = _leaf(gen, (bsz, t, n_s))
    trans = Tensor(gen.uniform(-2.0, -0.5, (d_in, n_s)), requires_grad=True)
    w = gen.standard_normal((bsz, t, d_in))
    results.append(check(
        "selective_scan",
        lambda: _weighted(selective_scan(u, delta, b_seq, c_seq, trans), w),
        [u, delta, b_seq, c_seq, trans]))

    return results


def run_module_checks(seed: int = 1) -> list[CheckResult]:
    """Composite pieces: ssm layer (both variants), residual block, embedding."""
    gen = rng.stream(seed, "gradcheck-modules")
    results = []

    d_h, n_s, expand, k = 4, 2, 2, 2
    params = init_ssm_params(d_h, n_s, expand, k, gen, dtype=np.float64)
    x = _leaf(gen, (1, 5, d_h))
    w = gen.standard_normal((1, 5, d_h))
    leaves = [x] + list(params.named().values())
    results.append(check(
        "ssm_layer_input",
        lambda: _weighted(ssm_layer_forward(x, params, "input"), w),
        leaves))
    results.append(check(
        "ssm_layer_feedback",
        lambda: _weighted(ssm_layer_forward(x, params, "output_feedback"), w),
        leaves))

    block = _init_block_params(4, 6, gen, np.float64)
    y = _leaf(gen, (2, 3, 4))
    x_in = _leaf(gen, (2, 3, 4))
    w = gen.standard_normal((2, 3, 4))
    results.append(check(
        "residual_block",
        lambda: _weighted(residual_block(
            y, x_in, block, 0.2, True, rng.stream(seed, "gradcheck-blockdrop")), w),
        [y, x_in] + list(block.named("").values())))

    embed = init_embedding_params(n_features=1, d_feat=2, d_adaptive=2,
                                  history=3, n_sensors=2, steps_per_day=8,
                                  gen=gen, dtype=np.float64)
    window = _leaf(gen, (1, 3, 2, 1))
    dow = np.array([[0, 0, 1]])
    tod = np.array([[6, 7, 0]])
    w = gen.standard_normal((1, 3, 2, 8))
    embed_leaves = [window, embed.feature_w, embed.feature_b, embed.dow_table,
                    embed.tod_table, embed.adaptive]
    results.append(check(
        "embed_window",
        lambda: _weighted(embed_window(window, dow, tod, embed), w),
        embed_leaves))

    return results


def run_model_check(seed: int = 2) -> CheckResult:
    """End-to-end: tiny forecaster, dropout active, MAE loss in raw units."""
    config = ModelConfig(
        n_sensors=2, history=3, horizon=3, n_features=1,
        d_feat=2, d_adaptive=2, n_state=2, expand=2, d_conv=2,
        n_layers=1, mlp_hidden=8, dropout=0.1, steps_per_day=16,
        dtype="float64",
    )
    state = init_model_state(config, seed=seed)
    gen = rng.stream(seed, "gradcheck-model-data")
    window = gen.uniform(-1.0, 1.0, (1, 3, 2, 1))
    dow = np.array([[2, 2, 2]])
    tod = np.array([[5, 6, 7]])
    target = gen.uniform(-1.0, 1.0, (1, 3, 2, 1))
    stats = Standardizer(mean=np.array([0.5]), std=np.array([2.0]))

    def f() -> Tensor:
        pred = forward(state, window, dow, tod, train=True,
                       drop_rng=rng.stream(seed, "gradcheck-model-drop"))
        return loss_tensor(destandardize_tensor(pred, stats), target, "mae")

    leaves = list(state.params().values())
    return check("model_end_to_end", f, leaves, tol=MODEL_TOL)


def run_all(seed: int = 0) -> list[CheckResult]:
    results = run_operator_checks(seed)
    results.extend(run_module_checks(seed + 1))
    results.append(run_model_check(seed + 2))
    return results
