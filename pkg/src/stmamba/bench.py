"""Runtime scaling measurements: linear scan vs quadratic attention baseline.

Timings are medians over repeated single-threaded runs (BLAS pinned to one
thread) so the growth order is visible instead of core-count noise.  The
attention baseline uses fixed random projections — it exists to show the
T^2 wall, not to be trained.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import rng
from .ssm import scan_sequential

ADVISORY_FLOOR_SECONDS = 1e-3  # medians under this are timer-noise territory


@dataclass
class BenchResult:
    kernel: str
    sizes: list[int]
    medians: list[float]       # seconds per call
    slope: float               # fitted log-log growth order
    flops: list[int]
    reps: int
    advisory: Optional[str] = None


def _check_sweep(sizes: list[int]) -> list[int]:
    sizes = [int(s) for s in sizes]
    if len(sizes) < 4:
        raise ValueError(f"sweep needs at least 4 sizes, got {len(sizes)}")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"sweep sizes must be strictly increasing, got {sizes}")
    if sizes[-1] < 8 * sizes[0]:
        raise ValueError(
            f"sweep must span at least 8x (largest {sizes[-1]} vs smallest {sizes[0]})"
        )
    return sizes


def _median_seconds(fn, reps: int) -> float:
    fn()  # warmup: first call pays allocation/cache setup
    times = []
    for _ in range(reps):
        tic = time.perf_counter()
        fn()
        times.append(time.perf_counter() - tic)
    return float(np.median(times))


def _fit_slope(sizes, medians) -> float:
    return float(np.polyfit(np.log(np.asarray(sizes, dtype=np.float64)),
                            np.log(np.asarray(medians, dtype=np.float64)), 1)[0])


def _advisory(medians) -> Optional[str]:
    low = min(medians)
    if low < ADVISORY_FLOOR_SECONDS:
        return (f"smallest median {low * 1e3:.3f} ms is below 1 ms;"
                " ratios at that size are timer-noise dominated")
    return None


# ---------------------------------------------------------------------------
# closed-form work estimates
# ---------------------------------------------------------------------------

def count_flops(t1: int, d_hidden: int, d_inner: int, n_state: int,
                d_conv: int, batch: int = 1) -> dict[str, int]:
    """Multiply-accumulate counts for the two kernels at sequence length t1.

    Rows sum to their totals; d_conv=0 removes the convolution term.  The
    scan total grows linearly in t1, the attention total quadratically.
    """
    conv = batch * t1 * d_inner * d_conv
    state = batch * t1 * d_inner * n_state
    proj = batch * t1 * d_hidden * d_hidden
    scores = batch * t1 * t1 * d_hidden
    return {
        "scan.conv": conv,
        "scan.state": state,
        "scan.total": conv + state,
        "attention.proj": proj,
        "attention.scores": scores,
        "attention.total": proj + scores,
    }


# ---------------------------------------------------------------------------
# attention baseline
# ---------------------------------------------------------------------------

class AttentionBaseline:
    """Single-head self-attention with frozen random projections."""

    def __init__(self, d_hidden: int, seed: int = 0):
        gen = rng.stream(seed, "attention-baseline")
        scale = 1.0 / np.sqrt(d_hidden)
        self.wq = (gen.standard_normal((d_hidden, d_hidden)) * scale).astype(np.float32)
        self.wk = (gen.standard_normal((d_hidden, d_hidden)) * scale).astype(np.float32)
        self.wv = (gen.standard_normal((d_hidden, d_hidden)) * scale).astype(np.float32)
        self.d_hidden = d_hidden

    def forward(self, x: np.ndarray) -> np.ndarray:
        """x: (T, d_h) -> (T, d_h); softmax rows are shift-stabilized."""
        q = x @ self.wq
        k = x @ self.wk
        v = x @ self.wv
        scores = (q @ k.T) / np.sqrt(self.d_hidden)
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        return weights @ v


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def bench_scan_scaling(sizes, d_inner: int = 32, n_state: int = 8,
                       d_conv: int = 4, reps: int = 5, seed: int = 0) -> BenchResult:
    """Time the sequential scan across sequence lengths.

    Default widths keep the precomputed transition/drive buffers inside a
    desktop L3 across the whole sweep; wider settings put a cache cliff in
    the middle of the size range and the ratios stop reflecting the loop.
    """
    sizes = _check_sweep(sizes)
    gen = rng.stream(seed, "bench-scan")
    a_ramp = -np.arange(1.0, n_state + 1.0, dtype=np.float32)
    trans = np.tile(a_ramp, (d_inner, 1))
    medians = []
    with threadpool_limits(limits=1):
        for t1 in sizes:
            u = gen.standard_normal((1, t1, d_inner)).astype(np.float32)
            delta = gen.uniform(0.01, 0.1, size=(1, t1, d_inner)).astype(np.float32)
            b_seq = gen.standard_normal((1, t1, n_state)).astype(np.float32)
            c_seq = gen.standard_normal((1, t1, n_state)).astype(np.float32)
            medians.append(_median_seconds(
                lambda: scan_sequential(u, delta, b_seq, c_seq, trans), reps))
    flops = [count_flops(t1, 1, d_inner, n_state, d_conv)["scan.total"]
             for t1 in sizes]
    return BenchResult("scan", sizes, medians, _fit_slope(sizes, medians),
                       flops, reps, _advisory(medians))


def bench_attention_scaling(sizes, d_hidden: int = 64, reps: int = 5,
                            seed: int = 0) -> BenchResult:
    """Time the attention baseline across the same sequence lengths."""
    sizes = _check_sweep(sizes)
    gen = rng.stream(seed, "bench-attention")
    attn = AttentionBaseline(d_hidden, seed)
    medians = []
    with threadpool_limits(limits=1):
        for t1 in sizes:
            x = gen.standard_normal((t1, d_hidden)).astype(np.float32)
            medians.append(_median_seconds(lambda: attn.forward(x), reps))
    flops = [count_flops(t1, d_hidden, 1, 1, 0)["attention.total"] for t1 in sizes]
    return BenchResult("attention", sizes, medians, _fit_slope(sizes, medians),
                       flops, reps, _advisory(medians))


def doubling_ratios(result: BenchResult) -> list[float]:
    """Median-time ratio for each consecutive size pair."""
    return [b / a for a, b in zip(result.medians, result.medians[1:])]


def machine_descriptor() -> str:
    return (f"{platform.platform()} | python {platform.python_version()}"
            f" | numpy {np.__version__} | {platform.machine()}")


def format_table(results: list[BenchResult]) -> str:
    lines = [f"{'kernel':<10} {'size':>7} {'median_s':>12} {'ratio':>7} {'flops':>14}"]
    for res in results:
        prev = None
        for size, med, fl in zip(res.sizes, res.medians, res.flops):
            ratio = f"{med / prev:.2f}" if prev else "-"
            lines.append(f"{res.kernel:<10} {size:>7} {med:>12.6f} {ratio:>7} {fl:>14}")
            prev = med
        lines.append(f"{res.kernel:<10} fitted log-log slope {res.slope:.2f}")
        if res.advisory:
            lines.append(f"{res.kernel:<10} note: {res.advisory}")
    return "\n".join(lines)


def write_results_csv(path, results: list[BenchResult]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("kernel,size,reps,median_seconds,flops\n")
        for res in results:
            for size, med, fl in zip(res.sizes, res.medians, res.flops):
                fh.write(f"{res.kernel},{size},{res.reps},{med:.9f},{fl}\n")
