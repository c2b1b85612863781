"""Work counting and timing-harness plumbing (real sweeps live in acceptance)."""

import numpy as np
import pytest

from stmamba.bench import (
    AttentionBaseline,
    _check_sweep,
    bench_attention_scaling,
    bench_scan_scaling,
    count_flops,
    doubling_ratios,
    format_table,
    machine_descriptor,
    write_results_csv,
)


# ---------------------------------------------------------------------------
# operation counts
# ---------------------------------------------------------------------------

def test_flop_rows_sum_to_totals():
    f = count_flops(t1=1024, d_hidden=64, d_inner=128, n_state=16, d_conv=4)
    assert f["scan.total"] == f["scan.conv"] + f["scan.state"]
    assert f["attention.total"] == f["attention.proj"] + f["attention.scores"]
    assert f["scan.conv"] == 1024 * 128 * 4
    assert f["scan.state"] == 1024 * 128 * 16
    assert f["attention.proj"] == 1024 * 64 * 64
    assert f["attention.scores"] == 1024 * 1024 * 64


def test_flops_without_convolution():
    f = count_flops(t1=256, d_hidden=32, d_inner=64, n_state=8, d_conv=0)
    assert f["scan.conv"] == 0
    assert f["scan.total"] == f["scan.state"]


def test_scan_flops_double_per_doubling():
    for t1 in (512, 1024, 2048):
        a = count_flops(t1, 64, 128, 16, 4)["scan.total"]
        b = count_flops(2 * t1, 64, 128, 16, 4)["scan.total"]
        assert b == 2 * a


def test_attention_flop_ratio_grows_toward_quadratic():
    def total(t1):
        return count_flops(t1, 64, 1, 1, 0)["attention.total"]

    ratios = [total(2 * t) / total(t) for t in (512, 1024, 2048)]
    assert ratios == sorted(ratios)                 # monotone toward 4
    assert ratios[-1] == pytest.approx(1090519040 / 276824064)
    assert ratios[-1] > 3.9


def test_flops_scale_linearly_in_batch():
    one = count_flops(128, 32, 64, 8, 4, batch=1)
    four = count_flops(128, 32, 64, 8, 4, batch=4)
    assert all(four[k] == 4 * one[k] for k in one)


# ---------------------------------------------------------------------------
# attention baseline
# ---------------------------------------------------------------------------

def test_attention_single_step_reduces_to_value_projection():
    attn = AttentionBaseline(d_hidden=8, seed=1)
    x = np.ones((1, 8), dtype=np.float32)
    out = attn.forward(x)
    np.testing.assert_allclose(out, x @ attn.wv, atol=1e-7)


def test_attention_output_shape_and_stability():
    attn = AttentionBaseline(d_hidden=16, seed=2)
    x = np.full((32, 16), 1e4, dtype=np.float32)    # would overflow naive softmax
    out = attn.forward(x)
    assert out.shape == (32, 16)
    assert np.isfinite(out).all()


def test_attention_is_deterministic_per_seed():
    x = np.random.default_rng(3).standard_normal((10, 8)).astype(np.float32)
    a = AttentionBaseline(8, seed=4).forward(x)
    b = AttentionBaseline(8, seed=4).forward(x)
    c = AttentionBaseline(8, seed=5).forward(x)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------------------
# sweep harness
# ---------------------------------------------------------------------------

def test_sweep_validation():
    assert _check_sweep([8, 16, 32, 64]) == [8, 16, 32, 64]
    with pytest.raises(ValueError, match="at least"):
        _check_sweep([8, 16, 64])
    with pytest.raises(ValueError, match="increasing"):
        _check_sweep([8, 16, 16, 64])
    with pytest.raises(ValueError, match="span"):
        _check_sweep([8, 9, 10, 11])


def test_scan_sweep_smoke():
    sizes = [8, 16, 32, 64]
    res = bench_scan_scaling(sizes, d_inner=8, n_state=4, reps=1, seed=0)
    assert res.kernel == "scan"
    assert res.sizes == sizes
    assert len(res.medians) == 4 and all(m > 0 for m in res.medians)
    assert res.flops == [count_flops(t, 1, 8, 4, 4)["scan.total"] for t in sizes]
    assert len(doubling_ratios(res)) == 3


def test_attention_sweep_smoke():
    sizes = [8, 16, 32, 64]
    res = bench_attention_scaling(sizes, d_hidden=8, reps=1, seed=0)
    assert res.kernel == "attention"
    assert res.flops == [count_flops(t, 8, 1, 1, 0)["attention.total"]
                         for t in sizes]
    assert all(m > 0 for m in res.medians)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def test_format_table_and_csv(tmp_path):
    res = bench_scan_scaling([8, 16, 32, 64], d_inner=8, n_state=4, reps=1)
    table = format_table([res])
    assert "kernel" in table and "scan" in table and "slope" in table

    path = tmp_path / "bench.csv"
    write_results_csv(path, [res])
    lines = path.read_text().splitlines()
    assert lines[0] == "kernel,size,reps,median_seconds,flops"
    assert len(lines) == 5
    assert lines[1].startswith("scan,8,1,")


def test_machine_descriptor_names_the_stack():
    desc = machine_descriptor()
    assert "numpy" in desc and "python" in desc
