"""Command-line entry point.

Subcommands: convert, synth, train, eval, predict, bench, gradcheck.  Every
schema key is exposed as a flag on every subcommand; the effective merged
configuration is echoed before work starts.  Exit codes: 0 success,
1 validation problem, 2 numeric failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import gradcheck as gradcheck_mod
from .config import RunConfig, SCHEMA, format_effective, parse_splits, resolve
from .data import (
    Standardizer,
    TrafficTensor,
    calendar_indices,
    convert_csv,
    load_dataset,
    make_windows,
    split_dataset,
    steps_per_day,
    synthesize_traffic,
    save_dataset,
)
from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import ModelConfig, init_model_state, load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    compute_metrics,
    evaluate,
    persistence_baseline,
    predict_windows,
    stack_windows,
    train_loop,
    write_history,
)


class _Parser(argparse.ArgumentParser):
    """Argparse that reports problems as validation errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stmamba",
                     description="desk-scale selective state-space traffic forecaster")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "convert": "turn a flat CSV into a dataset directory",
        "synth": "generate a synthetic traffic dataset",
        "train": "fit a model and save the best checkpoint",
        "eval": "score a checkpoint on the test split",
        "predict": "write predictions for one test window",
        "bench": "time the scan against the attention baseline",
        "gradcheck": "verify gradients against finite differences",
    }
    for name, blurb in commands.items():
        p = sub.add_parser(name, help=blurb, description=blurb)
        p.add_argument("--config", default=None, metavar="FILE",
                       help="key=value configuration file")
        for key in SCHEMA:
            p.add_argument(f"--{key.name}", type=key.type, default=None,
                           help=f"{key.help} (default: {key.default!r})")
    return parser


def _require(cfg: RunConfig, key: str, why: str):
    if not getattr(cfg, key):
        raise ConfigError(f"{key} is required: {why}")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split_windows(cfg: RunConfig, history: int, horizon: int):
    """Dataset -> (train/val/test window lists, standardizer fit on train)."""
    data = load_dataset(cfg.data)
    ratios = parse_splits(cfg.splits)
    train_seg, val_seg, test_seg = split_dataset(data, ratios,
                                                 min_length=history + horizon)
    stats = Standardizer.fit(train_seg)
    return data, (
        make_windows(train_seg, history, horizon),
        make_windows(val_seg, history, horizon),
        make_windows(test_seg, history, horizon),
    ), stats


def _model_config(cfg: RunConfig, data) -> ModelConfig:
    return ModelConfig(
        n_sensors=data.n_sensors,
        history=cfg.H,
        horizon=cfg.Z,
        n_features=data.n_features,
        d_feat=cfg.d_f,
        d_adaptive=cfg.d_a,
        n_state=cfg.n_state,
        expand=cfg.expand,
        d_conv=cfg.d_conv,
        n_layers=cfg.n_layers,
        mlp_hidden=cfg.mlp_hidden,
        dropout=cfg.dropout,
        selective_source=cfg.selective_source,
        steps_per_day=steps_per_day(data.interval_minutes),
        dtype=cfg.dtype,
    ).validate()


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        lr=cfg.lr, batch=cfg.batch, patience=cfg.patience,
        max_epochs=cfg.max_epochs, lr_decay=cfg.lr_decay,
        decay_patience=cfg.decay_patience, loss=cfg.loss,
        mask_threshold=cfg.mask_threshold, seed=cfg.seed,
        max_steps=cfg.max_steps,
    ).validate()


def _check_dataset_matches(state, data):
    cfg = state.config
    if data.n_sensors != cfg.n_sensors or data.n_features != cfg.n_features:
        raise DataError(
            f"dataset has {data.n_sensors} sensors x {data.n_features} features,"
            f" checkpoint expects {cfg.n_sensors} x {cfg.n_features}"
        )
    if steps_per_day(data.interval_minutes) != cfg.steps_per_day:
        raise DataError(
            f"dataset has {steps_per_day(data.interval_minutes)} steps/day,"
            f" checkpoint expects {cfg.steps_per_day}"
        )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_convert(cfg: RunConfig) -> None:
    _require(cfg, "csv", "path of the CSV to convert")
    if cfg.n_sensors < 1:
        raise ConfigError("n_sensors must be >= 1 for convert")
    out = _out_dir(cfg)
    data = convert_csv(cfg.csv, out, cfg.n_sensors, cfg.n_features,
                       cfg.interval, cfg.start)
    print(f"wrote dataset {out} ({data.n_steps} steps x {data.n_sensors}"
          f" sensors x {data.n_features} features)")


def cmd_synth(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    data = synthesize_traffic(cfg.synth_sensors, cfg.synth_days, cfg.seed,
                              interval_minutes=cfg.interval,
                              noise=cfg.synth_noise)
    save_dataset(out, data)
    print(f"wrote dataset {out} ({data.n_steps} steps x {data.n_sensors}"
          f" sensors x {data.n_features} features)")


def cmd_train(cfg: RunConfig) -> None:
    _require(cfg, "data", "dataset directory to train on")
    out = _out_dir(cfg)
    data, (train_w, val_w, test_w), stats = _load_split_windows(cfg, cfg.H, cfg.Z)
    state = init_model_state(_model_config(cfg, data), cfg.seed)
    print(f"model parameters: {state.parameter_count()}")
    result = train_loop(state, train_w, val_w, stats, _train_config(cfg),
                        log=lambda line: print(line, flush=True))
    ckpt = out / "checkpoint.bin"
    save_checkpoint(ckpt, result.state)
    write_history(out / "history.csv", result.history)
    print(f"best val MAE {result.best_val_mae:.6f} at epoch {result.best_epoch}"
          f" after {result.steps} steps"
          f" ({'early stop' if result.stopped_early else 'ran to cap'})")
    print(f"wrote {ckpt} and {out / 'history.csv'}")


def cmd_eval(cfg: RunConfig) -> None:
    _require(cfg, "data", "dataset directory to score on")
    _require(cfg, "checkpoint", "trained checkpoint to load")
    state = load_checkpoint(cfg.checkpoint)
    data = load_dataset(cfg.data)
    _check_dataset_matches(state, data)
    ratios = parse_splits(cfg.splits)
    h, z = state.config.history, state.config.horizon
    train_seg, _, test_seg = split_dataset(data, ratios, min_length=h + z)
    stats = Standardizer.fit(train_seg)
    test_w = make_windows(test_seg, h, z)
    report = evaluate(state, test_w, stats, mask_threshold=cfg.mask_threshold)
    base = persistence_baseline(test_w, z)
    targets = np.stack([w.target for w in test_w])
    base_report = compute_metrics(base, targets, cfg.mask_threshold)
    mape = "n/a" if report.mape is None else f"{report.mape:.3f}%"
    print(f"test windows: {len(test_w)}")
    print(f"MAE {report.mae:.6f}  RMSE {report.rmse:.6f}  MAPE {mape}")
    print(f"persistence MAE {base_report.mae:.6f}")
    for row in report.per_horizon:
        row_mape = "n/a" if row.mape is None else f"{row.mape:.3f}%"
        print(f"  step {row.step:>2}: MAE {row.mae:.6f}  RMSE {row.rmse:.6f}"
              f"  MAPE {row_mape}")


def cmd_predict(cfg: RunConfig) -> None:
    _require(cfg, "data", "dataset directory to predict from")
    _require(cfg, "checkpoint", "trained checkpoint to load")
    state = load_checkpoint(cfg.checkpoint)
    data = load_dataset(cfg.data)
    _check_dataset_matches(state, data)
    ratios = parse_splits(cfg.splits)
    h, z = state.config.history, state.config.horizon
    train_seg, _, test_seg = split_dataset(data, ratios, min_length=h + z)
    stats = Standardizer.fit(train_seg)
    test_w = make_windows(test_seg, h, z)
    if cfg.window_index >= len(test_w):
        raise ConfigError(
            f"window_index {cfg.window_index} out of range; test split has"
            f" {len(test_w)} windows"
        )
    batch = stack_windows([test_w[cfg.window_index]], stats)
    pred = predict_windows(state, batch, stats)[0]      # (Z, N, d)

    # forecast reuses the dataset directory format, stamped at its own start
    start = (test_seg.start_unix_seconds
             + (cfg.window_index + h) * test_seg.interval_minutes * 60)
    dow, tod = calendar_indices(start, z, test_seg.interval_minutes)
    forecast = TrafficTensor(pred.astype(np.float32), dow, tod,
                             test_seg.interval_minutes, start,
                             list(test_seg.feature_names))
    out = _out_dir(cfg) / "forecast"
    save_dataset(out, forecast)

    report = compute_metrics(pred, test_w[cfg.window_index].target,
                             cfg.mask_threshold)
    side = out / "metrics.txt"
    with open(side, "w", encoding="ascii") as fh:
        mape = "n/a" if report.mape is None else f"{report.mape:.6f}"
        fh.write(f"MAE {report.mae:.6f}\nRMSE {report.rmse:.6f}\nMAPE {mape}\n")
        for row in report.per_horizon:
            row_mape = "n/a" if row.mape is None else f"{row.mape:.6f}"
            fh.write(f"step {row.step} MAE {row.mae:.6f}"
                     f" RMSE {row.rmse:.6f} MAPE {row_mape}\n")
    print(f"wrote forecast {out} ({z} steps x {forecast.n_sensors} sensors)"
          f" and {side}")


def cmd_bench(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    try:
        sizes = [int(s) for s in str(cfg.bench_sizes).split(",")]
    except ValueError as err:
        raise ConfigError(f"bench_sizes must be comma-separated integers,"
                          f" got {cfg.bench_sizes!r}") from err
    try:
        scan = bench_mod.bench_scan_scaling(sizes, reps=cfg.bench_reps,
                                            seed=cfg.seed)
        attn = bench_mod.bench_attention_scaling(sizes, reps=cfg.bench_reps,
                                                 seed=cfg.seed)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    print(bench_mod.machine_descriptor())
    print(bench_mod.format_table([scan, attn]))
    bench_mod.write_results_csv(out / "bench.csv", [scan, attn])
    with open(out / "machine.txt", "w", encoding="ascii") as fh:
        fh.write(bench_mod.machine_descriptor() + "\n")
    print(f"wrote {out / 'bench.csv'}")


def cmd_gradcheck(cfg: RunConfig) -> None:
    results = gradcheck_mod.run_all(cfg.seed)
    failures = []
    for res in results:
        verdict = "PASS" if res.ok else "FAIL"
        print(f"[{verdict}] {res.name}: max rel err {res.max_rel_err:.3e}"
              f" (tol {res.tol:.0e})")
        if not res.ok:
            failures.append(res.name)
    if failures:
        raise NumericError(f"gradient checks failed: {', '.join(failures)}")
    print(f"all {len(results)} gradient checks passed")


_DISPATCH = {
    "convert": cmd_convert,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {key.name: getattr(args, key.name) for key in SCHEMA
                     if getattr(args, key.name) is not None}
        cfg = resolve(args.config, overrides)
        print(format_effective(cfg))
        _DISPATCH[args.command](cfg)
        return 0
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except (ConfigError, ShapeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ArithmeticError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
