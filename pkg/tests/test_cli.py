"""End-to-end command-line behavior: exit codes, artifacts, reproducibility."""

import numpy as np
import pytest

from stmamba.cli import main
from stmamba.data import load_dataset

TINY_MODEL = ["--d_f", "2", "--d_a", "2", "--n_state", "2", "--expand", "2",
              "--d_conv", "2", "--mlp_hidden", "4", "--H", "4", "--Z", "4"]


def _synth(path, days=3, sensors=2, seed=7, extra=()):
    return main(["synth", "--out", str(path), "--synth_days", str(days),
                 "--synth_sensors", str(sensors), "--seed", str(seed), *extra])


# ---------------------------------------------------------------------------
# configuration echo + precedence
# ---------------------------------------------------------------------------

def test_defaults_echoed_before_running(tmp_path, capsys):
    assert _synth(tmp_path / "d") == 0
    out = capsys.readouterr().out
    for expected in ("d_f=24", "d_a=80", "lr=0.001", "batch=16",
                     "patience=30", "H=12", "Z=12"):
        assert expected in out
    assert "wrote dataset" in out


def test_flag_overrides_appear_in_echo(tmp_path, capsys):
    assert _synth(tmp_path / "d", extra=["--d_f", "8", "--lr", "0.01"]) == 0
    out = capsys.readouterr().out
    assert "d_f=8" in out and "lr=0.01" in out


def test_config_file_applies_and_flag_wins(tmp_path, capsys):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("# comment line\nd_f = 6\nbatch = 8\n")
    rc = main(["synth", "--config", str(cfgfile), "--out", str(tmp_path / "d"),
               "--synth_days", "2", "--synth_sensors", "2", "--d_f", "4"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "d_f=4" in out            # flag beats file
    assert "batch=8" in out          # file beats default


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("granularity = 3\n")
    rc = main(["synth", "--config", str(cfgfile), "--out", str(tmp_path / "d")])
    assert rc == 1
    assert "granularity" in capsys.readouterr().err


def test_invalid_flag_value_exits_one(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "d"), "--d_f", "-1"])
    assert rc == 1
    assert "d_f" in capsys.readouterr().err


def test_env_var_sets_out_dir_and_flag_beats_it(tmp_path, monkeypatch, capsys):
    env_dir = tmp_path / "from-env"
    monkeypatch.setenv("STMAMBA_OUT_DIR", str(env_dir))
    assert main(["synth", "--synth_days", "2", "--synth_sensors", "2"]) == 0
    assert (env_dir / "data.bin").exists()

    flag_dir = tmp_path / "from-flag"
    assert _synth(flag_dir, days=2) == 0
    assert (flag_dir / "data.bin").exists()
    capsys.readouterr()


# ---------------------------------------------------------------------------
# synth + convert
# ---------------------------------------------------------------------------

def test_synth_is_byte_reproducible(tmp_path, capsys):
    assert _synth(tmp_path / "a", days=2, seed=9) == 0
    assert _synth(tmp_path / "b", days=2, seed=9) == 0
    capsys.readouterr()
    assert ((tmp_path / "a" / "data.bin").read_bytes()
            == (tmp_path / "b" / "data.bin").read_bytes())
    assert ((tmp_path / "a" / "meta.json").read_bytes()
            == (tmp_path / "b" / "meta.json").read_bytes())


def test_convert_roundtrip(tmp_path, capsys):
    csv_path = tmp_path / "raw.csv"
    rows = np.arange(24.0).reshape(8, 3)
    csv_path.write_text("\n".join(",".join(f"{v:.1f}" for v in row)
                                  for row in rows) + "\n")
    out = tmp_path / "converted"
    rc = main(["convert", "--csv", str(csv_path), "--out", str(out),
               "--n_sensors", "3"])
    assert rc == 0
    assert "8 steps x 3 sensors" in capsys.readouterr().out
    data = load_dataset(out)
    np.testing.assert_allclose(data.values[:, :, 0], rows, atol=1e-6)


def test_convert_requires_csv_and_sensor_count(tmp_path, capsys):
    assert main(["convert", "--out", str(tmp_path / "d")]) == 1
    assert "csv" in capsys.readouterr().err
    csv_path = tmp_path / "raw.csv"
    csv_path.write_text("1.0,2.0\n")
    assert main(["convert", "--csv", str(csv_path),
                 "--out", str(tmp_path / "d")]) == 1


# ---------------------------------------------------------------------------
# train / eval / predict pipeline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny end-to-end training run shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data_dir = root / "data"
    run_dir = root / "run"
    assert _synth(data_dir, days=3, sensors=2, seed=5) == 0
    rc = main(["train", "--data", str(data_dir), "--out", str(run_dir),
               "--max_epochs", "2", "--seed", "5", *TINY_MODEL])
    assert rc == 0
    return data_dir, run_dir


def test_train_writes_artifacts(trained, capsys):
    _, run_dir = trained
    assert (run_dir / "checkpoint.bin").exists()
    history = (run_dir / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_loss,val_mae,lr,seconds"
    assert len(history) == 3
    capsys.readouterr()


def test_eval_reports_metrics(trained, capsys):
    data_dir, run_dir = trained
    rc = main(["eval", "--data", str(data_dir),
               "--checkpoint", str(run_dir / "checkpoint.bin")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "MAE" in out and "persistence MAE" in out
    assert "step  1:" in out and "step  4:" in out


def test_predict_writes_forecast_dataset(trained, capsys):
    data_dir, run_dir = trained
    out_dir = run_dir / "pred"
    rc = main(["predict", "--data", str(data_dir),
               "--checkpoint", str(run_dir / "checkpoint.bin"),
               "--out", str(out_dir), "--window_index", "1"])
    assert rc == 0
    capsys.readouterr()
    forecast = load_dataset(out_dir / "forecast")
    assert forecast.values.shape == (4, 2, 1)   # Z=4 steps, 2 sensors
    assert np.isfinite(forecast.values).all()
    source = load_dataset(data_dir)
    assert forecast.start_unix_seconds > source.start_unix_seconds
    sidecar = (out_dir / "forecast" / "metrics.txt").read_text().splitlines()
    assert sidecar[0].startswith("MAE ")
    assert any(line.startswith("step 4 ") for line in sidecar)


def test_predict_window_index_out_of_range(trained, capsys):
    data_dir, run_dir = trained
    rc = main(["predict", "--data", str(data_dir),
               "--checkpoint", str(run_dir / "checkpoint.bin"),
               "--out", str(run_dir), "--window_index", "999999"])
    assert rc == 1
    assert "out of range" in capsys.readouterr().err


def test_eval_without_checkpoint_flag(tmp_path, capsys):
    rc = main(["eval", "--data", str(tmp_path)])
    assert rc == 1
    assert "checkpoint" in capsys.readouterr().err


def test_eval_missing_checkpoint_file(trained, tmp_path, capsys):
    data_dir, _ = trained
    rc = main(["eval", "--data", str(data_dir),
               "--checkpoint", str(tmp_path / "absent.bin")])
    assert rc == 3
    assert "data error" in capsys.readouterr().err


def test_train_missing_dataset_dir(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nowhere"),
               "--out", str(tmp_path / "run"), *TINY_MODEL])
    assert rc == 3
    capsys.readouterr()


# ---------------------------------------------------------------------------
# bench + gradcheck
# ---------------------------------------------------------------------------

def test_bench_rejects_bad_sweep(tmp_path, capsys):
    rc = main(["bench", "--out", str(tmp_path), "--bench_sizes", "8,16,24"])
    assert rc == 1
    capsys.readouterr()


def test_bench_small_sweep_writes_csv(tmp_path, capsys):
    rc = main(["bench", "--out", str(tmp_path),
               "--bench_sizes", "8,16,32,64", "--bench_reps", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "numpy" in out and "scan" in out and "attention" in out
    assert (tmp_path / "bench.csv").exists()
    assert (tmp_path / "machine.txt").exists()


def test_gradcheck_passes(tmp_path, capsys):
    rc = main(["gradcheck", "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out
    assert "gradient checks passed" in out


def test_bad_subcommand_exits_one(capsys):
    rc = main(["transmogrify"])
    assert rc == 1
    capsys.readouterr()


def test_help_lists_every_key_with_default(capsys):
    from stmamba.config import SCHEMA
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in SCHEMA:
        assert f"--{key.name}" in out
    assert "(default: 24)" in out        # d_f
    assert "(default: 0.001)" in out     # lr
