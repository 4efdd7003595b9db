"""Orchestration tests: config handling, determinism, persistence, NaN
accounting, baseline parameter matching, and the CLI surface."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sigbsde import train
from sigbsde.cli import main as cli_main
from sigbsde.config import TrainConfig, load_config, parse_overrides, save_config

TINY = dict(task="european_call", epochs=4, batch=32, n_steps=16, window=8,
            stride=4, width=16, eval_paths=128, norm_warmup=2, mc_ref_paths=2000)


def tiny_config(tmp_path, **kw):
    args = {**TINY, "outdir": str(tmp_path), **kw}
    return TrainConfig(**args)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def test_config_hash_stable_under_reordering(tmp_path):
    a = TrainConfig(seed=13, epochs=10)
    b = TrainConfig(epochs=10, seed=13)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != TrainConfig(seed=14, epochs=10).config_hash()


def test_config_roundtrip_through_ini(tmp_path):
    cfg = TrainConfig(task="asian_basket", dim=3, epochs=7, lr=1e-4,
                      seeds=(1, 2, 3), use_malliavin=False)
    path = tmp_path / "c.ini"
    save_config(cfg, path)
    loaded = load_config(path)
    assert loaded == cfg
    assert loaded.config_hash() == cfg.config_hash()


def test_config_overrides():
    got = parse_overrides(["epochs=9", "lr=0.5", "use_hjb=true", "seeds=1,2"])
    assert got == {"epochs": 9, "lr": 0.5, "use_hjb": True, "seeds": (1, 2)}
    with pytest.raises(KeyError):
        parse_overrides(["bogus=1"])
    with pytest.raises(ValueError):
        parse_overrides(["epochs"])


def test_config_validates_window_geometry():
    with pytest.raises(ValueError):
        TrainConfig(window=8, stride=9)
    with pytest.raises(ValueError):
        TrainConfig(n_steps=10, window=12, stride=2)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def test_zero_epochs_still_produces_artifacts(tmp_path):
    cfg = tiny_config(tmp_path, epochs=0)
    record = train.run_train(cfg)
    assert record.rows == []
    assert Path(record.checkpoint_path).exists()
    assert record.metrics.y0 == pytest.approx(record.metrics.y0)
    # untrained value head sits exactly at the warm-start bias
    crude = train.crude_price_estimate(cfg, train.build_task(cfg))
    assert abs(record.metrics.y0 - crude) < 1e-9


def test_training_reduces_total_loss(tmp_path):
    cfg = tiny_config(tmp_path, epochs=40)
    record = train.run_train(cfg)
    assert record.final_total < 0.5 * record.initial_total
    assert all(r["nan_events"] == 0 for r in record.rows)


def test_metrics_csv_byte_identical_same_seed(tmp_path):
    cfg_a = tiny_config(tmp_path / "a")
    cfg_b = tiny_config(tmp_path / "b")
    ra = train.run_train(cfg_a)
    rb = train.run_train(cfg_b)
    csv_a = (Path(ra.outdir) / "metrics.csv").read_bytes()
    csv_b = (Path(rb.outdir) / "metrics.csv").read_bytes()
    assert csv_a == csv_b
    rc = train.run_train(tiny_config(tmp_path / "c", seed=31))
    assert (Path(rc.outdir) / "metrics.csv").read_bytes() != csv_a


def test_metrics_csv_schema(tmp_path):
    record = train.run_train(tiny_config(tmp_path, epochs=2))
    header = (Path(record.outdir) / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,terminal,drift,second_order,z_sup,gamma_sup,total,q,eta,lambda2,nan_events"


def test_checkpoint_roundtrip_preserves_outputs_bitwise(tmp_path):
    cfg = tiny_config(tmp_path, epochs=3)
    record = train.run_train(cfg)
    cfg2, task, params, opt, norm, meta = train.load_run_checkpoint(record.checkpoint_path)
    ev1 = train.evaluate_model(cfg2, task, params, meta["kind"], norm, n_paths=64)
    cfg3, task3, params3, opt3, norm3, meta3 = train.load_run_checkpoint(record.checkpoint_path)
    ev2 = train.evaluate_model(cfg3, task3, params3, meta3["kind"], norm3, n_paths=64)
    assert ev1["y0"] == ev2["y0"]
    assert ev1["terminal_mismatch"].tobytes() == ev2["terminal_mismatch"].tobytes()


def test_run_infer_matches_bias_for_untrained(tmp_path):
    cfg = tiny_config(tmp_path, epochs=0)
    record = train.run_train(cfg)
    y0, info = train.run_infer(record.checkpoint_path, n_paths=64)
    crude = train.crude_price_estimate(cfg, train.build_task(cfg))
    assert abs(y0 - crude) < 1e-9
    assert "terminal_rmse" in info


def test_run_infer_mc_stability(tmp_path):
    record = train.run_train(tiny_config(tmp_path, epochs=2))
    y_small, _ = train.run_infer(record.checkpoint_path, n_paths=128)
    y_big, _ = train.run_infer(record.checkpoint_path, n_paths=512)
    assert abs(y_small - y_big) < 2.0  # same model, MC noise only


def test_adversarial_lr_counts_events_not_fatal(tmp_path):
    cfg = tiny_config(tmp_path, epochs=6, lr=1e8, clip=0.0,
                      warm_start_bias=False)
    cfg = cfg.replace(activation="relu")
    record = train.run_train(cfg)  # must complete
    assert len(record.rows) == 6
    assert sum(r["nan_events"] for r in record.rows) > 0


def test_rnn_baseline_param_budget_within_10pct(tmp_path):
    cfg = tiny_config(tmp_path, width=32)
    task = train.build_task(cfg)
    rde_params = train.build_model(cfg, task, 0.0)
    rnn_params = train.build_model(cfg.replace(baseline="rnn"), task, 0.0)
    gap = abs(rnn_params.n_params - rde_params.n_params) / rde_params.n_params
    assert gap <= 0.10


def test_rnn_baseline_trains(tmp_path):
    from sigbsde.bench import discrete_rnn_baseline

    record = discrete_rnn_baseline(tiny_config(tmp_path, epochs=3))
    assert len(record.rows) == 3
    assert np.isfinite(record.metrics.y0)


def test_no_signature_ablation_runs(tmp_path):
    cfg = tiny_config(tmp_path, epochs=2, use_signatures=False)
    record = train.run_train(cfg)
    assert np.isfinite(record.metrics.y0)


def test_hjb_task_trains_with_second_order_loss(tmp_path):
    cfg = tiny_config(tmp_path, task="portfolio_lq", epochs=6, use_hjb=True,
                      phase_split=0.3)
    record = train.run_train(cfg)
    late = record.rows[-1]
    assert late["lambda2"] == pytest.approx(0.2)
    assert np.isfinite(late["second_order"])
    assert record.metrics.hjb_residual_rms is not None
    assert record.metrics.z_rmse is not None
    assert record.metrics.gamma_rmse is not None


def test_ablate_layout_and_determinism(tmp_path):
    cfg = tiny_config(tmp_path, epochs=2)
    rows = train.run_ablate(cfg, "m", [2, 3])
    assert [r["value"] for r in rows] == [2, 3]
    assert set(rows[0]) == set(train.ABLATE_COLUMNS)
    empty = train.run_ablate(cfg, "p", [])
    assert empty == []
    with pytest.raises(KeyError):
        train.run_ablate(cfg, "bogus", [1])


def test_window_sweep_adjusts_stride(tmp_path):
    cfg = tiny_config(tmp_path, epochs=1, window=8, stride=8)
    rows = train.run_ablate(cfg, "K", [4])
    assert rows[0]["value"] == 4


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def test_cli_train_and_evaluate(tmp_path, capsys):
    rc = cli_main([
        "train", "--task", "european_call", "--seed", "13", "--epochs", "2",
        "--outdir", str(tmp_path),
        "--set", "batch=32", "--set", "n_steps=16", "--set", "window=8",
        "--set", "stride=4", "--set", "width=16", "--set", "eval_paths=64",
    ])
    assert rc == 0
    ckpts = list(tmp_path.glob("*/checkpoint.json"))
    assert len(ckpts) == 1
    rc = cli_main(["evaluate", str(ckpts[0]), "--paths", "64",
                   "--cvar-grid", "0.90,0.95,0.975,0.99",
                   "--out", str(tmp_path / "eval")])
    assert rc == 0
    report = json.loads((tmp_path / "eval.json").read_text())
    assert "cvar_0.95" in report and "rpe_percent" in report
    assert (tmp_path / "eval.csv").exists()


def test_cli_infer(tmp_path, capsys):
    cli_main(["train", "--task", "european_call", "--seed", "13", "--epochs", "1",
              "--outdir", str(tmp_path),
              "--set", "batch=32", "--set", "n_steps=16", "--set", "window=8",
              "--set", "stride=4", "--set", "width=16", "--set", "eval_paths=64"])
    ckpt = next(tmp_path.glob("*/checkpoint.json"))
    capsys.readouterr()
    rc = cli_main(["infer", str(ckpt), "--paths", "64"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert "y0" in out


def test_cli_signature_roundtrip(tmp_path, capsys):
    # two-segment L-path: against hand-computed Levy area coordinates
    csv_in = tmp_path / "path.csv"
    csv_in.write_text("x\n0.0\n1.0\n1.0\n")
    rc = cli_main(["signature", str(csv_in), "--depth", "2",
                   "--out", str(tmp_path / "sig.csv")])
    assert rc == 0
    lines = (tmp_path / "sig.csv").read_text().splitlines()
    header = lines[0].split(",")
    coords = dict(zip(header, (float(v) for v in lines[1].split(","))))
    # time runs 0..1, path moves 0 -> 1 -> 1
    assert coords["1"] == pytest.approx(1.0)
    assert coords["2"] == pytest.approx(1.0)


def test_cli_signature_no_time_augment(tmp_path, capsys):
    csv_in = tmp_path / "p.csv"
    csv_in.write_text("0.0,0.0\n1.0,0.0\n1.0,1.0\n")
    rc = cli_main(["signature", str(csv_in), "--depth", "2", "--no-time-augment",
                   "--out", str(tmp_path / "s.csv")])
    assert rc == 0
    lines = (tmp_path / "s.csv").read_text().splitlines()
    coords = dict(zip(lines[0].split(","), (float(v) for v in lines[1].split(","))))
    assert coords["12"] == pytest.approx(0.5)  # Levy area of the L-path


def test_cli_entry_point_installed():
    result = subprocess.run([sys.executable, "-m", "sigbsde.cli", "--help"],
                            capture_output=True, text=True)
    assert result.returncode == 0
    for sub in ("train", "infer", "evaluate", "ablate", "signature"):
        assert sub in result.stdout
