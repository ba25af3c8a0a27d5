import csv
import json

import pytest

from qkdsync import cli
from qkdsync.finite_key import analyze
from qkdsync.sifting import config_with, read_counts

PUBLISHED_SKR = {90: 2.66e4, 150: 1.48e3, 200: 1.15e2}


def run(tmp_path, *args, name="out", config=None):
    out = tmp_path / name
    argv = ["--out", str(out), *args]
    if config is not None:
        cfg = tmp_path / f"{name}.ini"
        cfg.write_text(config)
        argv += ["--config", str(cfg)]
    return cli.main(argv), out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def stderr_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


# -- keyrate ---------------------------------------------------------------

@pytest.mark.parametrize("r", [90, 150, 200])
def test_keyrate_fixtures(tmp_path, data_dir, r):
    counts = data_dir / f"field_row{r}.txt"
    code, out = run(tmp_path, "--mode", "keyrate", "--counts", str(counts))
    assert code == cli.EXIT_OK
    doc = json.loads((out / "keyrate.json").read_text())
    stats, params = read_counts(counts)
    assert doc["l_bits"] == analyze(stats, config_with(params)).l_bits
    assert doc["skr_bits_per_s"] == pytest.approx(PUBLISHED_SKR[r], rel=0.02)


def test_keyrate_malformed(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("n_z_mu = 10\nn_z_nu = ten\n")
    code, _ = run(tmp_path, "--mode", "keyrate", "--counts", str(bad))
    assert code == cli.EXIT_CONFIG
    err = stderr_json(capsys)
    assert err["error"] == "CountsFileError"
    assert ":2:" in err["message"]


def test_keyrate_needs_counts(tmp_path, capsys):
    code, _ = run(tmp_path, "--mode", "keyrate")
    assert code == cli.EXIT_CONFIG
    assert stderr_json(capsys)["exit_code"] == 2


def test_keyrate_infeasible(tmp_path, capsys):
    c = tmp_path / "c.txt"
    c.write_text("n_z_mu = 100\nn_z_nu = 10\nn_x_mu = 10\nn_x_nu = 1\nt_s = 1\n")
    code, out = run(tmp_path, "--mode", "keyrate", "--counts", str(c))
    assert code == cli.EXIT_INFEASIBLE
    assert stderr_json(capsys)["error"] == "InfeasibleKey"
    assert (out / "manifest.json").exists()


@pytest.mark.invariant
@pytest.mark.parametrize("mode", ["simulate", "keyrate", "optimize", "sweep-loss", "sync-bench", "feedback-demo"])
def test_every_mode_reports_errors_as_json(tmp_path, capsys, mode):
    code, _ = run(tmp_path, "--mode", mode, config="[protocol]\nM = 0\n")
    assert code != 0
    err = stderr_json(capsys)
    assert err["exit_code"] == code and err["error"] and err["message"]


def test_bad_config(tmp_path, capsys):
    code, _ = run(tmp_path, "--mode", "optimize", config="[protocol]\nmu = 0.1\nnu = 0.2\n")
    assert code == cli.EXIT_CONFIG
    assert "nu" in stderr_json(capsys)["message"]
    code, _ = run(tmp_path, "--mode", "optimize", config="[nonsense]\nx = 1\n", name="o2")
    assert code == cli.EXIT_CONFIG


# -- reproducibility -------------------------------------------------------

@pytest.mark.invariant
def test_manifest_byte_identical(tmp_path, data_dir):
    counts = str(data_dir / "field_row90.txt")
    _, a = run(tmp_path, "--mode", "keyrate", "--counts", counts, name="a")
    _, b = run(tmp_path, "--mode", "keyrate", "--counts", counts, name="b")
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    m = json.loads((a / "manifest.json").read_text())
    assert set(m) >= {"mode", "seed", "settings", "versions", "outputs", "config_sha256"}
    assert m["outputs"]["keyrate.json"] == cli.sha256_file(a / "keyrate.json")


@pytest.mark.invariant
def test_simulate_outputs_identical(tmp_path):
    conf = "[channel]\nloss_db = 0\n[run]\ntarget_detections = 20000\n"
    _, a = run(tmp_path, "--mode", "simulate", "--seed", "4", config=conf, name="a")
    _, b = run(tmp_path, "--mode", "simulate", "--seed", "4", config=conf, name="b")
    for f in ("counts.txt", "sync.json", "keyrate.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma["outputs"] == mb["outputs"]


# -- simulate --------------------------------------------------------------

def test_simulate_field_point(tmp_path):
    code, out = run(tmp_path, "--mode", "simulate", config="[channel]\nloss_db = 18.07\ne_mis = 0.01\n")
    assert code == cli.EXIT_OK
    rep = json.loads((out / "keyrate.json").read_text())
    assert 0.006 <= rep["qber_z"] <= 0.016
    sync = json.loads((out / "sync.json").read_text())
    assert sync["alignment_accuracy"] > 0.999
    assert abs(sync["tau_b_s"] - 1e-8) < 1e-9


def test_simulate_noiseless(tmp_path):
    conf = "[channel]\nloss_db = 0\ne_mis = 0\n[detector]\ndark_rate_hz = 0\n[run]\ntarget_detections = 1e6\n"
    code, out = run(tmp_path, "--mode", "simulate", config=conf)
    assert code == cli.EXIT_OK
    rep = json.loads((out / "keyrate.json").read_text())
    assert rep["qber_z"] == 0.0 and rep["l_bits"] > 0


def test_simulate_deep_loss_m3(tmp_path):
    conf = "[protocol]\nM = 3\n[channel]\nloss_db = 40\n[run]\ntarget_detections = 6e6\n"
    code, out = run(tmp_path, "--mode", "simulate", config=conf)
    assert code == cli.EXIT_OK
    assert json.loads((out / "sync.json").read_text())["success"]
    assert json.loads((out / "keyrate.json").read_text())["l_bits"] > 0


def test_simulate_sync_failure(tmp_path, capsys):
    code, out = run(tmp_path, "--mode", "simulate", "--max-pulses", "2000", config="[channel]\nloss_db = 40\n")
    assert code == cli.EXIT_SYNC
    assert stderr_json(capsys)["exit_code"] == 3


# -- sweep -----------------------------------------------------------------

def test_sweep_measured_points(tmp_path):
    code, out = run(tmp_path, "--mode", "sweep-loss", "--grid", "18,30,40")
    assert code == cli.EXIT_OK
    rows = read_csv(out / "sweep.csv")
    assert [float(r["loss_db"]) for r in rows] == [18, 30, 40]
    skr = [float(r["predicted_skr"]) for r in rows]
    assert skr[0] > skr[1] > skr[2] > 0
    assert all(r["simulated_skr"] != "" for r in rows)


def test_sweep_single_and_cutoff(tmp_path):
    _, out = run(tmp_path, "--mode", "sweep-loss", "--grid", "24")
    assert len(read_csv(out / "sweep.csv")) == 1
    code, out = run(tmp_path, "--mode", "sweep-loss", "--grid", "70,90", name="deep")
    assert code == cli.EXIT_OK
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 2 and all(float(r["predicted_skr"]) == 0.0 for r in rows)


def test_sweep_bad_grid(tmp_path, capsys):
    code, _ = run(tmp_path, "--mode", "sweep-loss", "--grid", "18,abc")
    assert code == cli.EXIT_CONFIG


def test_optimize_mode(tmp_path):
    code, out = run(tmp_path, "--mode", "optimize", "--loss-db", "18")
    assert code == cli.EXIT_OK
    doc = json.loads((out / "optimum.json").read_text())
    assert 0.466 <= doc["mu"] <= 0.565


# -- sync bench ------------------------------------------------------------

def bench(tmp_path, losses, Ms, duration, trials, name="bench"):
    conf = f"[bench]\nlosses = {losses}\nMs = {Ms}\nduration_s = {duration}\ntrials = {trials}\n"
    code, out = run(tmp_path, "--mode", "sync-bench", config=conf, name=name)
    assert code == cli.EXIT_OK
    return read_csv(out / "sync_bench.csv")


def test_bench_lossless(tmp_path):
    (row,) = bench(tmp_path, "0", "7", 1e-3, 20)
    assert float(row["rate"]) == 1.0
    assert float(row["ci_high"]) == pytest.approx(1.0)


def test_bench_m3_beats_m7(tmp_path):
    rows = bench(tmp_path, "40", "3,7", 0.25, 40)
    rate = {int(r["M"]): float(r["rate"]) for r in rows}
    assert rate[3] >= rate[7]


def test_bench_zero_detections(tmp_path):
    (row,) = bench(tmp_path, "200", "7", 1e-4, 5)
    assert float(row["rate"]) == 0.0
    assert "InsufficientData:5" in row["errors"]


def test_wilson_interval():
    lo, hi = cli.wilson_interval(999, 1000)
    assert lo < 0.999 < hi
    assert cli.wilson_interval(0, 0) == (0.0, 1.0)


# -- feedback demo ---------------------------------------------------------

def test_feedback_demo_one_hour(tmp_path):
    conf = "[feedback]\ninterval_s = 1\n"
    code, out = run(tmp_path, "--mode", "feedback-demo", "--duration", "3600", config=conf)
    assert code == cli.EXIT_OK
    rows = read_csv(out / "feedback.csv")
    assert len(rows) == 3600
    assert list(rows[0]) == ["t_s", "qber_z", "qber_x", "v1", "v2", "v3"]
    # identity drift: once settled (early on) the voltages never move again
    volts = [(r["v1"], r["v2"], r["v3"]) for r in rows]
    last_change = max((i for i in range(1, len(volts)) if volts[i] != volts[i - 1]), default=0)
    assert last_change < 36


def test_feedback_demo_random_walk(tmp_path):
    conf = "[drift]\nkind = random-walk\nstep = 0.01\n"
    code, out = run(tmp_path, "--mode", "feedback-demo", "--seed", "1", config=conf)
    assert code == cli.EXIT_OK
    summary = json.loads((out / "feedback_summary.json").read_text())
    assert summary["samples"] == 288
    assert 0.005 <= summary["mean_qber_z"] <= 0.025


def test_threads_env(monkeypatch):
    monkeypatch.setenv("QKDSIM_THREADS", "3")
    assert cli.thread_count() == 3
    monkeypatch.setenv("QKDSIM_THREADS", "x")
    with pytest.raises(Exception):
        cli.thread_count()
