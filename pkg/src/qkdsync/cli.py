"""Command-line experiment runner.

Every mode reads an optional INI config, writes its outputs into ``--out``
and finishes with ``manifest.json`` (resolved config, seed, versions and a
sha256 of every emitted file). Errors go to stderr as one JSON object.

Exit codes: 0 ok, 1 unexpected error, 2 config/input error, 3 sync
failure, 4 infeasible key (zero key length).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy
from scipy.stats import binomtest

from .channel import ChannelModel, DetectorModel, ReceiverClock, drift_trajectory, expected_click_rate, transmit
from .feedback import EpcState, FeedbackConfig, run_feedback_loop, write_feedback_csv
from .finite_key import analyze, duration_for_block, expected_counts, optimize_parameters
from .model import ConfigError, ProtocolConfig, Rng, build_dataclass, read_config_file, validate_config
from .sifting import CountStatistics, CountsFileError, config_with, estimate_qber, read_counts, sift
from .sync import SyncError, alignment_accuracy, synchronize
from .transmitter import CodeGenerationError, DisclosedSet, build_frames, generate_code

log = logging.getLogger("qkdsync")

MODES = ("simulate", "keyrate", "optimize", "sweep-loss", "sync-bench", "feedback-demo")
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_SYNC, EXIT_INFEASIBLE = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int, kind: str, details: dict | None = None, outputs: list | None = None):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.details = details or {}
        self.outputs = outputs  # files already written; still listed in the manifest


# --------------------------------------------------------------------------
# Settings sections
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunSettings:
    target_detections: float = 1e6
    sample_fraction: float = 0.01
    window_ppm: float = 100.0


@dataclass(frozen=True)
class DriftSettings:
    kind: str = "static"
    axis_x: float = 0.0
    axis_y: float = 0.0
    axis_z: float = 1.0
    angle: float = 0.0
    amplitude: float = 0.0
    period: float = 3600.0
    step: float = 0.01
    dt: float = 1.0


@dataclass(frozen=True)
class FeedbackDemoSettings:
    duration_s: float = 43200.0
    n_z: int = 4000
    n_x: int = 1000


@dataclass(frozen=True)
class BenchSettings:
    losses: str = "0,18.07,40"
    Ms: str = "3,7"
    duration_s: float = 0.43
    trials: int = 100


@dataclass(frozen=True)
class SweepSettings:
    grid: str = "18,24,30,35,40"
    block_size_target: float = 1e7
    optimize: bool = True


@dataclass
class Settings:
    protocol: ProtocolConfig
    channel: ChannelModel
    detector: DetectorModel
    clock: ReceiverClock
    drift: DriftSettings
    run: RunSettings
    feedback: FeedbackConfig
    feedback_demo: FeedbackDemoSettings
    bench: BenchSettings
    sweep: SweepSettings

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            obj = getattr(self, f.name)
            out[f.name] = {k.name: getattr(obj, k.name) for k in dataclasses.fields(obj) if k.name != "drift"}
        return out


SECTIONS = {
    "protocol": ProtocolConfig,
    "channel": ChannelModel,
    "detector": DetectorModel,
    "clock": ReceiverClock,
    "drift": DriftSettings,
    "run": RunSettings,
    "feedback": FeedbackConfig,
    "feedback_demo": FeedbackDemoSettings,
    "bench": BenchSettings,
    "sweep": SweepSettings,
}

# a tracking demo wants the unwinding reset; the library default stays clamp
SECTION_DEFAULTS = {"feedback": {"rail_mode": "wrap"}}


def parse_float_list(text: str, name: str) -> list[float]:
    try:
        vals = [float(x) for x in text.replace(";", ",").split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from exc
    if not vals:
        raise ConfigError(f"{name}: empty list")
    return vals


def load_settings(path: str | None, args: argparse.Namespace) -> Settings:
    raw = read_config_file(path) if path else {}
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    built = {}
    for name, cls in SECTIONS.items():
        values = dict(SECTION_DEFAULTS.get(name, {}))
        values.update(raw.get(name, {}))
        try:
            built[name] = build_dataclass(cls, values, name)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    if args.seed is not None:
        built["protocol"] = built["protocol"].replace(seed=args.seed)
    if args.loss_db is not None:
        built["channel"] = dataclasses.replace(built["channel"], loss_db=args.loss_db)
    if args.trials is not None:
        built["bench"] = dataclasses.replace(built["bench"], trials=args.trials)
    if args.grid is not None:
        built["sweep"] = dataclasses.replace(built["sweep"], grid=args.grid)
    if args.duration is not None:
        built["feedback_demo"] = dataclasses.replace(built["feedback_demo"], duration_s=args.duration)
        built["bench"] = dataclasses.replace(built["bench"], duration_s=args.duration)
    validate_config(built["protocol"])
    return Settings(**built)


def build_drift(d: DriftSettings, rng: Rng):
    params = {
        "axis": (d.axis_x, d.axis_y, d.axis_z),
        "angle": d.angle,
        "amplitude": d.amplitude,
        "period": d.period,
        "step": d.step,
        "dt": d.dt,
    }
    try:
        return drift_trajectory(d.kind, params, rng)
    except ValueError as exc:
        raise ConfigError(f"[drift] {exc}") from exc


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------

def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _clean(obj):
    # NaN / inf are not valid JSON; emit null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path: Path, obj) -> None:
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict[str, str]:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__, "artifact": pkg}


def write_manifest(out: Path, mode: str, args: argparse.Namespace, settings: Settings, outputs: list[Path]) -> None:
    cfg_hash = sha256_file(Path(args.config)) if args.config else None
    manifest = {
        "mode": mode,
        "config_path": args.config,
        "config_sha256": cfg_hash,
        "seed": settings.protocol.seed,
        "settings": settings.to_dict(),
        "options": {
            "loss_db": args.loss_db,
            "max_pulses": args.max_pulses,
            "trials": args.trials,
            "counts": args.counts,
            "grid": args.grid,
            "duration": args.duration,
        },
        "versions": versions(),
        "outputs": {p.name: sha256_file(p) for p in sorted(outputs)},
    }
    write_json(out / "manifest.json", manifest)


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    if trials == 0:
        return (0.0, 1.0)
    ci = binomtest(successes, trials).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def thread_count() -> int:
    raw = os.environ.get("QKDSIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"QKDSIM_THREADS must be an integer, got {raw!r}")


# --------------------------------------------------------------------------
# Modes
# --------------------------------------------------------------------------

def simulate_once(s: Settings, max_pulses: int | None = None, target_detections: float | None = None):
    """Transmitter -> channel -> sync -> sift -> finite key for one seed.

    Returns ``(stats, sync_result, report, qber_estimate)``; raises
    :class:`SyncError` when synchronisation fails.
    """
    cfg = s.protocol
    rng = Rng(cfg.seed)
    code = generate_code(cfg.L_code, rng.fork("code"))
    target = s.run.target_detections if target_detections is None else target_detections
    per_slot = expected_click_rate(cfg, s.channel, s.detector)
    n_slots = math.ceil(target / per_slot) if per_slot > 0 else cfg.frame_length
    if max_pulses is not None:
        n_slots = min(n_slots, max_pulses)
    R = max(1, math.ceil(n_slots / cfg.frame_length))
    plan = build_frames(code, cfg, R, rng.fork("plan"))
    channel = dataclasses.replace(s.channel, drift=build_drift(s.drift, rng.fork("drift")))
    events = transmit(plan, channel, s.detector, s.clock, cfg, rng.fork("channel"))
    result = synchronize(events.strip_truth(), code, cfg.M, cfg.f, window_ppm=s.run.window_ppm)
    disclosed = DisclosedSet(plan, s.run.sample_fraction, rng.fork("disclosed"))
    stats = sift(plan, result, disclosed)
    report = analyze(stats, cfg)
    return stats, result, report, estimate_qber(plan, result, disclosed), events


def run_simulate(s: Settings, args, out: Path) -> list[Path]:
    try:
        stats, result, report, qber, events = simulate_once(s, args.max_pulses)
    except SyncError as exc:
        details = exc.result.to_dict() if getattr(exc, "result", None) is not None else {}
        raise CliError(str(exc), EXIT_SYNC, type(exc).__name__, details) from exc
    paths = [out / "counts.txt", out / "sync.json", out / "keyrate.json"]
    stats.write(paths[0])
    sync_doc = result.to_dict()
    sync_doc["alignment_accuracy"] = alignment_accuracy(events, result)
    sync_doc["n_events"] = len(events)
    sync_doc["disclosed_qber_z"] = qber.qber_z
    sync_doc["disclosed_qber_x"] = qber.qber_x
    write_json(paths[1], sync_doc)
    write_json(paths[2], report.to_dict())
    if report.l_bits <= 0:
        raise CliError("zero secret key length", EXIT_INFEASIBLE, "InfeasibleKey", report.to_dict(), paths)
    return paths


def run_keyrate(s: Settings, args, out: Path) -> list[Path]:
    if not args.counts:
        raise ConfigError("keyrate mode needs --counts FILE")
    try:
        stats, params = read_counts(args.counts)
    except OSError as exc:
        raise ConfigError(f"cannot read counts file: {exc}") from exc
    cfg = config_with(params, s.protocol)
    report = analyze(stats, cfg)
    path = out / "keyrate.json"
    doc = report.to_dict()
    doc["params"] = {k: getattr(cfg, k) for k in ("mu", "nu", "p_mu", "p_z_alice", "p_z_bob", "eps_sec", "eps_cor", "f_e", "f")}
    write_json(path, doc)
    if report.l_bits <= 0:
        raise CliError("zero secret key length", EXIT_INFEASIBLE, "InfeasibleKey", report.to_dict(), [path])
    return [path]


def run_optimize(s: Settings, args, out: Path) -> list[Path]:
    res = optimize_parameters(s.channel.loss_db, s.detector, s.channel.e_mis, s.sweep.block_size_target, s.protocol)
    path = out / "optimum.json"
    write_json(
        path,
        {
            "loss_db": s.channel.loss_db,
            "mu": res.mu,
            "nu": res.nu,
            "p_mu": res.p_mu,
            "p_z_alice": res.p_z_alice,
            "skr_bits_per_s": res.skr_bits_per_s,
            "report": res.report.to_dict() if res.report else None,
        },
    )
    return [path]


def sample_counts(expected: CountStatistics, gen: np.random.Generator) -> CountStatistics:
    """Poisson draw of detections, binomial draw of errors given the detections."""
    vals = {}
    for b in ("z", "x"):
        for k in ("mu", "nu"):
            n_exp = getattr(expected, f"n_{b}_{k}")
            m_exp = getattr(expected, f"m_{b}_{k}")
            n = int(gen.poisson(n_exp))
            p_err = m_exp / n_exp if n_exp > 0 else 0.0
            vals[f"n_{b}_{k}"] = n
            vals[f"m_{b}_{k}"] = int(gen.binomial(n, min(max(p_err, 0.0), 1.0)))
    return CountStatistics(**vals, t_s=expected.t_s, N_pulses=expected.N_pulses)


def sweep_point(s: Settings, loss: float, rng: Rng) -> dict:
    row = {"loss_db": loss, "predicted_skr": None, "simulated_skr": None, "mu": None, "nu": None, "p_mu": None, "p_z_alice": None}
    try:
        if s.sweep.optimize:
            opt = optimize_parameters(loss, s.detector, s.channel.e_mis, s.sweep.block_size_target, s.protocol)
            cfg = s.protocol.replace(mu=opt.mu, nu=opt.nu, p_mu=opt.p_mu, p_z_alice=opt.p_z_alice)
        else:
            cfg = s.protocol
        duration = duration_for_block(cfg, loss, s.detector, s.sweep.block_size_target)
        expected = expected_counts(cfg, loss, s.detector, s.channel.e_mis, duration)
        predicted = analyze(expected, cfg)
        sampled = analyze(sample_counts(expected, rng.generator()), cfg)
        row.update(
            predicted_skr=predicted.skr_bits_per_s,
            simulated_skr=sampled.skr_bits_per_s,
            mu=cfg.mu,
            nu=cfg.nu,
            p_mu=cfg.p_mu,
            p_z_alice=cfg.p_z_alice,
        )
    except (ValueError, ArithmeticError) as exc:
        log.warning("sweep point %g dB failed: %s", loss, exc)
    return row


SWEEP_COLUMNS = ("loss_db", "predicted_skr", "simulated_skr", "mu", "nu", "p_mu", "p_z_alice")


def run_sweep_loss(s: Settings, args, out: Path) -> list[Path]:
    grid = parse_float_list(s.sweep.grid, "grid")
    rng = Rng(s.protocol.seed).fork("sweep")
    with ThreadPoolExecutor(max_workers=min(thread_count(), len(grid))) as pool:
        rows = list(pool.map(lambda loss: sweep_point(s, loss, rng.fork(f"{loss:.6g}")), grid))
    path = out / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else f"{r[c]:.10g}" for c in SWEEP_COLUMNS])
    return [path]


def bench_trial(cfg: ProtocolConfig, ch: ChannelModel, det: DetectorModel, duration_s: float, rng: Rng) -> tuple[bool, str | None]:
    """One offset-recovery trial with a random sub-frame clock offset."""
    gen = rng.fork("offset").generator()
    frame = cfg.frame_length / cfg.f
    clk = ReceiverClock(offset_s=float(gen.uniform(0, frame - 2.0 / cfg.f)), drift_ppm=float(gen.uniform(-20, 20)))
    code = generate_code(cfg.L_code, rng.fork("code"))
    R = max(1, round(duration_s * cfg.f / cfg.frame_length))
    plan = build_frames(code, cfg, R, rng.fork("plan"))
    events = transmit(plan, ch, det, clk, cfg, rng.fork("channel"))
    try:
        result = synchronize(events.strip_truth(), code, cfg.M, cfg.f)
    except SyncError as exc:
        return False, type(exc).__name__
    acc = alignment_accuracy(events, result)
    return bool(acc > 0.99), None if acc > 0.99 else "WrongOffset"


def run_sync_bench(s: Settings, args, out: Path) -> list[Path]:
    b = s.bench
    if b.trials < 1:
        raise ConfigError("trials must be >= 1")
    rows = []
    base = Rng(s.protocol.seed).fork("bench")
    for loss in parse_float_list(b.losses, "losses"):
        for M in parse_float_list(b.Ms, "Ms"):
            cfg = validate_config(s.protocol.replace(M=int(M)))
            ch = dataclasses.replace(s.channel, loss_db=loss)
            ok, errors = 0, {}
            for t in range(b.trials):
                success, err = bench_trial(cfg, ch, s.detector, b.duration_s, base.fork(f"{loss}/{int(M)}/{t}"))
                ok += success
                if err:
                    errors[err] = errors.get(err, 0) + 1
            lo, hi = wilson_interval(ok, b.trials)
            rows.append(
                {
                    "loss_db": loss,
                    "M": int(M),
                    "R": max(1, round(b.duration_s * cfg.f / cfg.frame_length)),
                    "trials": b.trials,
                    "successes": ok,
                    "rate": ok / b.trials,
                    "ci_low": lo,
                    "ci_high": hi,
                    "errors": ";".join(f"{k}:{v}" for k, v in sorted(errors.items())),
                }
            )
    path = out / "sync_bench.csv"
    cols = ("loss_db", "M", "R", "trials", "successes", "rate", "ci_low", "ci_high", "errors")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{r[c]:.6g}" if isinstance(r[c], float) else r[c] for c in cols])
    return [path]


def run_feedback_demo(s: Settings, args, out: Path) -> list[Path]:
    rng = Rng(s.protocol.seed).fork("feedback")
    drift = build_drift(s.drift, rng.fork("drift"))
    d = s.feedback_demo
    samples = run_feedback_loop(
        d.duration_s, drift, s.feedback, rng.fork("loop"), s.channel.e_mis, d.n_z, d.n_x, EpcState()
    )
    path = out / "feedback.csv"
    write_feedback_csv(samples, path)
    q_z = np.array([x.qber_z for x in samples]) if samples else np.zeros(0)
    q_x = np.array([x.qber_x for x in samples]) if samples else np.zeros(0)
    summary = out / "feedback_summary.json"
    write_json(
        summary,
        {
            "samples": len(samples),
            "mean_qber_z": float(q_z.mean()) if q_z.size else None,
            "std_qber_z": float(q_z.std()) if q_z.size else None,
            "mean_qber_x": float(q_x.mean()) if q_x.size else None,
            "max_qber_z": float(q_z.max()) if q_z.size else None,
        },
    )
    return [path, summary]


RUNNERS = {
    "simulate": run_simulate,
    "keyrate": run_keyrate,
    "optimize": run_optimize,
    "sweep-loss": run_sweep_loss,
    "sync-bench": run_sync_bench,
    "feedback-demo": run_feedback_demo,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkdsim", description="QKD link simulation and finite-key analysis")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="override [protocol] seed")
    p.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    p.add_argument("--loss-db", type=float, help="override [channel] loss_db")
    p.add_argument("--max-pulses", type=int, help="cap on transmitted slots in simulate mode")
    p.add_argument("--trials", type=int, help="override [bench] trials")
    p.add_argument("--counts", help="counts file for keyrate mode")
    p.add_argument("--grid", help="comma-separated loss grid (dB) for sweep-loss")
    p.add_argument("--duration", type=float, help="duration in seconds (feedback-demo, sync-bench)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error(kind: str, message: str, code: int, details: dict | None = None) -> int:
    doc = {"error": kind, "message": message, "exit_code": code}
    if details:
        doc["details"] = details
    print(json.dumps(_clean(doc), sort_keys=True, default=_json_default), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        settings = load_settings(args.config, args)
        if args.max_pulses is not None and args.max_pulses < 1:
            raise ConfigError("--max-pulses must be >= 1")
        out.mkdir(parents=True, exist_ok=True)
        outputs = RUNNERS[args.mode](settings, args, out)
    except CliError as exc:
        if exc.outputs:
            write_manifest(out, args.mode, args, settings, exc.outputs)
        return _error(exc.kind, str(exc), exc.code, exc.details)
    except (ConfigError, CountsFileError, CodeGenerationError, OSError) as exc:
        return _error(type(exc).__name__, str(exc), EXIT_CONFIG)
    except SyncError as exc:
        return _error(type(exc).__name__, str(exc), EXIT_SYNC)
    except Exception as exc:  # noqa: BLE001 - last-resort machine-readable report
        return _error(type(exc).__name__, str(exc), EXIT_ERROR)
    write_manifest(out, args.mode, args, settings, outputs)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
