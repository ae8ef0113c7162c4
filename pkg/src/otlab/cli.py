"""Command line front-end: ``otlab <subcommand> --config FILE --out DIR``.

Every artifact carries the package version and the config hash. JSON files
get a ``meta`` block, CSV files a leading ``# otlab ...`` comment line.
Exit codes: 0 ok, 1 runtime error, 2 input error (with error JSON on stderr).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
COMMANDS = ("solve", "excess", "tilt", "iterate", "seminorm", "certify", "scan", "calibrate")

log = logging.getLogger("otlab")


class Run:
    """Output directory plus the stamp written into every artifact."""

    def __init__(self, command, cfg, out, seed, threads):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.seed = seed
        self.threads = threads
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def meta(self) -> dict:
        return {"otlab_version": __version__, "config_hash": self.cfg.hash(), "command": self.command, "seed": self.seed}

    def json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        body = {"meta": self.meta, **payload}
        path.write_text(json.dumps(body, sort_keys=True, indent=1, default=_jsonable) + "\n")
        return path

    def stamp_csv(self, path: Path) -> Path:
        head = f"# otlab {__version__} config {self.cfg.hash()} seed {self.seed}\n"
        path.write_text(head + path.read_text())
        return path


def _jsonable(obj):
    import numpy as np

    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _eps_cal(value):
    from .certify import load_calibration

    return float(value) if value is not None else float(load_calibration()["eps_cal"])


# --- subcommands --------------------------------------------------------------


def cmd_solve(run: Run) -> str:
    from .pipeline import build_problem
    from .transport import cyclical_monotonicity

    prob = build_problem(run.cfg, run.seed)
    prob.T.write_csv(run.out / "map.csv")
    run.stamp_csv(run.out / "map.csv")
    mono = cyclical_monotonicity(prob.T, max_pairs=20000, seed=run.seed)
    run.json("solve.json", {**prob.info, "monotonicity_min": mono, "skipped_cells": prob.T.skipped})
    return f"solve: {prob.info['solver']} cost={prob.info.get('cost', float('nan')):.6g} monotone_min={mono:.3g}"


def cmd_excess(run: Run) -> str:
    from .excess import hypothesis_quantity
    from .pipeline import ball_of, build_problem

    prob = build_problem(run.cfg, run.seed)
    ball = ball_of(run.cfg.iterate.center, run.cfg.iterate.R, run.cfg.grid.dim)
    rep = hypothesis_quantity(prob.T, prob.rho0, prob.rho1, ball)
    run.json("excess.json", {**rep.to_dict(), "total": rep.total})
    return f"excess: E={rep.E:.6g} D={rep.D:.6g} on B_{ball.radius:g}"


def cmd_tilt(run: Run) -> str:
    from .pipeline import ball_of, build_problem, tilt_config
    from .tilt import tilt_step

    prob = build_problem(run.cfg, run.seed)
    ball = ball_of(run.cfg.iterate.center, run.cfg.iterate.R, run.cfg.grid.dim)
    _, rec = tilt_step(prob.T, prob.rho0, prob.rho1, ball, tilt_config(run.cfg))
    run.json("step.json", rec.to_dict())
    return f"tilt: E_in={rec.E_in:.6g} E_out={rec.E_out:.6g} D_in={rec.D_in:.6g} frame_size={rec.frame_constant:.3g}"


def cmd_iterate(run: Run) -> str:
    from .campanato import holder_estimate, iterate
    from .errors import OTLabError
    from .pipeline import ball_of, build_problem, iteration_config

    prob = build_problem(run.cfg, run.seed)
    ball = ball_of(run.cfg.iterate.center, run.cfg.iterate.R, run.cfg.grid.dim)
    state = iterate(prob.T, prob.rho0, prob.rho1, ball, iteration_config(run.cfg))
    summary = state.summary()
    try:
        est = holder_estimate(state, prob.T)
        summary.update(alpha_hat=est.alpha_hat, holder=est.to_dict())
    except OTLabError as exc:
        summary["holder_error"] = f"{type(exc).__name__}: {exc}"
    state.write_csv(run.out / "trace.csv")
    run.stamp_csv(run.out / "trace.csv")
    run.json("trace.json", summary)
    last = state.E_trace[-1]
    return f"iterate: {state.k} steps, E_0={state.E_trace[0]:.3g} E_last={last:.3g} stop={state.early_stop_reason or 'none'}"


def cmd_seminorm(run: Run) -> str:
    from .campanato import campanato_profile
    from .errors import InputError
    from .pipeline import ball_of, build_problem

    prob = build_problem(run.cfg, run.seed)
    spec = run.cfg.seminorm
    ball = ball_of(spec.center, spec.R, run.cfg.grid.dim)
    r_min = spec.r_min if spec.r_min is not None else 4 * prob.rho0.h
    prof = campanato_profile(prob.T, ball, spec.alpha, r_min)
    if not prof:
        raise InputError(f"no dyadic radius between r_min = {r_min} and R/2")
    value = max(prof.values())
    profile = [{"r": r, "value": v} for r, v in prof.items()]
    run.json(
        "seminorm.json",
        {"center": ball.center, "R": ball.radius, "alpha": spec.alpha, "r_min": r_min, "seminorm": value, "profile": profile},
    )
    return f"seminorm: {value:.6g} (alpha={spec.alpha}, r_min={r_min:g})"


def cmd_certify(run: Run) -> str:
    from .certify import certify_point
    from .pipeline import build_problem, iteration_config

    prob = build_problem(run.cfg, run.seed)
    spec = run.cfg.certify
    it = iteration_config(run.cfg)
    it.alpha = spec.alpha
    cert = certify_point(
        prob.T, prob.rho0, prob.rho1, spec.center[: run.cfg.grid.dim], spec.R, spec.alpha, _eps_cal(spec.eps_cal), it
    )
    run.json("certificate.json", cert.to_dict())
    return f"certify: {cert.verdict} value={cert.hypothesis_value:.6g} threshold={cert.threshold:.6g}"


def cmd_scan(run: Run) -> str:
    from .certify import scan_regular_set
    from .pipeline import build_problem

    prob = build_problem(run.cfg, run.seed)
    spec = run.cfg.scan
    res = scan_regular_set(
        prob.T,
        prob.rho0,
        prob.rho1,
        (spec.lower, spec.upper),
        spec.alpha,
        spec.ladder,
        _eps_cal(spec.eps_cal),
        workers=run.threads or 1,
    )
    run.json("scan.json", res.to_dict())
    res.write_csv(run.out / "scan.csv")
    run.stamp_csv(run.out / "scan.csv")
    n_pass = sum(b.get("verdict") == "pass" for b in res.balls)
    return f"scan: coverage={res.coverage:.4f} certified_centers={n_pass}/{len(res.balls)} eps_cal={res.eps_cal:.4g}"


def build_calibration_instances(cfg, seed: int = 0, workers: int = 1):
    """Calibration instances named by the ``[[calibrate.instance]]`` entries."""
    from .certify import calibration_instance
    from .config import load_config
    from .pipeline import band_mask, build_problem

    out = []
    for entry in cfg.calibrate.instances:
        path = cfg.resolve(entry.fixture)
        fx = load_config(path if path.exists() else entry.fixture)
        fx.source.params.update(entry.source)
        fx.target.params.update(entry.target)
        prob = build_problem(fx, seed)
        ladder = entry.ladder if entry.ladder is not None else fx.scan.ladder
        name = f"{entry.fixture}:{json.dumps({'source': entry.source, 'target': entry.target}, sort_keys=True)}"
        bad = band_mask(prob.rho0, entry.bad_band)
        out.append(
            calibration_instance(name, prob.T, prob.rho0, prob.rho1, (entry.lower, entry.upper), ladder, bad, workers)
        )
    return out


def cmd_calibrate(run: Run) -> str:
    from .certify import calibrate

    spec = run.cfg.calibrate
    instances = build_calibration_instances(run.cfg, run.seed, run.threads or 1)
    res = calibrate(instances, spec.lo, spec.hi, spec.iterations, spec.target_coverage)
    run.json(
        "eps_cal.json",
        {**res.to_dict(), "instances": [inst.name for inst in instances], "singular": [inst.singular for inst in instances]},
    )
    return f"calibrate: eps_cal={res.eps_cal:.6g} false_passes={res.false_passes} smooth_coverage={res.smooth_coverage:.4f}"


HANDLERS = {
    "solve": cmd_solve,
    "excess": cmd_excess,
    "tilt": cmd_tilt,
    "iterate": cmd_iterate,
    "seminorm": cmd_seminorm,
    "certify": cmd_certify,
    "scan": cmd_scan,
    "calibrate": cmd_calibrate,
}


# --- entry point ----------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"otlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML file, or the name of a bundled fixture")
        p.add_argument("--out", default="otlab-out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if args.seed < 0 or args.seed >= 2**64:
        return _fail(ValueError("--seed must be an unsigned 64-bit integer"), 2)
    if args.threads is not None:
        if args.threads < 1:
            return _fail(ValueError("--threads must be positive"), 2)
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    level = os.environ.get("OTLAB_LOG", "WARNING").upper()
    logging.basicConfig(
        level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
        format="%(levelname)s %(name)s: %(message)s",
    )

    from .config import load_config
    from .errors import OTLabError

    try:
        cfg = load_config(args.config)
        run = Run(args.command, cfg, args.out, args.seed, args.threads)
        line = HANDLERS[args.command](run)
    except OTLabError as exc:
        return _fail(exc, exc.exit_code)
    except Exception as exc:  # noqa: BLE001  (anything else is a runtime failure)
        log.debug("unhandled error", exc_info=True)
        return _fail(exc, 1)
    print(line)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
