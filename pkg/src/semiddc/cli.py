"""Command-line entry point.

Commands: simulate, oracle, estimate, montecarlo, taxi-prep.  Every
configuration key (see config.KEY_TABLE) is settable from a flat
key=value file via --config and overridable by a flag of the same
name.  Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical/convergence failure.  Each run writes a manifest with the
effective configuration, seed, library versions and per-stage wall
times; artifacts of a failed run keep a ``.partial`` suffix.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import KEY_TABLE, RunConfig, apply_setting, load_config_file, write_config_echo
from .errors import (
    ConfigError,
    ContractError,
    ConvergenceError,
    EstimationError,
    IntegrityError,
    NumericError,
    ParseError,
    ValidationError,
)
from .panel import build_taxi_states, load_panel, load_trips, make_utility_spec, write_panel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DEFAULT_SPEC_BETA = {"mc": 0.9, "const": 0.9, "taxi": 0.5}
# The taxi stopping panel concentrates quits in one corner of the state
# space; trim tail queries and keep the p-grid on populated quantiles.
_TAXI_EST_DEFAULTS = {"trim_max_share": 0.6, "grid_p_quantiles": (0.005, 0.99)}


class _ArtifactWriter:
    """Write artifacts into a directory, renaming to .partial on failure."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.written.append(p)
        return p

    def mark_partial(self):
        for p in self.written:
            if p.exists():
                p.rename(p.with_suffix(p.suffix + ".partial"))


def _manifest(writer: _ArtifactWriter, cfg: RunConfig, stage_seconds: dict, extra: dict | None = None):
    echo = cfg.echo()
    echo_text = "\n".join(f"{k} = {v}" for k, v in sorted(echo.items()))
    manifest = {
        "package": f"semiddc {__version__}",
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "seed": cfg.seed,
        "config": echo,
        "config_sha256": hashlib.sha256(echo_text.encode()).hexdigest(),
        "stage_seconds": stage_seconds,
    }
    if extra:
        manifest.update(extra)
    with open(writer.path("manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    write_config_echo(echo, writer.path("config_echo.cfg"))


def _build_spec(cfg: RunConfig):
    beta = cfg.spec_beta
    if beta is None:
        beta = cfg.dgp_overrides.get("beta", _DEFAULT_SPEC_BETA.get(cfg.spec_name, 0.9))
    return make_utility_spec(cfg.spec_name, beta)


def _estimate_config(cfg: RunConfig):
    if cfg.spec_name == "taxi":
        merged = {**_TAXI_EST_DEFAULTS, **cfg.est_overrides}
        from .pipeline import EstimateConfig

        return EstimateConfig(**merged)
    return cfg.estimate_config()


def cmd_simulate(cfg: RunConfig, args, writer: _ArtifactWriter) -> int:
    from .simulate import simulate_panel, solve_oracle

    t0 = time.perf_counter()
    dgp = cfg.dgp_config()
    oracle = solve_oracle(dgp)
    t1 = time.perf_counter()
    sample = simulate_panel(dgp, oracle)
    write_panel(sample, writer.path(args.panel_out))
    _manifest(
        writer,
        cfg,
        {"oracle": round(t1 - t0, 3), "simulate": round(time.perf_counter() - t1, 3)},
        {"n_obs": sample.n_obs, "n_paths": sample.n_paths},
    )
    print(f"wrote {args.panel_out}: {sample.n_obs} observations, {sample.n_paths} path(s)")
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args, writer: _ArtifactWriter) -> int:
    from .simulate import solve_oracle

    t0 = time.perf_counter()
    dgp = cfg.dgp_config()
    oracle = solve_oracle(dgp)
    step = max(len(oracle.grid1) // 100, 1)
    g1 = oracle.grid1[::step]
    g2 = oracle.grid2[::step]
    rows = {
        "x1": np.repeat(g1, len(g2)),
        "x2": np.tile(g2, len(g1)),
        "eta_star": oracle.eta_star[::step, ::step].reshape(-1),
        "p": oracle.p[::step, ::step].reshape(-1),
        "value": oracle.value[::step, ::step].reshape(-1),
    }
    pd.DataFrame(rows).to_csv(writer.path("oracle.csv"), index=False)
    with open(writer.path("oracle.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "iterations": oracle.iterations,
                "bellman_residual": oracle.bellman_residual,
                "reset_value": oracle.reset_value,
                "restart_value": oracle.v0,
                "grid1_range": [float(oracle.grid1[0]), float(oracle.grid1[-1])],
                "grid2_range": [float(oracle.grid2[0]), float(oracle.grid2[-1])],
            },
            fh,
            indent=2,
        )
    _manifest(writer, cfg, {"oracle": round(time.perf_counter() - t0, 3)})
    print(f"oracle solved in {oracle.iterations} sweeps, residual {oracle.bellman_residual:.2e}")
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, args, writer: _ArtifactWriter) -> int:
    from .index import resample_se
    from .pipeline import index_curves, run_estimate

    sample = load_panel(args.panel)
    spec = _build_spec(cfg)
    est_cfg = _estimate_config(cfg)
    report = run_estimate(sample, spec, est_cfg)
    report.diagnostics_frame().to_csv(writer.path("diag_regressors.csv"), index=False)
    report.basis_frame().to_csv(writer.path("basis.csv"), index=False)
    with open(writer.path("basis_diagnostics.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "contraction": report.contraction.to_dict(),
                "iterations": report.basis.iterations,
                "final_change": report.basis.final_change,
                "iteration_trace": report.basis.history,
            },
            fh,
            indent=2,
        )
    report.quantile_frame().to_csv(writer.path("quantile_curve.csv"), index=False)
    try:
        index_curves(report).to_csv(writer.path("mtheta_curves.csv"), index=False)
    except EstimationError:
        # Sweep points can fall outside any populated cell on sparse panels.
        pd.DataFrame(columns=["level_quantile", "x1", "index_value"]).to_csv(
            writer.path("mtheta_curves.csv"), index=False
        )
    out = report.to_dict()
    if cfg.se_reps >= 2:
        boot = resample_se(
            sample,
            spec,
            est_cfg,
            reps=cfg.se_reps,
            seed=cfg.seed,
            known_scale=est_cfg.known_scale,
            n_jobs=cfg.threads,
        )
        out["standard_errors"] = boot.standard_errors.tolist()
        out["se_reps"] = boot.n_ok
        out["se_scheme"] = boot.scheme
    with open(writer.path("report.json"), "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    _manifest(writer, cfg, report.stage_seconds, {"n_obs": sample.n_obs})
    names = report.component_names
    stars = ", ".join(f"{n}={v:+.4f}" for n, v in zip(names, report.theta.theta_star))
    print(f"estimated {stars} (lambda={report.theta.lambda_hat:.4g})")
    return EXIT_OK


def cmd_montecarlo(cfg: RunConfig, args, writer: _ArtifactWriter) -> int:
    from .simulate import run_montecarlo

    t0 = time.perf_counter()
    dgp = cfg.dgp_config()
    known = cfg.est_overrides.get("known_scale")
    res = run_montecarlo(
        dgp,
        reps=cfg.reps,
        est_config=cfg.estimate_config(),
        known_scale=known,
        n_jobs=cfg.threads,
    )
    res.table.to_csv(writer.path("table1.csv"), index=False)
    _manifest(
        writer,
        cfg,
        {"montecarlo": round(time.perf_counter() - t0, 3)},
        {"reps": cfg.reps, "failures": res.failures},
    )
    print(res.table.to_string(index=False))
    return EXIT_OK


def cmd_taxi_prep(cfg: RunConfig, args, writer: _ArtifactWriter) -> int:
    from .simulate import simulate_taxi_trips

    if args.trips:
        trips = load_trips(args.trips)
        made = None
    else:
        trips = simulate_taxi_trips(cfg.n_shifts, seed=cfg.seed)
        made = writer.path("trips.csv")
        trips.to_csv(made, index=False)
    sample = build_taxi_states(trips)
    write_panel(sample, writer.path(args.panel_out))
    _manifest(
        writer,
        cfg,
        {},
        {"n_obs": sample.n_obs, "n_shifts": sample.n_paths, "synthetic": made is not None},
    )
    print(f"wrote {args.panel_out}: {sample.n_obs} trips over {sample.n_paths} shifts")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semiddc",
        description="Semiparametric estimation of dynamic binary discrete-choice models",
    )
    parser.add_argument("--version", action="version", version=f"semiddc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument("--out", default=".", help="output directory for artifacts")
        for key in KEY_TABLE:
            p.add_argument(f"--{key}", dest=f"cfg[{key}]", metavar="V", default=None)

    p = sub.add_parser("simulate", help="simulate a Monte Carlo panel")
    common(p)
    p.add_argument("--panel-out", default="panel.csv")

    p = sub.add_parser("oracle", help="solve and dump the cutoff/CCP oracle")
    common(p)

    p = sub.add_parser("estimate", help="run the full estimation pipeline on a panel CSV")
    common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--known-scale", dest="cfg[known_scale]", default=None)
    p.add_argument("--spec", dest="cfg[spec.name]", default=None)

    p = sub.add_parser("montecarlo", help="replicate simulate+estimate and tabulate")
    common(p)
    p.add_argument("--T", dest="cfg[dgp.T]", default=None)

    p = sub.add_parser("taxi-prep", help="build a cumulative-state stopping panel from trips")
    common(p)
    p.add_argument("--trips", default=None, help="trips CSV; omit to generate synthetic shifts")
    p.add_argument("--panel-out", default="panel.csv")

    return parser


def _assemble_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        load_config_file(cfg, args.config)
    for key in KEY_TABLE:
        raw = getattr(args, f"cfg[{key}]", None)
        if raw is not None:
            apply_setting(cfg, key, raw)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "oracle": cmd_oracle,
        "estimate": cmd_estimate,
        "montecarlo": cmd_montecarlo,
        "taxi-prep": cmd_taxi_prep,
    }
    stage = "configuration"
    writer = None
    try:
        cfg = _assemble_config(args)
        writer = _ArtifactWriter(Path(args.out))
        stage = args.command
        return handlers[args.command](cfg, args, writer)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, IntegrityError, ValidationError, FileNotFoundError) as exc:
        if writer:
            writer.mark_partial()
        print(f"stage {stage} failed (data): {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ConvergenceError, EstimationError, ContractError) as exc:
        if writer:
            writer.mark_partial()
        print(f"stage {stage} failed (numeric): {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
