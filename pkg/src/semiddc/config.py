"""Flat key=value run configuration shared by the CLI and manifests.

Every key can come from a config file (one ``key = value`` per line,
``#`` comments) or be overridden by a CLI flag of the same name.  The
echoed manifest uses the same format, so a run can be reproduced from
its manifest verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .pipeline import EstimateConfig
from .simulate import DgpConfig

# key -> (section, attribute, type)
_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_pair(s: str) -> tuple[float, float]:
    parts = [p for p in s.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ConfigError(f"expected two numbers, got {s!r}")
    return float(parts[0]), float(parts[1])


KEY_TABLE: dict[str, tuple[str, str, object]] = {
    "kernel.family": ("est", "kernel_family", str),
    "kernel.order": ("est", "kernel_order", int),
    "pss.kernel_order": ("est", "pss_kernel_order", int),
    "pss.gamma": ("est", "gamma", float),
    "pss.bandwidth_scale": ("est", "pss_bandwidth_scale", float),
    "pss.standardize": ("est", "pss_standardize", _parse_bool),
    "pss.leave_both_out": ("est", "pss_leave_both_out", _parse_bool),
    "grid.size": ("est", "grid_size", int),
    "grid.p_quantiles": ("est", "grid_p_quantiles", _parse_pair),
    "ccp.eps": ("est", "eps_p", float),
    "ccp.leave_one_out": ("est", "leave_one_out", _parse_bool),
    "truncation.tol": ("est", "tol_trunc", float),
    "truncation.L": ("est", "truncation_L", int),
    "fie.tol": ("est", "fie_tol", float),
    "fie.max_iter": ("est", "fie_max_iter", int),
    "fie.damping": ("est", "fie_damping", float),
    "fie.override": ("est", "fie_override", _parse_bool),
    "fie.contraction_bins": ("est", "contraction_bins", int),
    "cells.min_weight": ("est", "min_cell_weight", float),
    "cells.trim_max_share": ("est", "trim_max_share", float),
    "known_scale": ("est", "known_scale", float),
    "synthetic_exact": ("est", "synthetic_exact", _parse_bool),
    "dgp.theta0": ("dgp", "theta0", float),
    "dgp.theta1": ("dgp", "theta1", float),
    "dgp.theta2": ("dgp", "theta2", float),
    "dgp.beta": ("dgp", "beta", float),
    "dgp.T": ("dgp", "T", int),
    "dgp.n_paths": ("dgp", "n_paths", int),
    "dgp.burn_in": ("dgp", "burn_in", int),
    "dgp.grid_size": ("dgp", "grid_size", int),
    "dgp.gh_nodes": ("dgp", "gh_nodes", int),
    "spec.name": ("run", "spec_name", str),
    "spec.beta": ("run", "spec_beta", float),
    "seed": ("run", "seed", int),
    "reps": ("run", "reps", int),
    "threads": ("run", "threads", int),
    "se.reps": ("run", "se_reps", int),
    "taxi.n_shifts": ("run", "n_shifts", int),
}


@dataclass
class RunConfig:
    """Everything a CLI run needs, assembled from defaults/file/flags."""

    est_overrides: dict = field(default_factory=dict)
    dgp_overrides: dict = field(default_factory=dict)
    spec_name: str = "mc"
    spec_beta: float | None = None
    seed: int = 0
    reps: int = 50
    threads: int = 1
    se_reps: int = 0
    n_shifts: int = 250

    def estimate_config(self) -> EstimateConfig:
        return EstimateConfig(**self.est_overrides)

    def dgp_config(self) -> DgpConfig:
        over = dict(self.dgp_overrides)
        over.setdefault("seed", self.seed)
        return DgpConfig(**over)

    def echo(self) -> dict:
        """Flat key=value view of every effective setting."""
        est = self.estimate_config()
        dgp = self.dgp_config()
        out = {}
        for key, (section, attr, _) in KEY_TABLE.items():
            if section == "est":
                val = getattr(est, attr)
            elif section == "dgp":
                val = getattr(dgp, attr)
            else:
                val = getattr(self, attr)
            if val is None:
                continue
            if isinstance(val, tuple):
                val = " ".join(str(v) for v in val)
            out[key] = val
        return out


def apply_setting(cfg: RunConfig, key: str, raw: str) -> None:
    if key not in KEY_TABLE:
        raise ConfigError(f"unknown configuration key {key!r}")
    section, attr, caster = KEY_TABLE[key]
    try:
        value = caster(raw) if isinstance(raw, str) else raw
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    if section == "est":
        cfg.est_overrides[attr] = value
    elif section == "dgp":
        cfg.dgp_overrides[attr] = value
    else:
        setattr(cfg, attr, value)


def load_config_file(cfg: RunConfig, path) -> None:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            apply_setting(cfg, key, raw)


def write_config_echo(echo: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, val in sorted(echo.items()):
            fh.write(f"{key} = {val}\n")
