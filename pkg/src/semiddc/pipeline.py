"""End-to-end estimation pipeline: p-hat -> delta/phi -> z -> b* -> m -> theta -> Q.

Each stage consumes only earlier-stage outputs.  The pipeline is
deterministic given the sample and configuration; the report bundles
every stage's artifacts plus the bandwidths, truncation horizon and
contraction diagnostic actually used.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from . import ccp as ccp_mod
from . import fie as fie_mod
from . import index as index_mod
from .errors import ConfigError, ConvergenceError
from .kernels import (
    Bandwidth,
    KernelSpec,
    bandwidth_optimal,
    bandwidth_pss,
    bandwidth_suboptimal,
    robust_scale,
    truncation_length,
)
from .panel import PanelSample, UtilitySpec, apply_transforms


@dataclass(frozen=True)
class EstimateConfig:
    """Estimation knobs; defaults follow the bandwidth and truncation rules."""

    kernel_family: str = "gaussian_product"
    kernel_order: int = 2
    pss_kernel_order: int = 4
    grid_size: int = 200
    eps_p: float = 1e-6
    tol_trunc: float = 1e-4
    truncation_L: int | None = None
    gamma: float | None = None
    pss_bandwidth_scale: float = 1.0
    pss_standardize: bool = True
    pss_leave_both_out: bool = False
    leave_one_out: bool = False
    synthetic_exact: bool = False
    fie_tol: float = 1e-10
    fie_max_iter: int = 500
    fie_damping: float = 0.0
    fie_override: bool = False
    contraction_bins: int = 25
    min_cell_weight: float = 1e-8
    trim_max_share: float = 0.25
    grid_p_quantiles: tuple[float, float] | None = None
    known_scale: float | None = None

    def __post_init__(self):
        if self.grid_size < 2:
            raise ConfigError("grid_size must be >= 2")
        if not (0.0 <= self.eps_p < 0.5):
            raise ConfigError("eps_p must lie in [0, 0.5)")
        if self.tol_trunc <= 0:
            raise ConfigError("tol_trunc must be positive")
        if self.truncation_L is not None and self.truncation_L < 1:
            raise ConfigError("truncation_L must be >= 1")
        if not (0.0 <= self.fie_damping < 1.0):
            raise ConfigError("fie_damping must lie in [0, 1)")
        if self.pss_bandwidth_scale <= 0:
            raise ConfigError("pss_bandwidth_scale must be positive")
        if not (0.0 <= self.trim_max_share <= 1.0):
            raise ConfigError("trim_max_share must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def effective_truncation(sample: PanelSample, spec: UtilitySpec, config: EstimateConfig) -> int:
    if config.truncation_L is not None:
        return config.truncation_L
    w = apply_transforms(sample, spec)
    return truncation_length(spec.beta, w, config.tol_trunc)


@dataclass
class EstimateReport:
    """Everything the estimation run produced."""

    theta: index_mod.ThetaEstimate
    support: tuple[float, float]
    quantile: index_mod.QuantileEstimate
    z: ccp_mod.ZProjection
    basis: fie_mod.BasisSolution
    ccp: ccp_mod.CcpEstimate
    regs: ccp_mod.GeneratedRegressors
    m: index_mod.IndexValues
    contraction: fie_mod.ContractionReport
    truncation_L: int
    bandwidths: dict
    component_names: tuple[str, ...]
    stage_seconds: dict
    config: EstimateConfig
    sample: PanelSample = field(repr=False)
    spec: UtilitySpec = field(repr=False)
    operator: fie_mod.FieOperator = field(repr=False)

    def to_dict(self) -> dict:
        th = self.theta
        return {
            "theta_star": th.theta_star.tolist(),
            "theta_raw": th.theta_raw.tolist(),
            "lambda_hat": th.lambda_hat,
            "known_scale": th.known_scale,
            "standard_errors": None
            if th.standard_errors is None
            else th.standard_errors.tolist(),
            "se_reps": th.se_reps,
            "component_names": list(self.component_names),
            "support": list(self.support),
            "q_grid": [
                {"p": float(p), "q_hat": float(q)}
                for p, q in zip(self.quantile.grid, self.quantile.q_hat)
            ],
            "truncation_L": self.truncation_L,
            "n_usable": int(self.regs.usable.sum()),
            "n_obs": self.sample.n_obs,
            "contraction": self.contraction.to_dict(),
            "bandwidths": {
                k: (np.asarray(v.value).tolist() if isinstance(v, Bandwidth) else v)
                for k, v in self.bandwidths.items()
            },
            "m_values": "diag_regressors.csv",
            "config_echo": self.config.to_dict(),
        }

    def diagnostics_frame(self) -> pd.DataFrame:
        data = {
            "path_id": self.sample.path_id,
            "t": self.sample.t,
            "y": self.sample.y,
            "p_hat": self.ccp.p_hat,
            "usable": self.regs.usable.astype(int),
        }
        for d, delta in self.regs.delta.items():
            for j in range(delta.shape[1]):
                data[f"delta{d}_{j + 1}"] = delta[:, j]
        for j, name in enumerate(self.component_names):
            data[f"phi_{name}"] = self.regs.phi_hat[:, j]
        df = pd.DataFrame(data)
        for j, name in enumerate(self.component_names):
            col = np.full(self.sample.n_obs, np.nan)
            col[self.m.usable_index] = self.m.m[:, j]
            df[f"m_{name}"] = col
        return df

    def basis_frame(self) -> pd.DataFrame:
        data = {"p": self.basis.grid}
        for j in range(self.basis.values.shape[1]):
            data[f"b{j + 1}"] = self.basis.values[:, j]
        return pd.DataFrame(data)

    def quantile_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "p": self.quantile.grid,
                "q_hat": self.quantile.q_hat,
                "q_hat_z": self.quantile.q_hat_z,
            }
        )


def run_estimate(
    sample: PanelSample,
    spec: UtilitySpec,
    config: EstimateConfig | None = None,
    known_scale: float | None = None,
) -> EstimateReport:
    """Run the full multi-step estimator on a panel."""
    config = config or EstimateConfig()
    if known_scale is None:
        known_scale = config.known_scale
    times: dict[str, float] = {}
    bandwidths: dict[str, object] = {}

    def _tick(stage, t0):
        times[stage] = round(time.perf_counter() - t0, 4)
        return time.perf_counter()

    t0 = time.perf_counter()
    w_all = apply_transforms(sample, spec)
    t0 = _tick("transforms", t0)

    k = sample.k
    x_kernel = KernelSpec(config.kernel_family, k, config.kernel_order)
    sigma_x = robust_scale(sample.x)
    h_p = bandwidth_optimal(sigma_x, sample.n_obs, x_kernel.order, k)
    ccp = ccp_mod.estimate_ccp(
        sample, x_kernel, h_p, eps=config.eps_p, leave_one_out=config.leave_one_out
    )
    support = ccp_mod.estimate_support(ccp)
    bandwidths["h_p"] = h_p
    t0 = _tick("ccp", t0)

    L = config.truncation_L or truncation_length(spec.beta, w_all, config.tol_trunc)
    leads = ccp_mod.compute_leads(sample, L, spec.terminal_action)
    override = {}
    if config.synthetic_exact:
        override = {1: ccp.p_hat, 0: 1.0 - ccp.p_hat}
    delta = {
        d: ccp_mod.compute_delta(sample, spec, d, leads, indicator_override=override.get(d))
        for d in (0, 1)
    }
    t0 = _tick("delta", t0)

    h_phi = bandwidth_optimal(sigma_x, sample.n_obs, x_kernel.order, k)
    regs = ccp_mod.estimate_phi(
        sample,
        spec,
        delta,
        leads,
        x_kernel,
        h_phi,
        min_weight=config.min_cell_weight,
        exclude_self=config.pss_leave_both_out,
        on_empty="trim",
    )
    trimmed = int((~regs.valid).sum())
    if trimmed > config.trim_max_share * sample.n_obs:
        raise ConvergenceError(
            f"{trimmed}/{sample.n_obs} sample points have empty conditional cells; "
            "increase the phi bandwidth"
        )
    bandwidths["h_phi"] = h_phi
    t0 = _tick("phi", t0)

    p_kernel = KernelSpec("gaussian", 1, 2)
    h_z = bandwidth_suboptimal(ccp.p_hat.std(ddof=1), sample.n_obs, p_kernel.order)
    bandwidths["h_z"] = h_z
    bandwidths["h_xi"] = h_z
    grid_range = support
    if config.grid_p_quantiles is not None:
        qlo, qhi = config.grid_p_quantiles
        p_pool = ccp.p_hat[regs.usable]
        grid_range = (
            float(np.quantile(p_pool, qlo)),
            float(np.quantile(p_pool, qhi)),
        )
    grid = ccp_mod.probability_grid(grid_range, config.grid_size)
    op = fie_mod.build_fie_operator(
        ccp,
        sample.y,
        leads,
        spec.beta,
        grid,
        p_kernel,
        h_z,
        min_weight=config.min_cell_weight,
    )
    if config.synthetic_exact:
        z = _exact_mode_z(sample, spec, delta, ccp, op, p_kernel, h_z, config)
    else:
        z = ccp_mod.estimate_z(
            regs, ccp, p_kernel, h_z, config.grid_size, min_weight=config.min_cell_weight
        )
    t0 = _tick("z", t0)

    contraction = fie_mod.check_contraction(
        ccp, sample.y, leads, spec.beta, n_bins=config.contraction_bins
    )
    if not contraction.passed and not config.fie_override:
        raise ConvergenceError(
            f"contraction diagnostic failed (statistic {contraction.statistic:.3f} >= 1); "
            "set fie_override to solve anyway"
        )
    basis = fie_mod.solve_all_basis(
        z.z_values,
        op,
        tol=config.fie_tol,
        max_iter=config.fie_max_iter,
        damping=config.fie_damping,
    )
    t0 = _tick("basis", t0)

    h_m = bandwidth_optimal(sigma_x, sample.n_obs, x_kernel.order, k)
    m = index_mod.estimate_m(
        regs,
        basis,
        sample,
        op,
        x_kernel,
        h_m,
        min_weight=config.min_cell_weight,
        exclude_self=config.pss_leave_both_out,
        on_empty="trim",
    )
    bandwidths["h_m"] = h_m
    t0 = _tick("m", t0)

    n_use = len(m.usable_index)
    h_theta = bandwidth_pss(n_use, spec.k_theta, config.gamma)
    h_val = float(h_theta.value) * config.pss_bandwidth_scale
    pss_kernel = KernelSpec("high_order_product", spec.k_theta, config.pss_kernel_order)
    y_use = sample.y[m.usable_index]
    if config.pss_standardize:
        theta_raw = index_mod.pss_estimate_standardized(m.m, y_use, pss_kernel, h_val)
    else:
        theta_raw = index_mod.pss_estimate(m.m, y_use, pss_kernel, h_val)
    theta = index_mod.normalize_theta(theta_raw, known_scale)
    bandwidths["h_theta"] = h_val
    bandwidths["gamma"] = h_theta.inputs["gamma"]
    t0 = _tick("theta", t0)

    quantile = index_mod.estimate_quantile(z, theta, basis)
    t0 = _tick("quantile", t0)

    return EstimateReport(
        theta=theta,
        support=support,
        quantile=quantile,
        z=z,
        basis=basis,
        ccp=ccp,
        regs=regs,
        m=m,
        contraction=contraction,
        truncation_L=L,
        bandwidths=bandwidths,
        component_names=spec.component_names(),
        stage_seconds=times,
        config=config,
        sample=sample,
        spec=spec,
        operator=op,
    )


def _exact_mode_z(sample, spec, delta, ccp, op, p_kernel, h_z, config):
    """z built in p-space with the operator's own conditional weights.

    Pairing the z construction with the xi-side weights makes the
    constant-direction basis identity b*_1 = 1 hold to float precision,
    which is the point of the synthetic exact-cancellation mode.
    """
    use = op.usable_index
    own_blocks = []
    delta_blocks = []
    for d in (0, 1):
        k_d = spec.k1 if d == 1 else spec.k0
        if k_d == 0:
            continue
        own_blocks.append(spec.block(sample.x, d)[use] * (1.0 if d == 1 else -1.0))
        delta_blocks.append(delta[d][use])
    own = np.hstack(own_blocks)
    dstack = np.hstack(delta_blocks)
    ((num, den),) = ccp_mod.nw_weight_sums(
        op.grid[:, None],
        ccp.p_hat[use][:, None],
        op.bandwidth,
        p_kernel.order,
        own,
        [np.ones(len(use), dtype=bool)],
    )
    z_vals = num / den[:, None] + op.wdiff @ dstack
    return ccp_mod.ZProjection(grid=op.grid, z_values=z_vals, bandwidth=h_z)


def index_curves(
    report: EstimateReport,
    vary_dim: int = 0,
    level_quantiles: tuple[float, ...] = (0.25, 0.5, 0.75),
    n_points: int = 40,
) -> pd.DataFrame:
    """m(x)' theta* along one state coordinate at fixed levels of the others.

    Emits the figure data for the value-difference curves: per level of
    the held-fixed coordinates, the fitted index as the varied
    coordinate sweeps its central sample range.
    """
    sample, spec = report.sample, report.spec
    x = sample.x
    lo, hi = np.quantile(x[:, vary_dim], [0.05, 0.95])
    sweep = np.linspace(lo, hi, n_points)
    frames = []
    for q in level_quantiles:
        fixed = np.quantile(x, q, axis=0)
        xq = np.tile(fixed, (n_points, 1))
        xq[:, vary_dim] = sweep
        phi_q = ccp_mod.estimate_phi(
            sample,
            spec,
            report.regs.delta,
            report.regs.leads,
            report.regs.kernel,
            report.regs.bandwidth,
            x_query=xq,
            min_weight=report.config.min_cell_weight,
            on_empty="trim",
        ).phi_hat
        m_res = index_mod.estimate_m(
            report.regs,
            report.basis,
            sample,
            report.operator,
            report.regs.kernel,
            report.m.bandwidth,
            x_query=xq,
            phi_query=phi_q,
            min_weight=report.config.min_cell_weight,
            on_empty="trim",
        )
        curve = np.full(n_points, np.nan)
        curve[m_res.usable_index] = m_res.m @ report.theta.theta_star
        frames.append(
            pd.DataFrame(
                {
                    "level_quantile": q,
                    f"x{vary_dim + 1}": sweep,
                    "index_value": curve,
                }
            )
        )
    return pd.concat(frames, ignore_index=True)
