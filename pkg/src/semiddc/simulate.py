"""Synthetic data generators and the exact dynamic-programming oracle.

The Monte Carlo design: flow utility of action 1 is theta1*x1 +
theta2*x2 (plus an extreme-value shock), flow utility of action 0 is
the constant theta0 (plus its own shock); choosing 1 accumulates the
state (x' = x + lognormal increments) while choosing 0 redraws it
fresh (x' = lognormal pair).  With theta1, theta2 < 0 the accumulating
action loses ground as the state grows, so restarts recur and the
chain is ergodic.  Under independent EV1 shocks the shock difference
eta = eps0 - eps1 is standard logistic, hence p(x) = logistic(eta*(x))
and the true quantile function is the logit.

The oracle solves the expected value function by value iteration on a
log-spaced grid, with lognormal transition expectations computed by
Gauss-Hermite quadrature and the EV1 expected maximum in closed
log-sum-exp form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from numpy.polynomial.hermite import hermgauss
from scipy.special import expit

from .errors import ConvergenceError, EstimationError, ValidationError
from .panel import PanelSample

EULER_GAMMA = float(np.euler_gamma)


@dataclass(frozen=True)
class DgpConfig:
    """Monte Carlo design parameters (defaults follow the study design)."""

    theta0: float = -5.0
    theta1: float = -1.0
    theta2: float = -2.0
    beta: float = 0.9
    T: int = 1000
    n_paths: int = 1
    seed: int = 0
    burn_in: int = 100
    grid_size: int = 501
    gh_nodes: int = 15
    grid_quantiles: tuple[float, float] = (0.001, 0.999)
    shock_family: str = "ev1"

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ValidationError("beta must lie in (0,1)")
        if self.T < 1 or self.n_paths < 1:
            raise ValidationError("need T >= 1 and n_paths >= 1")
        if self.shock_family != "ev1":
            raise ValidationError("only extreme-value-I shocks are supported")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2])


@dataclass
class OracleSolution:
    """Value-iteration solution on a 2-D log-spaced state grid."""

    grid1: np.ndarray
    grid2: np.ndarray
    v1: np.ndarray            # choice-specific value of accumulating, (n1, n2)
    v0: float                 # choice-specific value of restarting (state-free)
    value: np.ndarray         # expected value function V^e, (n1, n2)
    eta_star: np.ndarray      # cutoff v1 - v0, (n1, n2)
    p: np.ndarray             # true CCP logistic(eta_star), (n1, n2)
    reset_value: float        # E[V^e(fresh draw)]
    bellman_residual: float
    iterations: int
    config: DgpConfig

    def interp_eta(self, x: np.ndarray) -> tuple[np.ndarray, int]:
        """Bilinear interpolation of the cutoff in log-state space.

        Returns (values, n_escaped); queries outside the grid box are
        clamped to the nearest edge and counted.
        """
        return _bilinear_log(self.grid1, self.grid2, self.eta_star, x)

    def interp_p(self, x: np.ndarray) -> np.ndarray:
        eta, _ = self.interp_eta(x)
        return expit(eta)


def _log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.exp(np.linspace(np.log(lo), np.log(hi), n))


def _axis_interp_weights(grid: np.ndarray, pts: np.ndarray):
    """Linear interpolation indices/weights of ``pts`` in log(grid)."""
    lg = np.log(grid)
    q = np.log(np.clip(pts, grid[0], grid[-1]))
    idx = np.clip(np.searchsorted(lg, q) - 1, 0, len(grid) - 2)
    t = (q - lg[idx]) / (lg[idx + 1] - lg[idx])
    return idx, np.clip(t, 0.0, 1.0)


def _bilinear_log(g1, g2, f, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    escaped = int(
        np.sum(
            (x[:, 0] < g1[0]) | (x[:, 0] > g1[-1]) | (x[:, 1] < g2[0]) | (x[:, 1] > g2[-1])
        )
    )
    i, u = _axis_interp_weights(g1, x[:, 0])
    j, v = _axis_interp_weights(g2, x[:, 1])
    vals = (
        f[i, j] * (1 - u) * (1 - v)
        + f[i + 1, j] * u * (1 - v)
        + f[i, j + 1] * (1 - u) * v
        + f[i + 1, j + 1] * u * v
    )
    return vals, escaped


class _GrowOperator:
    """Precomputed Gauss-Hermite expectation E[V(x1+nu1, x2+nu2)] on the grid.

    The separable quadrature-plus-interpolation along each axis is a
    fixed linear map, assembled once into per-axis matrices so each
    value-iteration sweep is two matrix products.
    """

    def __init__(self, g1, g2, gh_nodes):
        z, w = hermgauss(gh_nodes)
        self.incr = np.exp(np.sqrt(2.0) * z)      # lognormal(0,1) nodes
        self.w = w / np.sqrt(np.pi)
        self.M1 = self._axis_matrix(g1)
        self.M2 = self._axis_matrix(g2)

    def _axis_matrix(self, grid) -> np.ndarray:
        n = len(grid)
        M = np.zeros((n, n))
        rows = np.arange(n)
        for wq, a in zip(self.w, self.incr):
            idx, t = _axis_interp_weights(grid, grid + a)
            np.add.at(M, (rows, idx), wq * (1 - t))
            np.add.at(M, (rows, idx + 1), wq * t)
        return M

    def __call__(self, V: np.ndarray) -> np.ndarray:
        return self.M1 @ V @ self.M2.T


def _fresh_weights(g1, g2, gh_nodes) -> np.ndarray:
    """Bilinear scatter of the fresh-draw quadrature onto the grid."""
    z, w = hermgauss(gh_nodes)
    incr = np.exp(np.sqrt(2.0) * z)
    w = w / np.sqrt(np.pi)
    F = np.zeros((len(g1), len(g2)))
    i, u = _axis_interp_weights(g1, incr)
    j, v = _axis_interp_weights(g2, incr)
    for a in range(len(incr)):
        for b in range(len(incr)):
            wt = w[a] * w[b]
            F[i[a], j[b]] += wt * (1 - u[a]) * (1 - v[b])
            F[i[a] + 1, j[b]] += wt * u[a] * (1 - v[b])
            F[i[a], j[b] + 1] += wt * (1 - u[a]) * v[b]
            F[i[a] + 1, j[b] + 1] += wt * u[a] * v[b]
    return F


def _grid_range_from_presim(config: DgpConfig) -> tuple[tuple[float, float], tuple[float, float]]:
    """Pilot run on a wide fixed grid to locate the stationary mass."""
    wide = replace(
        config,
        grid_size=121,
        grid_quantiles=config.grid_quantiles,
        seed=config.seed,
    )
    oracle = _solve_on_grid(wide, _log_grid(5e-3, 150.0, 121), _log_grid(5e-3, 150.0, 121))
    pilot = simulate_panel(
        replace(config, T=20000, n_paths=1, burn_in=200), oracle, _check_escapes=False
    )
    qlo, qhi = config.grid_quantiles
    lo1, hi1 = np.quantile(pilot.x[:, 0], [qlo, qhi])
    lo2, hi2 = np.quantile(pilot.x[:, 1], [qlo, qhi])
    # Margin so simulated excursions beyond the pilot quantiles stay on-grid.
    return (lo1 * 0.5, hi1 * 1.8), (lo2 * 0.5, hi2 * 1.8)


def _solve_on_grid(config: DgpConfig, g1, g2, tol: float = 1e-10, max_iter: int = 3000) -> OracleSolution:
    grow = _GrowOperator(g1, g2, config.gh_nodes)
    fresh = _fresh_weights(g1, g2, config.gh_nodes)
    flow1 = config.theta1 * g1[:, None] + config.theta2 * g2[None, :]
    V = np.zeros((len(g1), len(g2)))
    change = np.inf
    for it in range(1, max_iter + 1):
        reset_val = float(np.sum(fresh * V))
        v1 = flow1 + config.beta * grow(V)
        v0 = config.theta0 + config.beta * reset_val
        V_new = EULER_GAMMA + np.logaddexp(v0, v1)
        change = float(np.max(np.abs(V_new - V)))
        V = V_new
        if change <= tol:
            break
    else:
        raise ConvergenceError(
            f"value iteration did not reach {tol:g} in {max_iter} sweeps; last change {change:g}"
        )
    reset_val = float(np.sum(fresh * V))
    v1 = flow1 + config.beta * grow(V)
    v0 = config.theta0 + config.beta * reset_val
    resid = float(np.max(np.abs(V - (EULER_GAMMA + np.logaddexp(v0, v1)))))
    eta = v1 - v0
    return OracleSolution(
        grid1=g1,
        grid2=g2,
        v1=v1,
        v0=float(v0),
        value=V,
        eta_star=eta,
        p=expit(eta),
        reset_value=float(reset_val),
        bellman_residual=resid,
        iterations=it,
        config=config,
    )


def solve_oracle(config: DgpConfig, tol: float = 1e-10) -> OracleSolution:
    """Solve the cutoff/CCP oracle on a grid covering the stationary mass."""
    (lo1, hi1), (lo2, hi2) = _grid_range_from_presim(config)
    g1 = _log_grid(lo1, hi1, config.grid_size)
    g2 = _log_grid(lo2, hi2, config.grid_size)
    return _solve_on_grid(config, g1, g2, tol=tol)


def bellman_residual_offgrid(oracle: OracleSolution, points: np.ndarray) -> float:
    """Sup |V(x) - (Bellman operator V)(x)| at off-grid points."""
    cfg = oracle.config
    z, w = hermgauss(cfg.gh_nodes)
    incr = np.exp(np.sqrt(2.0) * z)
    w = w / np.sqrt(np.pi)
    pts = np.atleast_2d(points)
    V_at, _ = _bilinear_log(oracle.grid1, oracle.grid2, oracle.value, pts)
    ev_grow = np.zeros(len(pts))
    for wi, a in zip(w, incr):
        inner = np.zeros(len(pts))
        for wj, b in zip(w, incr):
            shifted = pts + np.array([a, b])
            vals, _ = _bilinear_log(oracle.grid1, oracle.grid2, oracle.value, shifted)
            inner += wj * vals
        ev_grow += wi * inner
    flow1 = cfg.theta1 * pts[:, 0] + cfg.theta2 * pts[:, 1]
    v1 = flow1 + cfg.beta * ev_grow
    v0 = cfg.theta0 + cfg.beta * oracle.reset_value
    applied = EULER_GAMMA + np.logaddexp(v0, v1)
    return float(np.max(np.abs(V_at - applied)))


def simulate_panel(
    config: DgpConfig,
    oracle: OracleSolution | None = None,
    _check_escapes: bool = True,
) -> PanelSample:
    """Simulate panels from the oracle policy; reproducible from the seed.

    The shock difference is drawn directly as standard logistic (the
    difference of two independent standard EV1 draws); the choice is
    y = 1{eta <= eta*(x)} with the cutoff interpolated bilinearly in
    log-state space.  Choosing 1 adds lognormal increments to the
    state; choosing 0 redraws both coordinates fresh.
    """
    if oracle is None:
        oracle = solve_oracle(config)
    rng = np.random.default_rng(config.seed)
    total = config.T + config.burn_in
    n = config.n_paths
    x = rng.lognormal(0.0, 1.0, size=(n, 2))
    rows_x = np.empty((n, total, 2))
    rows_y = np.empty((n, total), dtype=np.int64)
    escaped = 0
    for t in range(total):
        eta_star, esc = oracle.interp_eta(x)
        escaped += esc
        eta = rng.logistic(0.0, 1.0, size=n)
        y = (eta <= eta_star).astype(np.int64)
        rows_x[:, t] = x
        rows_y[:, t] = y
        incr = rng.lognormal(0.0, 1.0, size=(n, 2))
        grow = y[:, None] == 1
        x = np.where(grow, x + incr, incr)
    if _check_escapes:
        rate = escaped / float(n * total)
        if rate > 0.01:
            raise EstimationError(
                f"{rate:.1%} of simulated states left the oracle grid; enlarge it"
            )
        if escaped:
            warnings.warn(
                f"{escaped} simulated states ({rate:.2%}) were edge-extrapolated"
            )
    keep = slice(config.burn_in, total)
    T_keep = config.T
    return PanelSample(
        path_id=np.repeat(np.arange(n), T_keep),
        t=np.tile(np.arange(T_keep), n),
        y=rows_y[:, keep].reshape(-1),
        x=rows_x[:, keep].reshape(-1, 2),
    )


def simulate_static_logit(theta, T: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Static single-index bed: X ~ N(0, I), Y = 1{logistic <= X'theta}."""
    theta = np.asarray(theta, dtype=float)
    if np.linalg.norm(theta) == 0:
        raise ValidationError("theta must be nonzero")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((T, len(theta)))
    y = (rng.logistic(0.0, 1.0, size=T) <= X @ theta).astype(np.int64)
    return X, y


def static_logit_panel(theta, T: int, seed: int = 0, path_length: int = 100) -> PanelSample:
    """Static single-index draws arranged as a panel.

    With states drawn iid regardless of the choice, the model is the
    degenerate member of the dynamic family whose continuation values
    cancel between actions: the optimal rule is the myopic
    y = 1{logistic <= x'theta}, the shock-difference quantile is the
    pure logit, and every forward-looking correction is zero in
    population.  Useful as a fully-known benchmark for the whole
    pipeline.
    """
    X, y = simulate_static_logit(theta, T, seed)
    n_paths = max(T // path_length, 1)
    ids = np.repeat(np.arange(n_paths), int(np.ceil(T / n_paths)))[:T]
    t_idx = np.concatenate([np.arange(np.sum(ids == p)) for p in range(n_paths)])
    return PanelSample(path_id=ids, t=t_idx, y=y, x=X)


# Taxi synthetic generator: calibrated so mean shift revenue/time land
# near the $293 / 530-minute shift-level targets.
TAXI_RULE = {
    "a0": -8.4,
    "a_income": 0.010,
    "a_blocks": 0.020,
    "a_blocks_sq": 0.00015,
    "mean_trip_revenue": 12.36,
    "sd_trip_revenue": 9.64,
    "mean_trip_minutes": 22.3,
    "sd_trip_minutes": 11.0,
}


def simulate_taxi_trips(
    n_shifts: int, seed: int = 0, rule: dict | None = None, max_trips: int = 200
) -> pd.DataFrame:
    """Synthetic shift records from a known logistic stopping rule.

    After each trip the driver quits iff a standard logistic draw falls
    below a0 + a_income*s + a_blocks*h + a_blocks_sq*h^2 where s is
    cumulative revenue and h cumulative time in 5-minute blocks.  The
    rule's income coefficient is positive and both time coefficients
    positive, so the quit hazard rises along the shift.
    """
    rule = {**TAXI_RULE, **(rule or {})}
    rng = np.random.default_rng(seed)

    def _gamma(mean, sd, size):
        shape = (mean / sd) ** 2
        scale = sd * sd / mean
        return rng.gamma(shape, scale, size)

    rows = []
    for sid in range(n_shifts):
        s = 0.0
        h = 0.0
        for _ in range(max_trips):
            rev = float(_gamma(rule["mean_trip_revenue"], rule["sd_trip_revenue"], 1)[0])
            mins = float(_gamma(rule["mean_trip_minutes"], rule["sd_trip_minutes"], 1)[0])
            s += rev
            h += mins / 5.0
            rows.append((sid, rev, mins))
            index = (
                rule["a0"]
                + rule["a_income"] * s
                + rule["a_blocks"] * h
                + rule["a_blocks_sq"] * h * h
            )
            if rng.logistic(0.0, 1.0) <= index:
                break
    return pd.DataFrame(rows, columns=["shift_id", "trip_revenue", "trip_minutes"])


@dataclass
class McResult:
    """Aggregated Monte Carlo table plus per-replication detail."""

    table: pd.DataFrame
    draws: np.ndarray
    failures: list[tuple[int, str]] = field(default_factory=list)

    def row(self, param: str) -> pd.Series:
        return self.table.set_index("param").loc[param]


def _mc_one_rep(args):
    rep, seed, config, oracle, est_config, known_scale = args
    from .pipeline import run_estimate
    from .panel import mc_utility_spec

    cfg = replace(config, seed=seed)
    sample = simulate_panel(cfg, oracle)
    spec = mc_utility_spec(config.beta)
    report = run_estimate(sample, spec, est_config, known_scale=known_scale)
    return rep, report.theta.theta_star


def run_montecarlo(
    config: DgpConfig,
    reps: int,
    est_config=None,
    known_scale: float | None = None,
    n_jobs: int = 1,
    oracle: OracleSolution | None = None,
) -> McResult:
    """Simulate/estimate ``reps`` panels and tabulate mean, sd and bias.

    Per-replication seeds are spawned deterministically from the master
    seed, so results do not depend on the worker count.
    """
    from .pipeline import EstimateConfig

    if reps < 2:
        raise ValidationError("need reps >= 2")
    est_config = est_config or EstimateConfig()
    if known_scale is None:
        known_scale = float(np.linalg.norm(config.theta))
    if oracle is None:
        oracle = solve_oracle(config)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(config.seed).spawn(reps)]
    jobs = [(r, seeds[r], config, oracle, est_config, known_scale) for r in range(reps)]

    results: dict[int, np.ndarray] = {}
    failures: list[tuple[int, str]] = []
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for job, fut in [(j, pool.submit(_mc_one_rep, j)) for j in jobs]:
                try:
                    rep, theta = fut.result()
                    results[rep] = theta
                except Exception as exc:  # noqa: BLE001 - record and continue
                    failures.append((job[0], f"{type(exc).__name__}: {exc}"))
    else:
        for job in jobs:
            try:
                rep, theta = _mc_one_rep(job)
                results[rep] = theta
            except Exception as exc:  # noqa: BLE001
                failures.append((job[0], f"{type(exc).__name__}: {exc}"))

    if len(failures) > 0.1 * reps:
        raise EstimationError(
            f"{len(failures)}/{reps} replications failed; first: {failures[0][1]}"
        )
    draws = np.vstack([results[r] for r in sorted(results)])
    true = config.theta
    rows = []
    for j, name in enumerate(("theta1", "theta2")):
        mean = float(np.mean(draws[:, j]))
        sd = float(np.std(draws[:, j], ddof=1))
        rows.append(
            {
                "T": config.T * config.n_paths,
                "param": name,
                "true": float(true[j]),
                "mean": mean,
                "sd": sd,
                "bias": mean - float(true[j]),
            }
        )
    return McResult(table=pd.DataFrame(rows), draws=draws, failures=failures)
