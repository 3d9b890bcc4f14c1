"""Single-index regressors, the pair-sum gradient estimator, and outputs.

The index variables m-hat subtract from phi-hat the conditional NW
difference of xi(b*_l); the slope vector is then the density-weighted
average-derivative pair sum with a higher-order product kernel and an
undersmoothed bandwidth, rescaled to unit (or known) length.  The
quantile function is read off the basis solution as B(p)' theta*.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ccp import CcpEstimate, GeneratedRegressors, nw_weight_sums, _conditional_nw_diff
from .errors import ContractError, EstimationError, ValidationError
from .fie import BasisSolution, FieOperator
from .kernels import Bandwidth, KernelSpec, bandwidth_optimal, kernel_1d, kernel_grad_1d
from .panel import PanelSample


@dataclass
class IndexValues:
    """m-hat at the usable sample points (rows align with usable_index)."""

    m: np.ndarray
    usable_index: np.ndarray
    bandwidth: Bandwidth | float


def estimate_m(
    regs: GeneratedRegressors,
    basis: BasisSolution,
    sample: PanelSample,
    op: FieOperator,
    kernel: KernelSpec | None = None,
    h: Bandwidth | None = None,
    x_query: np.ndarray | None = None,
    phi_query: np.ndarray | None = None,
    min_weight: float = 1e-8,
    exclude_self: bool = False,
    on_empty: str = "raise",
) -> IndexValues:
    """Index regressors m_l = phi_l - {NW[xi(b*_l)|x, y=1] - NW[.|x, y=0]}.

    With ``x_query`` the index is evaluated at arbitrary state points
    (``phi_query`` must then hold phi-hat at those points); by default
    it is evaluated at the usable sample points, dropping any whose
    phi-hat or conditional cells were trimmed.
    """
    kernel = kernel or regs.kernel
    if h is None:
        h = bandwidth_optimal(sample.x.std(axis=0, ddof=1), sample.n_obs, kernel.order, sample.k)
    use = op.usable_index
    xi_vals = np.column_stack([op.xi(basis.values[:, ell]) for ell in range(basis.values.shape[1])])
    exclude = None
    if x_query is None:
        keep = np.ones(len(use), dtype=bool)
        if regs.valid is not None:
            keep = regs.valid[use]
        xq = sample.x[use][keep]
        phi = regs.phi_hat[use][keep]
        out_index = use[keep]
        if exclude_self:
            exclude = np.flatnonzero(keep)
    else:
        xq = np.atleast_2d(x_query)
        if phi_query is None:
            raise ContractError("phi_query is required when x_query is given")
        phi = np.atleast_2d(phi_query)
        out_index = np.arange(len(xq))
    diff, ok = _conditional_nw_diff(
        xq,
        sample.x[use],
        h,
        kernel.order,
        xi_vals,
        sample.y[use],
        min_weight,
        "increase the m bandwidth",
        exclude=exclude,
        on_empty=on_empty,
    )
    if not ok.all():
        return IndexValues(m=(phi - diff)[ok], usable_index=out_index[ok], bandwidth=h)
    return IndexValues(m=phi - diff, usable_index=out_index, bandwidth=h)


@dataclass
class ThetaEstimate:
    """Raw pair-sum value, its norm, and the rescaled direction."""

    theta_raw: np.ndarray
    lambda_hat: float
    theta_star: np.ndarray
    known_scale: float | None = None
    standard_errors: np.ndarray | None = None
    se_reps: int | None = None


def pss_estimate(
    m: np.ndarray,
    y: np.ndarray,
    kernel: KernelSpec | None = None,
    h: float | Bandwidth = None,
    block: int = 256,
) -> np.ndarray:
    """Density-weighted average-derivative pair sum.

    theta = -2/(N(N-1)) * h**-(k+1) * sum_t sum_{s != t}
    grad K((m_t - m_s)/h) y_t, the kernel estimate of
    -2 E[Y grad f(m)] = E[f(m) grad E[Y|m]], which is proportional to
    the index coefficients with a positive factor.  By oddness of the
    gradient this collapses to sum_{t<s} grad K((m_t - m_s)/h)
    (y_t - y_s) over unordered pairs, which is how it is accumulated
    (constant y gives an exact zero and flipping y negates the value
    exactly).  Observations are put in a canonical order first so the
    result is bit-identical under input permutations.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    y = np.asarray(y, dtype=float)
    N, k = m.shape
    if N < 2:
        raise ContractError("pair-sum estimator needs at least 2 usable observations")
    if h is None:
        raise ContractError("bandwidth h is required")
    hval = float(np.asarray(h.value if isinstance(h, Bandwidth) else h))
    kernel = kernel or KernelSpec("high_order_product", k, 4)
    if kernel.dimension != k:
        raise ContractError(f"kernel dimension {kernel.dimension} != index dimension {k}")

    order = np.lexsort(tuple([y] + [m[:, j] for j in range(k - 1, -1, -1)]))
    ms = m[order]
    ys = y[order]

    acc = np.zeros(k)
    for a in range(0, N, block):
        b = min(a + block, N)
        u = (ms[a:b, None, :] - ms[None, :, :]) / hval
        k1 = kernel_1d(u, kernel.order)
        g1 = kernel_grad_1d(u, kernel.order)
        rows = np.arange(a, b)[:, None]
        cols = np.arange(N)[None, :]
        upper = cols > rows
        dy = np.where(upper, ys[a:b, None] - ys[None, :], 0.0)
        for j in range(k):
            others = np.prod(np.delete(k1, j, axis=2), axis=2) if k > 1 else 1.0
            acc[j] += np.sum(g1[:, :, j] * others * dy)
    return -2.0 / (N * (N - 1)) * acc / hval ** (k + 1)


def pss_estimate_standardized(
    m: np.ndarray,
    y: np.ndarray,
    kernel: KernelSpec | None = None,
    h: float | Bandwidth = None,
    block: int = 256,
) -> np.ndarray:
    """Pair sum on per-component standardized index regressors.

    Standardizing m is a reparametrization of the single index: with
    z = m/sigma the index coefficients become sigma*theta, so dividing
    the estimate by sigma componentwise restores the direction of
    theta.  This keeps the scale-free bandwidth rule T**(-1/gamma)
    meaningful when index components have very different units.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    sigma = m.std(axis=0, ddof=1)
    if np.any(sigma <= 0):
        raise EstimationError(
            "an index component is constant across usable observations; "
            "the pair-sum estimator cannot identify its coefficient"
        )
    psi = pss_estimate(m / sigma, y, kernel=kernel, h=h, block=block)
    return psi / sigma


def normalize_theta(theta_raw: np.ndarray, known_scale: float | None = None) -> ThetaEstimate:
    """Scale the raw estimate to unit norm, or to a known scale."""
    theta_raw = np.asarray(theta_raw, dtype=float)
    lam = float(np.linalg.norm(theta_raw))
    if lam == 0.0 or not np.isfinite(lam):
        raise EstimationError("estimator degenerate; check bandwidths")
    scale = 1.0 if known_scale is None else float(known_scale)
    return ThetaEstimate(
        theta_raw=theta_raw,
        lambda_hat=lam,
        theta_star=theta_raw / lam * scale,
        known_scale=known_scale,
    )


@dataclass
class QuantileEstimate:
    """Shock-difference quantile function on the support grid.

    ``q_hat`` is the basis form B(p)' theta*; ``q_hat_z`` the
    uncorrected z(p)' theta* diagnostic.  Outside the estimated support
    the function is extended flat (and flagged).
    """

    grid: np.ndarray
    q_hat: np.ndarray
    q_hat_z: np.ndarray | None
    support: tuple[float, float]
    flat_extension: bool = True

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.interp(p, self.grid, self.q_hat, left=self.q_hat[0], right=self.q_hat[-1])


def estimate_quantile(
    z,
    theta: ThetaEstimate,
    basis: BasisSolution | None = None,
) -> QuantileEstimate:
    """Q-hat on the support grid from the basis (primary) and z (diagnostic)."""
    if z.grid.size == 0:
        raise ContractError("empty projection grid")
    q_z = z.z_values @ theta.theta_star
    if basis is not None:
        q = basis.values @ theta.theta_star
    else:
        q = q_z
    return QuantileEstimate(
        grid=z.grid,
        q_hat=q,
        q_hat_z=q_z,
        support=(float(z.grid[0]), float(z.grid[-1])),
    )


@dataclass
class ResampleResult:
    standard_errors: np.ndarray
    draws: np.ndarray
    n_ok: int
    failures: list = field(default_factory=list)
    scheme: str = "paths"


def _block_bootstrap_sample(sample: PanelSample, block_length: int, rng) -> PanelSample:
    """Circular block bootstrap of a single-path panel, glued as one path."""
    T = sample.n_obs
    n_blocks = int(np.ceil(T / block_length))
    starts = rng.integers(0, T, size=n_blocks)
    idx = (starts[:, None] + np.arange(block_length)[None, :]).reshape(-1) % T
    idx = idx[:T]
    return PanelSample(
        path_id=np.zeros(T, dtype=np.int64),
        t=np.arange(T, dtype=np.int64),
        y=sample.y[idx],
        x=sample.x[idx],
    )


def resample_se(
    sample: PanelSample,
    spec,
    config,
    reps: int,
    seed: int = 0,
    known_scale: float | None = None,
    n_jobs: int = 1,
    block_length: int | None = None,
) -> ResampleResult:
    """Resampled standard errors of theta* by re-running the pipeline.

    Panels with two or more paths are resampled at the path level
    (paths drawn with replacement).  A single-path panel falls back to
    a circular block bootstrap glued into one pseudo-path; the default
    block length is max(4 * truncation horizon, T/8) so forward sums
    rarely straddle a seam.
    """
    from .pipeline import run_estimate, effective_truncation

    if reps < 2:
        raise ValidationError("need reps >= 2")
    ss = np.random.SeedSequence(seed).spawn(reps)
    multi = sample.n_paths >= 2
    L = effective_truncation(sample, spec, config)
    if not multi and block_length is None:
        block_length = max(4 * (L + 1), sample.n_obs // 8)
    path_ids = np.unique(sample.path_id)

    def one(rep: int) -> np.ndarray:
        rng = np.random.default_rng(ss[rep])
        if multi:
            draw = rng.choice(path_ids, size=len(path_ids), replace=True)
            boot = sample.subset_paths(draw)
        else:
            boot = _block_bootstrap_sample(sample, block_length, rng)
        report = run_estimate(boot, spec, config, known_scale=known_scale)
        return report.theta.theta_star

    results: dict[int, np.ndarray] = {}
    failures: list[tuple[int, str]] = []
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futs = {r: pool.submit(_resample_worker, sample, spec, config, ss[r], multi, block_length, known_scale, path_ids) for r in range(reps)}
            for r, fut in futs.items():
                try:
                    results[r] = fut.result()
                except Exception as exc:  # noqa: BLE001
                    failures.append((r, f"{type(exc).__name__}: {exc}"))
    else:
        for r in range(reps):
            try:
                results[r] = one(r)
            except Exception as exc:  # noqa: BLE001
                failures.append((r, f"{type(exc).__name__}: {exc}"))

    if len(failures) > 0.1 * reps:
        raise EstimationError(
            f"{len(failures)}/{reps} bootstrap replications failed; first: {failures[0][1]}"
        )
    draws = np.vstack([results[r] for r in sorted(results)])
    se = draws.std(axis=0, ddof=1)
    return ResampleResult(
        standard_errors=se,
        draws=draws,
        n_ok=len(results),
        failures=failures,
        scheme="paths" if multi else f"blocks(len={block_length})",
    )


def _resample_worker(sample, spec, config, seed_seq, multi, block_length, known_scale, path_ids):
    from .pipeline import run_estimate

    rng = np.random.default_rng(seed_seq)
    if multi:
        draw = rng.choice(path_ids, size=len(path_ids), replace=True)
        boot = sample.subset_paths(draw)
    else:
        boot = _block_bootstrap_sample(sample, block_length, rng)
    report = run_estimate(boot, spec, config, known_scale=known_scale)
    return report.theta.theta_star
