"""Fredholm-II solver for the shock-quantile basis functions.

The basis b*_l solves b(p) + (A b)(p) = z_l(p) on the estimated
support, where A applies the discounted conditional-difference
operator built from sample quantities: per usable observation t,
xi_t(b) = sum_s beta**s * integral of b from the support floor up to
the fitted probability of the s-step lead, then the difference of NW
averages of xi over the y=1 and y=0 cells at each grid point.

The primary solver is plain successive approximation (optionally
damped); a dense collocation solve of (I + A) b = z serves as an
independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ccp import CcpEstimate, LeadTable, nw_weight_sums
from .errors import ContractError, ConvergenceError, EstimationError, NumericError
from .kernels import Bandwidth, KernelSpec, bandwidth_suboptimal


def _cumulative_trapezoid(b: np.ndarray, dx: float) -> np.ndarray:
    out = np.empty_like(b)
    out[0] = 0.0
    np.cumsum(0.5 * dx * (b[1:] + b[:-1]), out=out[1:])
    return out


@dataclass
class FieOperator:
    """Matrix-free application of the discounted integral operator.

    ``lead_cell``/``lead_frac`` locate each usable observation's future
    fitted probabilities inside the grid (cell index and fractional
    position; cell -1 marks a structurally-zero future).  ``wdiff`` is
    the difference of row-normalized kernel weights of the y=1 and y=0
    cells, shape (grid, usable).
    """

    grid: np.ndarray
    wdiff: np.ndarray
    lead_cell: np.ndarray
    lead_frac: np.ndarray
    beta: float
    bandwidth: Bandwidth | float
    usable_index: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def dx(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def xi(self, b: np.ndarray) -> np.ndarray:
        """xi_t(b) for every usable observation, shape (n_usable,)."""
        b = np.asarray(b, dtype=float)
        ci = _cumulative_trapezoid(b, self.dx)
        cell = self.lead_cell
        safe = np.maximum(cell, 0)
        frac = self.lead_frac
        # Integral up to an off-node point: node prefix plus the exact
        # integral of the linear interpolant over the partial cell.
        partial = self.dx * (frac * b[safe] + 0.5 * frac * frac * (b[safe + 1] - b[safe]))
        vals = (ci[safe] + partial) * (cell >= 0)
        L = cell.shape[1]
        beta_pows = self.beta ** np.arange(1, L + 1)
        return vals @ beta_pows

    def apply(self, b: np.ndarray) -> np.ndarray:
        """The operator A applied to a grid function."""
        return self.wdiff @ self.xi(b)

    def as_matrix(self) -> np.ndarray:
        """Dense (grid x grid) representation, column by column."""
        G = len(self.grid)
        A = np.empty((G, G))
        e = np.zeros(G)
        for j in range(G):
            e[j] = 1.0
            A[:, j] = self.apply(e)
            e[j] = 0.0
        return A


def build_fie_operator(
    ccp: CcpEstimate,
    y: np.ndarray,
    leads: LeadTable,
    beta: float,
    grid: np.ndarray,
    kernel: KernelSpec | None = None,
    h: Bandwidth | None = None,
    min_weight: float = 1e-8,
) -> FieOperator:
    """Assemble the operator from fitted probabilities and lead tables."""
    kernel = kernel or KernelSpec("gaussian", 1, 2)
    if h is None:
        h = bandwidth_suboptimal(ccp.p_hat.std(ddof=1), len(ccp.p_hat), kernel.order)
    use = leads.usable
    usable_index = np.flatnonzero(use)
    p_use = ccp.p_hat[usable_index]
    y_use = y[usable_index]

    (n1, d1), (n0, d0) = nw_weight_sums(
        grid[:, None],
        p_use[:, None],
        h,
        kernel.order,
        np.zeros(len(p_use)),
        [y_use == 1, y_use == 0],
    )
    for cell, den in (("y=1", d1), ("y=0", d0)):
        bad = np.flatnonzero(den < min_weight)
        if bad.size:
            raise EstimationError(
                f"empty conditional {cell} cell at grid point {int(bad[0])}; "
                "increase the xi bandwidth"
            )
    # Row-normalized masked kernel weights, built the same blocked way.
    hv = float(np.asarray(h.value if isinstance(h, Bandwidth) else h))
    from .kernels import kernel_1d

    u = (p_use[None, :] - grid[:, None]) / hv
    kw = kernel_1d(u, kernel.order)
    w1 = np.where(y_use == 1, kw, 0.0) / d1[:, None]
    w0 = np.where(y_use == 0, kw, 0.0) / d0[:, None]

    pos = leads.positions[usable_index]
    q = np.where(pos >= 0, np.clip(ccp.p_hat[np.maximum(pos, 0)], grid[0], grid[-1]), grid[0])
    dx = float(grid[1] - grid[0])
    cell_f = (q - grid[0]) / dx
    cell = np.clip(np.floor(cell_f).astype(np.int64), 0, len(grid) - 2)
    frac = np.clip(cell_f - cell, 0.0, 1.0)
    cell = np.where(pos >= 0, cell, -1)
    frac = np.where(pos >= 0, frac, 0.0)

    return FieOperator(
        grid=grid,
        wdiff=w1 - w0,
        lead_cell=cell,
        lead_frac=frac,
        beta=beta,
        bandwidth=h,
        usable_index=usable_index,
        meta={"L": leads.L},
    )


def xi(b: np.ndarray, op: FieOperator, t: int) -> float:
    """xi_t(b) for a single sample observation index ``t``."""
    where = np.flatnonzero(op.usable_index == t)
    if where.size == 0:
        raise ContractError(f"observation {t} is not usable for forward sums")
    return float(op.xi(b)[int(where[0])])


@dataclass
class BasisSolution:
    """Grid-valued basis functions stacked per index component."""

    grid: np.ndarray
    values: np.ndarray
    iterations: list[int]
    final_change: list[float]
    history: list[list[float]]


def solve_basis(
    z_ell: np.ndarray,
    op: FieOperator,
    tol: float = 1e-10,
    max_iter: int = 500,
    damping: float = 0.0,
) -> tuple[np.ndarray, int, list[float]]:
    """Successive approximation for b = z - A b, from b[0] = z."""
    z = np.asarray(z_ell, dtype=float)
    b = z.copy()
    history: list[float] = []
    for it in range(1, max_iter + 1):
        update = z - op.apply(b)
        if damping > 0.0:
            update = (1.0 - damping) * b + damping * update
        change = float(np.max(np.abs(update - b)))
        history.append(change)
        b = update
        if change <= tol:
            return b, it, history
    raise ConvergenceError(
        f"successive approximation stalled at change {history[-1]:.3e} after {max_iter} "
        "iterations; run the contraction diagnostic"
    )


def solve_all_basis(
    z_values: np.ndarray,
    op: FieOperator,
    tol: float = 1e-10,
    max_iter: int = 500,
    damping: float = 0.0,
) -> BasisSolution:
    G, k = z_values.shape
    out = np.empty((G, k))
    iters, changes, hist = [], [], []
    for ell in range(k):
        b, it, h = solve_basis(z_values[:, ell], op, tol=tol, max_iter=max_iter, damping=damping)
        out[:, ell] = b
        iters.append(it)
        changes.append(h[-1])
        hist.append(h)
    return BasisSolution(
        grid=op.grid, values=out, iterations=iters, final_change=changes, history=hist
    )


def solve_fie_dense(op_matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Direct collocation solve of (I + A) b = rhs."""
    A = np.asarray(op_matrix, dtype=float)
    G = A.shape[0]
    if A.shape != (G, G):
        raise ContractError("operator matrix must be square")
    try:
        b = np.linalg.solve(np.eye(G) + A, np.asarray(rhs, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"dense collocation system is singular: {exc}") from exc
    if not np.all(np.isfinite(b)):
        raise NumericError("dense collocation solve produced non-finite values")
    return b


@dataclass
class ContractionReport:
    """Diagnostic for the uniqueness condition beta^2 * double-integral of Pi^2 < 1."""

    statistic: float
    passed: bool
    max_row_integral: float
    n_bins: int
    empty_rows: int

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "passed": self.passed,
            "max_row_integral": self.max_row_integral,
            "n_bins": self.n_bins,
            "empty_rows": self.empty_rows,
        }


def contraction_statistic(pi: np.ndarray, mids: np.ndarray, beta: float) -> float:
    """beta^2 times the double trapezoid integral of Pi^2 over the square."""
    return float(beta**2 * np.trapezoid(np.trapezoid(pi**2, mids, axis=1), mids))


def check_contraction(
    ccp: CcpEstimate,
    y: np.ndarray,
    leads: LeadTable,
    beta: float,
    n_bins: int = 25,
) -> ContractionReport:
    """Histogram estimate of the contraction statistic.

    Pi-hat stacks, over lead horizons s, the discounted differences of
    the conditional CDFs of the s-step-ahead fitted probability given
    the current fitted probability and each current choice.  Built only
    for this diagnostic, never for estimation.
    """
    lo, hi = ccp.support
    if hi <= lo:
        return ContractionReport(0.0, True, 0.0, n_bins, 0)
    edges = np.linspace(lo, hi, n_bins + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    use = np.flatnonzero(leads.usable)
    p_now = ccp.p_hat[use]
    bin_now = np.clip(np.digitize(p_now, edges) - 1, 0, n_bins - 1)
    y_use = y[use]
    L = leads.L
    pos = leads.positions[use]
    pi_cdf = np.zeros((n_bins, n_bins))
    pi_density = np.zeros((n_bins, n_bins))
    empty = 0
    dxp = edges[1] - edges[0]
    for s in range(L):
        ok = pos[:, s] >= 0
        if not ok.any():
            continue
        p_next = ccp.p_hat[pos[ok, s]]
        bn = bin_now[ok]
        yv = y_use[ok]
        bnext = np.clip(np.digitize(p_next, edges) - 1, 0, n_bins - 1)
        cdf, dens = {}, {}
        for d in (0, 1):
            sel = yv == d
            counts = np.zeros((n_bins, n_bins))
            np.add.at(counts, (bn[sel], bnext[sel]), 1.0)
            totals = counts.sum(axis=1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                cdf[d] = np.where(totals > 0, np.cumsum(counts, axis=1) / totals, np.nan)
                dens[d] = np.where(totals > 0, counts / (totals * dxp), np.nan)
        diff = cdf[1] - cdf[0]
        bad = ~np.isfinite(diff)
        empty += int(bad.any(axis=1).sum())
        pi_cdf += beta**s * np.where(bad, 0.0, diff)
        pi_density += beta**s * np.where(bad, 0.0, dens[1] - dens[0])
    stat = contraction_statistic(pi_cdf, mids, beta)
    # Density rows integrate to 1 - 1 = 0 whenever both cells are
    # populated; report the worst deviation as a construction check.
    max_row = float(np.max(np.abs(pi_density.sum(axis=1) * dxp)))
    return ContractionReport(
        statistic=stat,
        passed=stat < 1.0,
        max_row_integral=max_row,
        n_bins=n_bins,
        empty_rows=empty,
    )
