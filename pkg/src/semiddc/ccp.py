"""Choice-probability estimation and forward-simulated regressors.

Implements the first estimation stage: Nadaraya-Watson choice
probabilities p-hat with their estimated support, truncated discounted
forward sums delta, the generated regressors phi-hat (own transform
plus the difference of conditional NW averages of delta given y=1 and
y=0), and the projection z-hat of phi onto the estimated choice
probability.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EstimationError, IntegrityError
from .kernels import Bandwidth, KernelSpec, bandwidth_optimal, bandwidth_suboptimal, kernel_1d
from .panel import PanelSample, UtilitySpec

MIN_CELL_WEIGHT = 1e-8


def _bandwidth_vector(bw: Bandwidth | float | np.ndarray, k: int) -> np.ndarray:
    value = bw.value if isinstance(bw, Bandwidth) else bw
    vec = np.broadcast_to(np.asarray(value, dtype=float), (k,)).copy()
    if np.any(vec <= 0):
        raise ContractError("bandwidths must be positive")
    return vec


def nw_weight_sums(
    x_query: np.ndarray,
    x_data: np.ndarray,
    h,
    order: int,
    responses: np.ndarray,
    masks: list[np.ndarray],
    block: int = 512,
    exclude: np.ndarray | None = None,
):
    """Kernel-weighted sums of ``responses`` within each mask.

    Returns, per mask, the pair (num, den) with
    num[q] = sum_i K((x_i - x_q)/h) r_i and den[q] the same without r.
    Blocked over query points so the (m, n) kernel matrix is never
    materialized in full.  ``exclude[q]`` optionally names one data row
    whose weight is zeroed for query q (-1 for none); used by the
    leave-own-observation-out variants.
    """
    xq = np.atleast_2d(np.asarray(x_query, dtype=float))
    xd = np.atleast_2d(np.asarray(x_data, dtype=float))
    r = np.asarray(responses, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    hv = _bandwidth_vector(h, xd.shape[1])
    nums = [np.zeros((xq.shape[0], r.shape[1])) for _ in masks]
    dens = [np.zeros(xq.shape[0]) for _ in masks]
    masked_r = [np.where(m[:, None], r, 0.0) for m in masks]
    masks_f = [m.astype(float) for m in masks]
    for a in range(0, xq.shape[0], block):
        b = min(a + block, xq.shape[0])
        u = (xd[None, :, :] - xq[a:b, None, :]) / hv
        kw = np.prod(kernel_1d(u, order), axis=2)
        if exclude is not None:
            ex = exclude[a:b]
            rows = np.flatnonzero(ex >= 0)
            kw[rows, ex[rows]] = 0.0
        for i in range(len(masks)):
            nums[i][a:b] = kw @ masked_r[i]
            dens[i][a:b] = kw @ masks_f[i]
    return list(zip(nums, dens))


@dataclass
class CcpEstimate:
    """Fitted choice probabilities at the sample points."""

    p_hat: np.ndarray          # clamped to [eps, 1-eps]
    p_raw: np.ndarray          # unclamped NW ratio
    support: tuple[float, float]
    bandwidth: Bandwidth
    kernel: KernelSpec
    eps: float


def estimate_ccp(
    sample: PanelSample,
    kernel: KernelSpec | None = None,
    h: Bandwidth | None = None,
    eps: float = 1e-6,
    leave_one_out: bool = False,
) -> CcpEstimate:
    """NW regression of the choice on the state at every sample point.

    The fit includes the own observation (a leave-one-out variant is
    available for diagnostics) and the result is clamped away from
    {0,1} by ``eps`` before any downstream transform.
    """
    if sample.n_obs < 2:
        raise ContractError("need at least 2 observations")
    kernel = kernel or KernelSpec("gaussian_product", sample.k, 2)
    if h is None:
        h = bandwidth_optimal(sample.x.std(axis=0, ddof=1), sample.n_obs, kernel.order, sample.k)
    hv = _bandwidth_vector(h, sample.k)
    y = sample.y.astype(float)
    ((num, den),) = nw_weight_sums(
        sample.x, sample.x, hv, kernel.order, y, [np.ones(sample.n_obs, dtype=bool)]
    )
    num = num[:, 0]
    if leave_one_out:
        self_w = np.prod(kernel_1d(np.zeros((1, sample.k)), kernel.order))
        num = num - self_w * y
        den = den - self_w
    dead = np.flatnonzero(den <= 0)
    if dead.size:
        raise EstimationError(
            f"all kernel weights vanish at observation {int(dead[0])}; increase the bandwidth"
        )
    p_raw = num / den
    p_hat = np.clip(p_raw, eps, 1.0 - eps)
    support = (float(p_hat.min()), float(p_hat.max()))
    return CcpEstimate(p_hat=p_hat, p_raw=p_raw, support=support, bandwidth=h if isinstance(h, Bandwidth) else Bandwidth(hv, "explicit"), kernel=kernel, eps=eps)


def estimate_support(ccp: CcpEstimate) -> tuple[float, float]:
    """Min/max of the fitted probabilities; warns when degenerate."""
    if ccp.p_hat.size == 0:
        raise ContractError("empty choice-probability set")
    lo, hi = float(np.min(ccp.p_hat)), float(np.max(ccp.p_hat))
    if lo == hi:
        warnings.warn("estimated choice-probability support is a single point")
    return lo, hi


@dataclass
class LeadTable:
    """Per-observation future positions used by truncated forward sums.

    ``positions[i, s-1]`` is the column index of observation i's s-step
    lead, -1 if the path ended structurally (terminal action: the
    future contributes exact zeros) and -2 if the lead is censored by
    the sample edge.  ``usable`` marks rows with no censored lead.
    """

    positions: np.ndarray
    usable: np.ndarray
    L: int

    @property
    def n_usable(self) -> int:
        return int(self.usable.sum())


def compute_leads(sample: PanelSample, L: int, terminal_action: int | None = None) -> LeadTable:
    if L < 1:
        raise ContractError("truncation length must be >= 1")
    n = sample.n_obs
    positions = np.full((n, L), -2, dtype=np.int64)
    usable = np.zeros(n, dtype=bool)
    for sl in sample.path_slices():
        a, b = sl.start, sl.stop
        m = b - a
        terminated = terminal_action is not None and sample.y[b - 1] == terminal_action
        if terminal_action is not None and np.any(sample.y[a : b - 1] == terminal_action):
            raise IntegrityError(
                f"path {int(sample.path_id[a])} has the terminal action before its last period"
            )
        idx = np.arange(m)[:, None] + np.arange(1, L + 1)[None, :]
        pos = np.where(idx < m, idx + a, -1 if terminated else -2)
        positions[a:b] = pos
        if terminated:
            usable[a:b] = True
        elif m > L:
            usable[a : a + m - L] = True
    if not usable.any():
        warnings.warn("no usable observations: every path is shorter than the truncation length")
    return LeadTable(positions=positions, usable=usable, L=L)


def compute_delta(
    sample: PanelSample,
    spec: UtilitySpec,
    d: int,
    leads: LeadTable,
    indicator_override: np.ndarray | None = None,
) -> np.ndarray:
    """Truncated discounted sum of future W_d on periods choosing d.

    Rows that cannot see L periods ahead (censored paths) are NaN.
    ``indicator_override`` replaces the realized choice indicator
    1{y=d} by caller-supplied weights (the synthetic exact-cancellation
    mode passes fitted probabilities).
    """
    w = spec.block(sample.x, d)
    if w.shape[1] == 0:
        return np.empty((sample.n_obs, 0))
    if indicator_override is not None:
        ind = np.asarray(indicator_override, dtype=float)
    else:
        ind = (sample.y == d).astype(float)
    resp = w * ind[:, None]
    pos = leads.positions
    safe = np.maximum(pos, 0)
    beta_pows = spec.beta ** np.arange(1, leads.L + 1)
    gathered = resp[safe] * (pos >= 0)[:, :, None]
    delta = np.einsum("s,isk->ik", beta_pows, gathered)
    delta[~leads.usable] = np.nan
    return delta


@dataclass
class GeneratedRegressors:
    """Forward sums and the generated regressor phi at the sample points."""

    delta: dict[int, np.ndarray]
    phi_hat: np.ndarray
    leads: LeadTable
    bandwidth: Bandwidth
    kernel: KernelSpec
    valid: np.ndarray | None = None

    @property
    def usable(self) -> np.ndarray:
        if self.valid is None:
            return self.leads.usable
        return self.leads.usable & self.valid


def _conditional_nw_diff(
    x_query,
    x_data,
    h,
    order,
    responses,
    y_data,
    min_weight: float,
    advise: str,
    exclude: np.ndarray | None = None,
    on_empty: str = "raise",
):
    """NW fit within y=1 minus within y=0.

    Query points whose conditional cells carry less than ``min_weight``
    kernel mass either raise (default, per the operation contract) or,
    with ``on_empty='trim'``, come back NaN together with a validity
    mask so callers can drop them.
    """
    (n1, d1), (n0, d0) = nw_weight_sums(
        x_query, x_data, h, order, responses, [y_data == 1, y_data == 0], exclude=exclude
    )
    valid = (d1 >= min_weight) & (d0 >= min_weight)
    if not valid.all():
        if on_empty == "raise":
            bad = int(np.flatnonzero(~valid)[0])
            cell = "y=1" if d1[bad] < min_weight else "y=0"
            raise EstimationError(
                f"empty conditional {cell} cell near query point {bad}; {advise}"
            )
        d1 = np.where(valid, d1, np.nan)
        d0 = np.where(valid, d0, np.nan)
    return n1 / d1[:, None] - n0 / d0[:, None], valid


def estimate_phi(
    sample: PanelSample,
    spec: UtilitySpec,
    delta: dict[int, np.ndarray],
    leads: LeadTable,
    kernel: KernelSpec | None = None,
    h: Bandwidth | None = None,
    x_query: np.ndarray | None = None,
    min_weight: float = MIN_CELL_WEIGHT,
    exclude_self: bool = False,
    on_empty: str = "raise",
) -> GeneratedRegressors:
    """Generated regressor phi-hat, stacked as (phi_0, phi_1).

    phi_d(x) = (-1)**(d+1) W_d(x) + NW[delta_d | x, y=1] -
    NW[delta_d | x, y=0], the conditional fits running over usable
    observations only.  ``exclude_self`` drops each sample point's own
    observation from its conditional fits (leave-out variant).  With
    ``on_empty='trim'``, isolated query points whose conditional cells
    are empty are flagged invalid instead of raising.
    """
    if not (np.any(sample.y[leads.usable] == 1) and np.any(sample.y[leads.usable] == 0)):
        raise EstimationError(
            "a choice cell is empty on the usable set; lower the truncation length "
            "or provide terminal-action data"
        )
    kernel = kernel or KernelSpec("gaussian_product", sample.k, 2)
    if h is None:
        h = bandwidth_optimal(sample.x.std(axis=0, ddof=1), sample.n_obs, kernel.order, sample.k)
    xq = sample.x if x_query is None else np.atleast_2d(x_query)
    use = leads.usable
    exclude = None
    if exclude_self and x_query is None:
        pos_in_use = np.full(sample.n_obs, -1, dtype=np.int64)
        pos_in_use[np.flatnonzero(use)] = np.arange(int(use.sum()))
        exclude = pos_in_use
    blocks = []
    valid = np.ones(xq.shape[0], dtype=bool)
    for d in (0, 1):
        k_d = spec.k1 if d == 1 else spec.k0
        if k_d == 0:
            continue
        own = spec.block(xq, d) * (1.0 if d == 1 else -1.0)
        diff, ok = _conditional_nw_diff(
            xq,
            sample.x[use],
            h,
            kernel.order,
            delta[d][use],
            sample.y[use],
            min_weight,
            "increase the phi bandwidth",
            exclude=exclude,
            on_empty=on_empty,
        )
        valid &= ok
        blocks.append(own + diff)
    phi = np.hstack(blocks)
    return GeneratedRegressors(
        delta=delta,
        phi_hat=phi,
        leads=leads,
        bandwidth=h,
        kernel=kernel,
        valid=valid if x_query is None else None,
    )


@dataclass
class ZProjection:
    """phi projected on the fitted choice probability, on a uniform grid."""

    grid: np.ndarray
    z_values: np.ndarray
    bandwidth: Bandwidth | float
    field_meta: dict = field(default_factory=dict)


def probability_grid(support: tuple[float, float], grid_size: int = 200) -> np.ndarray:
    if grid_size < 2:
        raise ContractError("grid_size must be >= 2")
    return np.linspace(support[0], support[1], grid_size)


def estimate_z(
    regs: GeneratedRegressors,
    ccp: CcpEstimate,
    kernel: KernelSpec | None = None,
    h: Bandwidth | None = None,
    grid_size: int = 200,
    min_weight: float = MIN_CELL_WEIGHT,
) -> ZProjection:
    """NW regression of phi-hat on p-hat over a uniform support grid."""
    kernel = kernel or KernelSpec("gaussian", 1, 2)
    if h is None:
        h = bandwidth_suboptimal(ccp.p_hat.std(ddof=1), len(ccp.p_hat), kernel.order)
    grid = probability_grid(ccp.support, grid_size)
    rows = np.all(np.isfinite(regs.phi_hat), axis=1)
    if regs.valid is not None:
        rows &= regs.valid
    ((num, den),) = nw_weight_sums(
        grid[:, None],
        ccp.p_hat[rows, None],
        h,
        kernel.order,
        regs.phi_hat[rows],
        [np.ones(int(rows.sum()), dtype=bool)],
    )
    bad = np.flatnonzero(den < min_weight)
    if bad.size:
        raise EstimationError(
            f"no kernel mass at grid point {int(bad[0])} (p={grid[int(bad[0])]:.4f}); "
            "increase the z bandwidth or narrow the grid"
        )
    return ZProjection(grid=grid, z_values=num / den[:, None], bandwidth=h)
