"""Kernel functions and bandwidth rules.

Provides Parzen-Rosenblatt kernels (Gaussian and higher-order
bias-reducing products built by twicing the Gaussian), their analytic
gradients, and the three bandwidth rules used by the estimation
pipeline: the optimal rate 1.06 * sigma * T**(-1/(2*iota+k)), the
sub-optimal variant (same formula with k forced to 3), and the
undersmoothed pair-sum rate T**(-1/gamma).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

FAMILIES = ("gaussian", "gaussian_product", "high_order_product")

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _phi(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _k1(x, order):
    """Univariate kernel of the given even order at points ``x``."""
    if order == 2:
        return _phi(x)
    x2 = x * x
    if order == 4:
        # Twicing: (3 - u^2)/2 * phi(u); moments 1..3 vanish.
        return 0.5 * (3.0 - x2) * _phi(x)
    if order == 6:
        return 0.125 * (15.0 - 10.0 * x2 + x2 * x2) * _phi(x)
    raise ConfigError(f"unsupported kernel order {order}; choose 2, 4 or 6")


def _k1_grad(x, order):
    """Derivative of the univariate kernel."""
    if order == 2:
        return -x * _phi(x)
    x2 = x * x
    if order == 4:
        return 0.5 * x * (x2 - 5.0) * _phi(x)
    if order == 6:
        return 0.125 * x * (-x2 * x2 + 14.0 * x2 - 35.0) * _phi(x)
    raise ConfigError(f"unsupported kernel order {order}; choose 2, 4 or 6")


@dataclass(frozen=True)
class KernelSpec:
    """A product kernel: family, dimension and order (iota).

    ``gaussian`` and ``gaussian_product`` are order-2; the order of a
    ``high_order_product`` kernel is even and >= 4 (4 = Gaussian
    twicing, the default bias-reducing choice).
    """

    family: str
    dimension: int = 1
    order: int = 2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}; choose from {FAMILIES}")
        if self.dimension < 1:
            raise ConfigError("kernel dimension must be >= 1")
        if self.order % 2 != 0 or self.order < 2:
            raise ConfigError("kernel order iota must be an even integer >= 2")
        if self.family in ("gaussian", "gaussian_product") and self.order != 2:
            raise ConfigError(f"{self.family} kernel has order 2, got {self.order}")
        if self.family == "high_order_product" and self.order not in (2, 4, 6):
            raise ConfigError("high_order_product supports orders 2, 4 and 6")

    @property
    def iota(self) -> int:
        return self.order


def _as_points(spec: KernelSpec, u) -> np.ndarray:
    """Coerce ``u`` to shape (n, dim), checking the dimension."""
    arr = np.asarray(u, dtype=float)
    if spec.dimension == 1 and arr.ndim <= 1:
        return arr.reshape(-1, 1)
    if arr.ndim == 1:
        if arr.shape[0] != spec.dimension:
            raise ContractError(
                f"kernel expects dimension {spec.dimension}, got point of length {arr.shape[0]}"
            )
        return arr.reshape(1, -1)
    if arr.ndim == 2 and arr.shape[1] == spec.dimension:
        return arr
    raise ContractError(
        f"kernel expects dimension {spec.dimension}, got array of shape {arr.shape}"
    )


def eval_kernel(spec: KernelSpec, u) -> np.ndarray | float:
    """Evaluate the kernel at one point (dim,) or a batch (n, dim)."""
    pts = _as_points(spec, u)
    vals = np.prod(_k1(pts, spec.order), axis=1)
    if np.isscalar(u) or (np.asarray(u).ndim == 1 and vals.shape == (1,)):
        return float(vals[0])
    return vals


def eval_kernel_gradient(spec: KernelSpec, u) -> np.ndarray:
    """Gradient of the product kernel; odd: grad K(-u) = -grad K(u)."""
    pts = _as_points(spec, u)
    k = _k1(pts, spec.order)
    g = _k1_grad(pts, spec.order)
    n, d = pts.shape
    out = np.empty((n, d))
    for j in range(d):
        others = np.prod(np.delete(k, j, axis=1), axis=1) if d > 1 else 1.0
        out[:, j] = g[:, j] * others
    if np.asarray(u).ndim == 1 and n == 1:
        return out[0]
    return out


def kernel_grad_1d(x: np.ndarray, order: int) -> np.ndarray:
    """Univariate kernel derivative, exposed for vectorized pair sums."""
    return _k1_grad(x, order)


def kernel_1d(x: np.ndarray, order: int) -> np.ndarray:
    """Univariate kernel, exposed for vectorized NW weights."""
    return _k1(x, order)


def check_kernel(spec: KernelSpec, grid_half_width: float = 12.0, n_grid: int = 4001) -> dict:
    """Quadrature certification of a kernel spec.

    Returns the Simpson-rule integral of the univariate factor, the
    implied product-kernel integral, and the largest absolute moment of
    total order 1..iota-1 (computed from univariate moments, which is
    exact for product kernels).
    """
    from scipy.integrate import simpson

    x = np.linspace(-grid_half_width, grid_half_width, n_grid)
    k = _k1(x, spec.order)
    integral_1d = simpson(k, x=x)
    moments_1d = {m: simpson(x**m * k, x=x) for m in range(0, spec.order)}
    moments_1d[0] = integral_1d

    # Total-order moments of a product kernel factorize across coordinates;
    # enumerate exponent tuples of total order 1..iota-1.
    worst = 0.0

    def _enumerate(dim_left, order_left, acc, total):
        nonlocal worst
        if dim_left == 0:
            if 1 <= total <= spec.order - 1:
                worst = max(worst, abs(acc))
            return
        for m in range(0, order_left + 1):
            _enumerate(dim_left - 1, order_left - m, acc * moments_1d[m], total + m)

    _enumerate(spec.dimension, spec.order - 1, 1.0, 0)
    return {
        "integral": integral_1d ** spec.dimension,
        "max_abs_moment": worst,
        "order": spec.order,
        "dimension": spec.dimension,
    }


@dataclass(frozen=True)
class Bandwidth:
    """A bandwidth value together with the rule and inputs that made it."""

    value: np.ndarray | float
    rule: str
    inputs: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.value, dtype=float)
        if not np.all(np.isfinite(v)) or not np.all(v > 0):
            raise ConfigError(f"bandwidth must be positive and finite, got {self.value}")


def robust_scale(x: np.ndarray) -> np.ndarray:
    """Per-coordinate spread: min of the sample sd and IQR/1.349.

    The interquartile variant keeps kernel bandwidths honest when a
    skewed tail inflates the standard deviation.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    sd = x.std(axis=0, ddof=1)
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    iqr_scale = (q75 - q25) / 1.349
    out = np.where(iqr_scale > 0, np.minimum(sd, iqr_scale), sd)
    return out if out.size > 1 else float(out[0])


def bandwidth_optimal(sigma_hat, T: int, iota: int = 2, k: int = 1) -> Bandwidth:
    """Optimal-rate rule 1.06 * sigma * T**(-1/(2*iota + k)).

    ``sigma_hat`` may be a vector of per-coordinate standard deviations,
    giving a per-coordinate bandwidth for product kernels.
    """
    sig = np.asarray(sigma_hat, dtype=float)
    if T < 2:
        raise ContractError("bandwidth rules need T >= 2")
    if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
        raise ConfigError(
            "degenerate regressor: sample standard deviation is zero; "
            "jitter the column or drop it before kernel smoothing"
        )
    value = 1.06 * sig * float(T) ** (-1.0 / (2 * iota + k))
    if value.ndim == 0:
        value = float(value)
    return Bandwidth(value=value, rule="optimal", inputs={"sigma": sigma_hat, "T": T, "iota": iota, "k": k})


def bandwidth_suboptimal(sigma_hat, T: int, iota: int = 2) -> Bandwidth:
    """Sub-optimal (oversmoothed) rule: the optimal formula with k = 3."""
    bw = bandwidth_optimal(sigma_hat, T, iota=iota, k=3)
    return Bandwidth(value=bw.value, rule="suboptimal", inputs=bw.inputs)


def pss_gamma_interval(k_theta: int) -> tuple[float, float]:
    """Admissible (lower, upper) range for the pair-sum rate parameter."""
    lo = k_theta + 2.0
    hi = k_theta + 3.0 + (1.0 if k_theta % 2 == 0 else 0.0)
    return lo, hi


def bandwidth_pss(T: int, k_theta: int, gamma: float | None = None) -> Bandwidth:
    """Undersmoothed pair-sum bandwidth T**(-1/gamma).

    ``gamma`` must lie strictly inside the admissible interval; the
    default is its midpoint.
    """
    if T < 2:
        raise ContractError("bandwidth rules need T >= 2")
    lo, hi = pss_gamma_interval(k_theta)
    if gamma is None:
        gamma = 0.5 * (lo + hi)
    if not (lo < gamma < hi):
        raise ConfigError(f"gamma must lie in ({lo:g},{hi:g}), got {gamma:g}")
    value = float(T) ** (-1.0 / gamma)
    return Bandwidth(value=value, rule="pss", inputs={"T": T, "gamma": gamma, "k_theta": k_theta})


def truncation_length(beta: float, w_values: np.ndarray, tol: float = 1e-4) -> int:
    """Smallest L with beta**L * max||W|| below ``tol`` times the spread of W.

    For constant transforms (zero spread) the criterion degrades to
    beta**L < tol.
    """
    if not (0.0 < beta < 1.0):
        raise ContractError("beta must lie in (0,1)")
    w = np.atleast_2d(np.asarray(w_values, dtype=float))
    norms = np.linalg.norm(w, axis=1)
    max_norm = float(np.max(norms)) if norms.size else 1.0
    spread = float(np.std(norms))
    if max_norm == 0.0:
        return 1
    target = tol * (spread if spread > 0 else max_norm)
    L = int(np.ceil(np.log(target / max_norm) / np.log(beta)))
    return max(L, 1)
