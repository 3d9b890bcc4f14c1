import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import simpson

from semiddc.errors import ConfigError, ContractError
from semiddc.kernels import (
    Bandwidth,
    KernelSpec,
    bandwidth_optimal,
    bandwidth_pss,
    bandwidth_suboptimal,
    check_kernel,
    eval_kernel,
    eval_kernel_gradient,
    robust_scale,
    truncation_length,
)

ALL_SPECS = [
    KernelSpec("gaussian", 1, 2),
    KernelSpec("gaussian_product", 2, 2),
    KernelSpec("gaussian_product", 3, 2),
    KernelSpec("high_order_product", 1, 4),
    KernelSpec("high_order_product", 2, 4),
    KernelSpec("high_order_product", 2, 6),
]


def test_gaussian_at_zero():
    assert eval_kernel(KernelSpec("gaussian", 1, 2), 0.0) == pytest.approx(
        1.0 / np.sqrt(2 * np.pi), abs=1e-12
    )


def test_symmetry():
    spec = KernelSpec("gaussian_product", 2, 2)
    u = np.array([0.37, -1.2])
    assert eval_kernel(spec, u) == pytest.approx(eval_kernel(spec, -u), abs=0)


def test_fourth_order_second_moment_vanishes_quadrature():
    # Independent quadrature oracle on a fine grid.
    x = np.linspace(-12, 12, 6001)
    spec = KernelSpec("high_order_product", 1, 4)
    k = eval_kernel(spec, x[:, None])
    assert abs(simpson(x**2 * k, x=x)) < 1e-6
    assert simpson(k, x=x) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family}-d{s.dimension}-o{s.order}")
def test_kernel_certification(spec):
    report = check_kernel(spec)
    assert abs(report["integral"] - 1.0) < 1e-6
    assert report["max_abs_moment"] < 1e-6


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family}-d{s.dimension}-o{s.order}")
def test_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(7)
    pts = rng.uniform(-3, 3, size=(100, spec.dimension))
    grad = eval_kernel_gradient(spec, pts)
    eps = 1e-5
    for j in range(spec.dimension):
        up, dn = pts.copy(), pts.copy()
        up[:, j] += eps
        dn[:, j] -= eps
        fd = (eval_kernel(spec, up) - eval_kernel(spec, dn)) / (2 * eps)
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(grad[:, j] - fd) / scale) < 1e-6


def test_gradient_is_odd_and_zero_at_origin():
    spec = KernelSpec("high_order_product", 2, 4)
    u = np.array([0.8, -0.3])
    assert np.allclose(eval_kernel_gradient(spec, u), -eval_kernel_gradient(spec, -u), atol=0)
    assert np.allclose(eval_kernel_gradient(spec, np.zeros(2)), 0.0, atol=0)


def test_gaussian_gradient_closed_form():
    g = eval_kernel_gradient(KernelSpec("gaussian", 1, 2), np.array([1.0]))
    assert g[0] == pytest.approx(-np.exp(-0.5) / np.sqrt(2 * np.pi), abs=1e-9)
    assert g[0] == pytest.approx(-0.241971, abs=1e-6)


def test_dimension_mismatch_raises():
    with pytest.raises(ContractError):
        eval_kernel(KernelSpec("gaussian_product", 2, 2), np.array([1.0, 2.0, 3.0]))


def test_bandwidth_optimal_examples():
    assert bandwidth_optimal(1.0, 1000, 2, 2).value == pytest.approx(
        1.06 * 1000 ** (-1 / 6), abs=1e-5
    )
    assert bandwidth_optimal(1.0, 1000, 2, 2).value == pytest.approx(0.33522, abs=1e-4)
    assert bandwidth_optimal(2.0, 1000, 2, 2).value == pytest.approx(
        2 * bandwidth_optimal(1.0, 1000, 2, 2).value, rel=1e-12
    )
    assert bandwidth_suboptimal(0.2, 1000, 2).value == pytest.approx(0.07904, abs=2e-5)


def test_bandwidth_zero_sigma_errors():
    with pytest.raises(ConfigError):
        bandwidth_optimal(0.0, 1000, 2, 2)


def test_bandwidth_pss_examples():
    bw = bandwidth_pss(1000, 2)
    assert bw.inputs["gamma"] == pytest.approx(5.0)
    assert bw.value == pytest.approx(1000 ** (-0.2), rel=1e-12)
    assert bw.value == pytest.approx(0.25119, abs=1e-4)
    with pytest.raises(ConfigError, match=r"\(4,6\)"):
        bandwidth_pss(1000, 2, gamma=4.0)


def test_bandwidth_pss_interval_odd_dimension():
    # k odd: upper end k+3 without the even bump.
    with pytest.raises(ConfigError, match=r"\(6,8\)"):
        bandwidth_pss(1000, 4, gamma=8.0)
    assert bandwidth_pss(1000, 3, gamma=5.5).value == pytest.approx(1000 ** (-1 / 5.5))


@given(st.integers(min_value=2, max_value=10_000_000))
def test_bandwidth_rules_decrease_in_T(T):
    h1 = bandwidth_optimal(1.0, T, 2, 2).value
    h2 = bandwidth_optimal(1.0, T + 1, 2, 2).value
    assert h2 < h1
    assert bandwidth_pss(T + 1, 2).value < bandwidth_pss(T, 2).value


def test_pss_value_decreases_to_zero():
    vals = [bandwidth_pss(T, 2).value for T in (10, 100, 10_000, 10_000_000)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 0.05


def test_bandwidth_validates_positive():
    with pytest.raises(ConfigError):
        Bandwidth(value=-0.1, rule="explicit")


def test_truncation_length_tail_bound():
    rng = np.random.default_rng(0)
    w = rng.lognormal(0, 1, size=(500, 2))
    beta = 0.9
    L = truncation_length(beta, w)
    norms = np.linalg.norm(w, axis=1)
    assert beta**L * norms.max() < 1e-4 * np.std(norms)
    assert beta ** (L - 1) * norms.max() >= 1e-4 * np.std(norms)


def test_truncation_length_constant_transform():
    w = np.ones((100, 1))
    L = truncation_length(0.9, w, tol=1e-4)
    assert 0.9**L < 1e-4 <= 0.9 ** (L - 1)


def test_robust_scale_uses_iqr_under_skew():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(0, 1, 1000), rng.normal(0, 40, 30)])[:, None]
    assert robust_scale(x) < x.std(ddof=1)
