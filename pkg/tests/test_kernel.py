import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_primitive
from drksplat.errors import DegenerateQuaternion, GrazingView, NonFinite
from drksplat.kernel import (
    THREE_SIGMA_LEVEL, DrkPrimitive, KernelConfig, RawDrkParams, activate, alpha, angle_activation,
    angle_deactivation, calibrated_endpoints, calibrated_radii, deactivate, eval_kernel,
    gaussian_special_case, low_pass, sharpen, sharpen_inverse, tau_activation)

# ---------------------------------------------------------------------------
# reference implementations written straight from the formulas


def ref_sharpen(g, tau):
    lo, hi = (1 + tau) / 4, (3 - tau) / 4
    if g < lo:
        return (1 - tau) / (1 + tau) * g
    if g < hi:
        return (1 + tau) / (1 - tau) * g - tau / (1 - tau)
    return (1 - tau) / (1 + tau) * g + 2 * tau / (1 + tau)


def ref_kernel(u, v, s, theta, eta):
    r2 = math.hypot(u, v)
    if r2 == 0:
        return 1.0
    ang = math.atan2(v, u) % (2 * math.pi)
    if ang == 0:
        ang = 2 * math.pi
    K = len(s)
    # first basis with theta_k >= ang; the previous one (wrapping) brackets it
    k1 = int(np.searchsorted(theta, ang))
    k0 = (k1 - 1) % K
    t0 = theta[k0] if k1 > 0 else theta[K - 1] - 2 * math.pi
    d = (ang - t0) * math.pi / (theta[k1] - t0)
    inv_s2 = (1 + math.cos(d)) / (2 * s[k0] ** 2) + (1 - math.cos(d)) / (2 * s[k1] ** 2)
    e0 = s[k0] * np.array([math.cos(theta[k0]), math.sin(theta[k0])])
    e1 = s[k1] * np.array([math.cos(theta[k1]), math.sin(theta[k1])])
    r1 = np.abs(np.linalg.solve(np.column_stack([e0, e1]), [u, v])).sum()
    return math.exp(-0.5 * (eta * r1 ** 2 + (1 - eta) * r2 ** 2 * inv_s2))


# ---------------------------------------------------------------------------
# activation


def test_activation_examples():
    K = 8
    raw = RawDrkParams(center=np.zeros((1, 3)), quat=np.array([[2.0, 0, 0, 0]]),
                       scale=np.zeros((1, K)), angle=np.zeros((1, K)), eta=np.zeros(1),
                       tau=np.zeros(1), opacity=np.zeros(1), sh=np.zeros((1, 1, 3)))
    p = activate(raw)
    assert p.o[0] == 0.5
    assert np.all(p.s == 1.0)
    np.testing.assert_allclose(p.R[0], np.eye(3), atol=1e-15)
    np.testing.assert_allclose(p.theta[0], np.arange(1, 9) * math.pi / 4, rtol=1e-15)
    assert p.theta[0, -1] == 2 * math.pi


def test_activation_rejects_bad_input():
    raw = RawDrkParams(center=np.zeros((1, 3)), quat=np.zeros((1, 4)), scale=np.zeros((1, 8)),
                       angle=np.zeros((1, 8)), eta=np.zeros(1), tau=np.zeros(1),
                       opacity=np.zeros(1), sh=np.zeros((1, 1, 3)))
    with pytest.raises(DegenerateQuaternion):
        activate(raw)
    raw.quat[:] = [1, 0, 0, 0]
    raw.eta[0] = np.nan
    with pytest.raises(NonFinite):
        activate(raw)


def test_tau_range():
    assert tau_activation(-20) > -0.1
    assert tau_activation(20) < 0.99
    assert -0.1 <= tau_activation(-50) and tau_activation(50) <= 0.99
    assert abs(tau_activation(0.0) - (-0.1 + 1.09 / 2)) < 1e-15


@pytest.mark.parametrize("value", [-3.0, 0.0, 0.7, 12.0])
def test_equal_raws_give_uniform_angles(value):
    theta = angle_activation(np.full(6, value))
    np.testing.assert_allclose(theta, 2 * math.pi * np.arange(1, 7) / 6, rtol=1e-14)


def test_widest_possible_gap_is_below_pi():
    raw = np.full(8, -10.0)
    raw[0] = 10.0
    theta = angle_activation(raw)
    gaps = np.diff(theta, prepend=0.0)
    # bound (1 + 1/6) / (7/6 + 1) * 2pi, evaluated independently
    bound = (1 + 1 / 6) / (7 * (1 / 6) + 1) * 2 * math.pi
    assert gaps.max() < math.pi
    assert gaps.max() <= bound + 1e-12


@given(arrays(np.float64, st.integers(3, 12), elements=st.floats(-50, 50)))
def test_angle_activation_invariants(raw):
    theta = angle_activation(raw)
    gaps = np.diff(theta, prepend=0.0)
    assert theta[-1] == 2 * math.pi
    assert np.all(gaps > 0)
    assert np.all(gaps < math.pi)


@given(arrays(np.float64, 8, elements=st.floats(-4, 4)))
def test_angle_deactivation_round_trip(raw):
    theta = angle_activation(raw)
    back, exact = angle_deactivation(theta)
    assert exact
    np.testing.assert_allclose(angle_activation(back), theta, atol=1e-9)


def test_deactivate_round_trip(rng):
    from drksplat.synthetic import random_scene
    raw = random_scene(rng, n=20)
    p = activate(raw)
    q = activate(deactivate(p))
    for name in ("mu", "R", "s", "theta", "eta", "tau", "o", "sh"):
        np.testing.assert_allclose(getattr(q, name), getattr(p, name), atol=1e-9)


# ---------------------------------------------------------------------------
# kernel density


def test_gaussian_config_value():
    prim = DrkPrimitive(np.zeros(3), np.eye(3), np.array([1.0, 2, 1, 2]),
                        np.array([0.5, 1, 1.5, 2]) * math.pi, 0.0, 0.0, 1.0)
    assert eval_kernel(0, 0, prim) == 1.0
    # theta = 2pi is the basis with s=2 under this ordering of s; the value is
    # therefore exp(-1/8) on the u axis
    assert abs(eval_kernel(1.0, 0.0, prim) - math.exp(-1 / 8)) < 1e-12


@pytest.mark.parametrize("su,sv", [(1.0, 1.0), (1.0, 2.0), (0.3, 1.7)])
def test_gaussian_special_case_all_quadrants(su, sv):
    prim = gaussian_special_case(su, sv)
    span = 3 * max(su, sv)
    for u in np.linspace(-span, span, 23):
        for v in np.linspace(-span, span, 23):
            want = math.exp(-0.5 * (u * u / su ** 2 + v * v / sv ** 2))
            assert abs(eval_kernel(u, v, prim) - want) < 1e-6
    assert eval_kernel(0.0, 0.0, prim) == 1.0
    assert abs(eval_kernel(1.0, 0.0, gaussian_special_case(1.0, 1.0)) - 0.60653) < 1e-5


def test_kernel_matches_reference(rng):
    for _ in range(200):
        prim = random_primitive(rng)
        u, v = rng.normal(size=2) * 2
        assert abs(eval_kernel(u, v, prim) - ref_kernel(u, v, prim.s, prim.theta, prim.eta)) < 1e-12


def test_endpoint_value_is_eta_independent(rng):
    for _ in range(50):
        prim = random_primitive(rng)
        for k in range(prim.K):
            u, v = prim.s[k] * math.cos(prim.theta[k]), prim.s[k] * math.sin(prim.theta[k])
            assert abs(eval_kernel(u, v, prim) - math.exp(-0.5)) < 1e-9


@given(st.integers(0, 2 ** 31), st.floats(0, 2 * math.pi))
def test_radial_decay(seed, phi):
    prim = random_primitive(np.random.default_rng(seed))
    r = np.linspace(0, 5, 60)
    g = [eval_kernel(t * math.cos(phi), t * math.sin(phi), prim) for t in r]
    assert np.all(np.diff(g) <= 1e-15)


# ---------------------------------------------------------------------------
# sharpening


TAUS = np.linspace(-0.09, 0.98, 20)


def test_sharpen_fixed_points_and_continuity():
    for tau in TAUS:
        assert sharpen(0.0, tau) == 0.0
        assert abs(sharpen(1.0, tau) - 1.0) < 1e-15
        assert abs(sharpen(0.5, tau) - 0.5) < 1e-15
        for b in ((1 + tau) / 4, (3 - tau) / 4):
            assert abs(sharpen(b - 1e-15, tau) - sharpen(b, tau)) < 1e-12


def test_sharpen_monotone_and_matches_reference():
    g = np.linspace(0, 1, 10 ** 4)
    for tau in TAUS:
        y = np.array([sharpen(x, tau) for x in g])
        assert np.all(np.diff(y) >= 0)
        ref = np.array([ref_sharpen(x, tau) for x in g])
        np.testing.assert_allclose(y, ref, atol=1e-15)


def test_sharpen_branch_example():
    assert abs(sharpen(0.2, 0.5) - 0.2 / 3) < 1e-15
    assert abs(sharpen_inverse(0.2 / 3, 0.5) - 0.2) < 1e-15


def test_sharpen_inverse():
    for tau in TAUS:
        assert sharpen_inverse(0.0, tau) == 0.0
        assert abs(sharpen_inverse(1.0, tau) - 1.0) < 1e-12
        for g in np.linspace(0, 1, 501):
            assert abs(sharpen_inverse(sharpen(g, tau), tau) - g) < 1e-12
            assert abs(sharpen(sharpen_inverse(g, tau), tau) - g) < 1e-12
    for y in np.linspace(0, 1, 11):
        assert abs(sharpen_inverse(y, 0.0) - y) < 1e-15


# ---------------------------------------------------------------------------
# opacity, low-pass, calibration


def test_alpha(rng):
    prim = random_primitive(rng, o=0.8)
    assert abs(alpha(0, 0, prim) - 0.8) < 1e-15
    zero = random_primitive(rng, o=0.0)
    assert alpha(0.3, -0.2, zero) == 0.0
    for _ in range(50):
        prim = random_primitive(rng)
        u, v = rng.normal(size=2)
        g = ref_kernel(u, v, prim.s, prim.theta, prim.eta)
        assert abs(alpha(u, v, prim) - prim.o * ref_sharpen(g, prim.tau)) < 1e-12


def test_low_pass_examples():
    cfg = KernelConfig()
    assert low_pass(0.3, 0.0, 0.0, 1.0, 0.7, cfg) == 0.7
    assert low_pass(0.5, 5.0, 0.0, 1.0, 1.0, cfg) == 0.5
    got = low_pass(0.0, 1.0, 0.0, 0.5, 1.0, cfg)
    assert abs(got - math.exp(-1 / (2 * 0.25 * 0.25))) < 1e-15
    assert abs(got - 3.35e-4) < 1e-6
    with pytest.raises(GrazingView):
        low_pass(0.1, 0, 0, 1e-8, 1.0, cfg)


@given(st.floats(0, 1), st.floats(-20, 20), st.floats(-20, 20), st.floats(0.01, 1),
       st.floats(0, 1))
def test_low_pass_never_decreases_alpha(a, dw, dh, c, o):
    a = min(a, o)
    assert low_pass(a, dw, dh, c, o, KernelConfig()) >= a


def test_calibration_examples():
    prim = DrkPrimitive(np.zeros(3), np.eye(3), np.full(8, 2.0), angle_activation(np.zeros(8)),
                        0.5, 0.0, 1.0)
    np.testing.assert_allclose(calibrated_radii(prim), 6.0, rtol=1e-12)
    prim = DrkPrimitive(np.zeros(3), np.eye(3), np.ones(8), angle_activation(np.zeros(8)),
                        0.5, 0.5, 1.0)
    # first branch: g = 3 e^-9, so s_c = sqrt(9 - ln 3)
    np.testing.assert_allclose(calibrated_radii(prim), math.sqrt(9 - math.log(3)), rtol=1e-12)
    np.testing.assert_allclose(calibrated_radii(prim), 2.8109, atol=1e-4)
    faint = DrkPrimitive(np.zeros(3), np.eye(3), np.ones(8), angle_activation(np.zeros(8)),
                         0.5, 0.5, THREE_SIGMA_LEVEL * 0.5)
    assert calibrated_endpoints(faint) is None


def test_calibration_bisection_oracle(rng):
    """s_c solves Psi(exp(-(s_c/s)^2)) = e^-9 / o (the calibration formula)."""
    for _ in range(30):
        prim = random_primitive(rng)
        sc = calibrated_radii(prim)
        target = THREE_SIGMA_LEVEL / prim.o
        lo, hi = 0.0, 10.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if ref_sharpen(math.exp(-mid * mid), prim.tau) > target:
                lo = mid
            else:
                hi = mid
        np.testing.assert_allclose(sc / prim.s, 0.5 * (lo + hi), rtol=1e-9)


def test_calibrated_endpoints_geometry(rng):
    prim = random_primitive(rng)
    pts = calibrated_endpoints(prim)
    sc = calibrated_radii(prim)
    local = (pts - prim.mu) @ prim.R
    np.testing.assert_allclose(local[:, 2], 0, atol=1e-12)
    np.testing.assert_allclose(np.hypot(local[:, 0], local[:, 1]), sc, rtol=1e-12)
    ang = np.arctan2(local[:, 1], local[:, 0]) % (2 * math.pi)
    np.testing.assert_allclose(np.cos(ang), np.cos(prim.theta), atol=1e-12)
