import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from modeltest import linalg as L, mestim as ME, models as M
from modeltest.errors import PreconditionError

from conftest import low_rank_design

LOSSES = [
    lambda d: ME.SquaredLoss(d),
    lambda d: ME.GlmLoss(d, "gaussian"),
    lambda d: ME.GlmLoss(d, "logistic"),
    lambda d: ME.GlmLoss(d, "poisson"),
]


class Cubic(ME.LossModel):
    """Generic (non-GLM) strictly convex loss used to exercise the eigen path."""

    def value(self, theta, x, y):
        r = float(np.dot(x, theta)) - y
        return 0.5 * r * r + r**4 / 12.0

    def gradient(self, theta, x, y):
        r = float(np.dot(x, theta)) - y
        return (r + r**3 / 3.0) * np.asarray(x, float)

    def hessian(self, theta, x, y):
        r = float(np.dot(x, theta)) - y
        return (1.0 + r * r) * np.outer(x, x)


def fd_check(loss, theta, x, y):
    g = loss.gradient(theta, x, y)
    H = loss.hessian(theta, x, y)
    for j in range(theta.size):
        h = 1e-5 * (1 + abs(theta[j]))
        e = np.zeros_like(theta)
        e[j] = h
        fd_g = (loss.value(theta + e, x, y) - loss.value(theta - e, x, y)) / (2 * h)
        fd_H = (loss.gradient(theta + e, x, y) - loss.gradient(theta - e, x, y)) / (2 * h)
        assert fd_g == pytest.approx(g[j], rel=1e-5, abs=1e-7)
        np.testing.assert_allclose(fd_H, H[:, j], rtol=1e-5, atol=1e-7)
    assert np.linalg.eigvalsh(H).min() >= -1e-12


@pytest.mark.parametrize("make", LOSSES + [lambda d: Cubic(d)])
@given(seed=st.integers(0, 2**32 - 1))
def test_loss_derivatives_finite_differences(make, seed):
    rng = np.random.default_rng(seed)
    loss = make(3)
    theta = rng.normal(size=3) * 0.5
    x = rng.normal(size=3)
    y = 1.0 if isinstance(loss, ME.GlmLoss) and loss.family.name == "logistic" else float(rng.poisson(1.0))
    fd_check(loss, theta, x, y)


@pytest.mark.parametrize("make", LOSSES)
def test_batched_matches_scalar(make, rng):
    loss = make(3)
    X, Y, th = rng.normal(size=(7, 3)), rng.poisson(1.0, 7).astype(float), rng.normal(size=3) * 0.3
    np.testing.assert_allclose(loss.values(th, X, Y), [loss.value(th, x, y) for x, y in zip(X, Y)])
    np.testing.assert_allclose(loss.gradients(th, X, Y), np.array([loss.gradient(th, x, y) for x, y in zip(X, Y)]))
    H = sum(loss.hessian(th, x, y) for x, y in zip(X, Y)) / 7
    np.testing.assert_allclose(loss.mean_hessian(th, X, Y), H, rtol=1e-12, atol=1e-14)


# emp_grad / emp_hessian

def test_emp_grad_examples(rng):
    X = rng.normal(size=(10, 3))
    Y = rng.normal(size=10)
    s = M.Sample(X, Y)
    th = L.least_squares_minnorm(X, Y)
    np.testing.assert_allclose(ME.emp_grad(ME.SquaredLoss(3), s, th), 0, atol=1e-8)
    s2 = M.Sample(np.eye(2), [1.0, 0.0])
    np.testing.assert_allclose(ME.emp_grad(ME.SquaredLoss(2), s2, [0, 0]), [-0.5, 0.0])
    t = rng.normal(size=3)
    np.testing.assert_allclose(ME.emp_grad(ME.GlmLoss(3, "gaussian"), s, t),
                               ME.emp_grad(ME.SquaredLoss(3), s, t), atol=1e-10)


def test_emp_hessian_examples(rng):
    X = rng.normal(size=(10, 3))
    s = M.Sample(X, np.sign(rng.normal(size=10)))
    np.testing.assert_array_equal(ME.emp_hessian(ME.SquaredLoss(3), s, rng.normal(size=3)), L.sample_cov(X))
    np.testing.assert_allclose(ME.emp_hessian(ME.GlmLoss(3, "logistic"), s, np.zeros(3)), L.sample_cov(X))
    # finite differences of the empirical gradient
    loss = ME.GlmLoss(3, "logistic")
    th = rng.normal(size=3) * 0.4
    H = ME.emp_hessian(loss, s, th)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-5
        fd = (ME.emp_grad(loss, s, th + e) - ME.emp_grad(loss, s, th - e)) / 2e-5
        np.testing.assert_allclose(fd, H[:, j], rtol=1e-5, atol=1e-8)


def test_dimension_checks():
    s = M.Sample(np.eye(2), [1.0, 0.0])
    with pytest.raises(PreconditionError):
        ME.emp_grad(ME.SquaredLoss(3), s, np.zeros(3))
    with pytest.raises(PreconditionError):
        ME.emp_grad(ME.SquaredLoss(2), s, np.zeros(3))


# newton decrement

def test_decrement_examples(rng):
    assert ME.newton_decrement(ME.SquaredLoss(2), M.Sample(np.eye(2), [1.0, 0.0]), [0, 0]) == pytest.approx(1.0)
    X, Y = rng.normal(size=(10, 3)), rng.normal(size=10)
    th = L.least_squares_minnorm(X, Y)
    assert ME.newton_decrement(ME.SquaredLoss(3), M.Sample(X, Y), th) == pytest.approx(0.0, abs=1e-8)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_decrement_equals_projection(n, d, seed):
    rng = np.random.default_rng(seed)
    X = low_rank_design(rng, n, d, int(rng.integers(1, min(n, d) + 1)))
    Y, th = rng.normal(size=n), rng.normal(size=d)
    s = M.Sample(X, Y)
    proj = L.project_sq_norm(X, Y - X @ th)
    for loss in (ME.SquaredLoss(d), ME.GlmLoss(d, "gaussian")):
        assert ME.newton_decrement(loss, s, th) == pytest.approx(proj, rel=1e-8, abs=1e-10)


def test_generic_eigen_path_agrees_with_glm_path(rng):
    class PlainSquared(ME.LossModel):
        def value(self, t, x, y):
            return 0.5 * (y - x @ t) ** 2

        def gradient(self, t, x, y):
            return (x @ t - y) * x

        def hessian(self, t, x, y):
            return np.outer(x, x)

    X, Y, th = rng.normal(size=(12, 4)), rng.normal(size=12), rng.normal(size=4)
    s = M.Sample(X, Y)
    a = ME.decrement(PlainSquared(4), s, th)
    b = ME.decrement(ME.SquaredLoss(4), s, th)
    assert a.value == pytest.approx(b.value, rel=1e-8)
    assert a.rank == b.rank == 4


def test_decrement_annihilated_mass_reported():
    class Degenerate(ME.LossModel):
        def value(self, t, x, y):
            return float(t[1]) + 0.5 * float(t[0]) ** 2

        def gradient(self, t, x, y):
            return np.array([t[0], 1.0])

        def hessian(self, t, x, y):
            return np.diag([1.0, 0.0])

    s = M.Sample(np.zeros((4, 2)), np.zeros(4))
    out = ME.decrement(Degenerate(2), s, np.array([2.0, 0.0]))
    assert out.value == pytest.approx(4 * 4.0)
    assert out.annihilated == pytest.approx(4 * 1.0)
    assert out.rank == 1


@pytest.mark.parametrize("family", ["gaussian", "logistic", "poisson"])
@given(seed=st.integers(0, 2**32 - 1))
def test_decrement_affine_invariance(family, seed):
    rng = np.random.default_rng(seed)
    n, d = 15, 3
    X = rng.normal(size=(n, d))
    th = rng.normal(size=d) * 0.3
    y = np.sign(rng.normal(size=n)) if family == "logistic" else rng.poisson(1.0, n).astype(float)
    A = rng.normal(size=(d, d)) + 3 * np.eye(d)
    if abs(np.linalg.det(A)) < 0.1:
        return
    loss = ME.GlmLoss(d, family)
    base = ME.newton_decrement(loss, M.Sample(X, y), th)
    # theta -> A theta with x -> A^{-T} x keeps every x^T theta
    moved = ME.newton_decrement(loss, M.Sample(X @ np.linalg.inv(A), y), A @ th)
    assert moved == pytest.approx(base, rel=1e-6, abs=1e-9)


# Fisher bundle

def test_fisher_bundle_bartlett(rng):
    theta = np.array([0.5, -0.5, 0.0, 0.0])
    cov = np.diag([1.0, 1.0, 1.0, 0.0])
    spec = M.LinearModelSpec(theta, cov)
    fb = ME.fisher_bundle_empirical(ME.SquaredLoss(4), M.sample_linear(spec, 100_000, rng), theta)
    # tr J ~ (1/n) sum eps^2 x^T Sigma^+ x: variance (3(r^2 + 2r) - r^2) / n
    r = 3
    assert abs(fb.tr_J - r) <= 3 * math.sqrt((2 * r * r + 6 * r) / 100_000)
    assert fb.tr_J2 <= fb.tr_J * fb.op_norm_J + 1e-12
    for S in (fb.H, fb.G, fb.J):
        np.testing.assert_allclose(S, S.T)
        assert np.linalg.eigvalsh(S).min() > -1e-10


def test_fisher_bundle_variance_misspecified(rng):
    theta = np.zeros(3)
    spec = M.LinearModelSpec(theta, np.eye(3), noise_sigma=2.0)
    reps = [ME.fisher_bundle_empirical(ME.SquaredLoss(3), M.sample_linear(spec, 5_000, rng), theta).tr_J / 3
            for _ in range(40)]
    m, se = np.mean(reps), np.std(reps, ddof=1) / math.sqrt(len(reps))
    assert abs(m - 4.0) <= 3 * se + 1e-3 * 4


def test_fisher_bundle_repeated_observation():
    s = M.Sample(np.tile([[1.0, 2.0]], (5, 1)), np.full(5, 3.0))
    fb = ME.fisher_bundle_empirical(ME.SquaredLoss(2), s, np.zeros(2))
    np.testing.assert_allclose(fb.G, 0, atol=1e-12)
    np.testing.assert_allclose(fb.J, 0, atol=1e-12)
    with pytest.raises(PreconditionError):
        ME.fisher_bundle_empirical(ME.SquaredLoss(2), s.rows(slice(0, 1)), np.zeros(2))


def test_bartlett_gap_shrinks_with_n():
    theta = np.array([0.4, -0.3])
    spec = M.GlmSpec(theta, np.eye(2), "logistic")
    loss = ME.GlmLoss(2, "logistic")
    rng = np.random.default_rng(11)
    gaps = []
    for n in (100, 1000, 10000):
        vals = []
        for _ in range(50):
            fb = ME.fisher_bundle_empirical(loss, M.sample_glm(spec, n, rng), theta)
            vals.append(np.linalg.norm(fb.J - L.spectral_projector(fb.H)))
        gaps.append(np.mean(vals))
    assert gaps[0] > gaps[1] > gaps[2]


# population separation

def test_separation_linear_closed_form(rng):
    cov = np.diag([1.0, 2.0, 0.0])
    spec = M.LinearModelSpec(np.array([0.1, 0.2, 0.0]), cov)
    other = np.array([1.0, -1.0, 5.0])
    val = ME.separation_bar_delta(ME.SquaredLoss(3), spec, other)
    assert val == pytest.approx(M.population_delta_linear(spec, spec.theta, other), rel=1e-12)
    assert ME.separation_bar_delta(ME.SquaredLoss(3), spec, spec.theta) == pytest.approx(0.0, abs=1e-15)
    # Monte Carlo through the generic path agrees
    glm_spec = M.GlmSpec(spec.theta, cov, "gaussian", M.Misspecification(1.0, 0.0))
    mc = ME.separation_bar_delta(_Generic(ME.SquaredLoss(3)), glm_spec, other, 200_000, rng)
    assert mc == pytest.approx(val, rel=0.03)


class _Generic(ME.LossModel):
    """Wraps a loss to hide its GLM structure."""

    def __init__(self, inner):
        super().__init__(inner.dim)
        self.inner = inner

    def value(self, t, x, y):
        return self.inner.value(t, x, y)

    def gradient(self, t, x, y):
        return self.inner.gradient(t, x, y)

    def hessian(self, t, x, y):
        return self.inner.hessian(t, x, y)

    def gradients(self, t, X, Y):
        return self.inner.gradients(t, X, Y)

    def mean_hessian(self, t, X, Y):
        return self.inner.mean_hessian(t, X, Y)


def test_separation_logistic_self_consistent():
    spec = M.GlmSpec(np.array([0.3, 0.0]), np.eye(2), "logistic")
    loss = ME.GlmLoss(2, "logistic")
    other = np.array([0.8, 0.2])
    small = [ME.separation_bar_delta(loss, spec, other, 20_000, np.random.default_rng(i)) for i in range(20)]
    big = ME.separation_bar_delta(loss, spec, other, 2_000_000, np.random.default_rng(99))
    sd = np.std(small, ddof=1)
    # the large run uses 100x the draws of one small run
    combined = math.sqrt(sd**2 / len(small) + sd**2 / 100)
    assert abs(np.mean(small) - big) <= 3 * combined
    assert ME.separation_bar_delta(loss, spec, spec.theta, 20_000, np.random.default_rng(0)) < 1e-3
