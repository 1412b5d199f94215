"""Target contract: values, gradients, rotated-frame identities, validation."""

import numpy as np
import pytest

from pcsghmc.errors import ConfigError
from pcsghmc.targets import (GaussianTarget, anisotropic_gaussian, build_target,
                             correlated_gaussian, fd_gradient, rotated_gradient,
                             rotated_potential, toy_shear_target, validate_rotation)

LOG_2PI = np.log(2.0 * np.pi)


def random_orthogonal(dim, rng):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


@pytest.fixture(scope="module")
def shear():
    return toy_shear_target()


# -- trivial pinned values -----------------------------------------------------

def test_standard_gaussian_potential_is_zero_at_mode():
    t = GaussianTarget(np.zeros(2), np.eye(2))
    assert t.potential(np.zeros(2)) == 0.0
    np.testing.assert_allclose(t.gradient(np.array([1.0, 0.0])), [1.0, 0.0])


def test_identity_rotation_changes_nothing():
    t = correlated_gaussian(3, 0.4)
    w = np.array([0.3, -1.2, 0.7])
    assert rotated_potential(t, np.eye(3), w)[0] == t.potential(w)
    np.testing.assert_array_equal(rotated_gradient(t, np.eye(3), w)[0], t.gradient(w))


# -- rotated-frame identities ---------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rotated_potential_matches_change_of_variables(seed):
    rng = np.random.default_rng(seed)
    t = anisotropic_gaussian([4.0, 1.0, 0.25, 2.0])
    P = random_orthogonal(4, rng)
    theta = rng.standard_normal((6, 4))
    np.testing.assert_allclose(rotated_potential(t, P, theta),
                               t.potential_batch(theta @ P.T), rtol=1e-12)
    # gradient pulls back through P^T
    gw = t.gradient_batch(theta @ P.T)
    np.testing.assert_allclose(rotated_gradient(t, P, theta), gw @ P, rtol=1e-12)


def test_rotated_gradient_matches_finite_differences(shear):
    rng = np.random.default_rng(7)
    for t in (correlated_gaussian(2, 0.95), shear):
        D = t.dim
        P = np.eye(D) if t.sigma_index is not None else random_orthogonal(D, rng)
        theta = 0.3 * rng.standard_normal(D)
        got = rotated_gradient(t, P, theta)[0]
        want = fd_gradient(lambda x: rotated_potential(t, P, x[None])[0], theta, 3e-6)
        np.testing.assert_allclose(got, want, rtol=2e-5, atol=1e-8)


# -- gradients vs finite differences (property over random points) --------------

@pytest.mark.parametrize("name", ["gauss2d", "gauss2d-rho0.95", "gauss5d-aniso"])
def test_gaussian_gradients_match_fd_at_100_points(name):
    t = build_target(name)
    rng = np.random.default_rng(11)
    pts = rng.standard_normal((100, t.dim)) * 2.0
    grads = t.gradient_batch(pts)
    for i in range(100):
        want = fd_gradient(t.potential, pts[i], 1e-6)
        err = np.abs(grads[i] - want) / np.maximum(np.abs(want), 1e-8)
        assert err.max() < 1e-5


def test_shear_gradient_matches_fd_at_100_points(shear):
    rng = np.random.default_rng(13)
    pts = rng.standard_normal((100, shear.dim)) * 0.8
    grads = shear.gradient_batch(pts)
    for i in range(0, 100, 7):  # FD of FD is exact in structure; spot-check density
        want = fd_gradient(shear.potential, pts[i], 3e-6)
        err = np.abs(grads[i] - want) / np.maximum(np.abs(want), 1e-2)
        assert err.max() < 1e-5


# -- exact sampler ---------------------------------------------------------------

def test_exact_sampler_moments():
    t = correlated_gaussian(2, 0.95)
    x = t.exact_sample(100_000, np.random.default_rng(3))
    se_mean = 1.0 / np.sqrt(len(x))
    assert np.all(np.abs(x.mean(axis=0)) < 3 * se_mean)
    c = np.cov(x.T)
    # var(sample cov entries) ~ (1+rho^2)/n; 3-sigma bars
    assert np.all(np.abs(c - t.cov) < 3 * np.sqrt(2.0 / len(x)))


def test_shear_has_no_exact_sampler(shear):
    with pytest.raises(NotImplementedError):
        shear.exact_sample(3, np.random.default_rng(0))


# -- shear-building likelihood oracle -------------------------------------------

def test_shear_misfit_matches_direct_gaussian_evaluation(shear):
    """Oracle: recompute the misfit from the simulated series directly."""
    w = shear.true_w
    pred = shear.predict(w[None, :-1])[0]
    resid = pred - shear.data
    sigma = w[-1] * shear.sigma0
    n = resid.size
    want = 0.5 * n * (LOG_2PI + 2 * np.log(sigma)) + np.sum(resid**2) / (2 * sigma**2)
    got = shear.neg_log_likelihood(w[None, :])[0]
    np.testing.assert_allclose(got, want, rtol=1e-12)
    # frozen values for the default toy problem (guards the seeded generator)
    np.testing.assert_allclose(got, -191.85224336372204, rtol=1e-9)
    np.testing.assert_allclose(shear.sigma0, 0.15104510386372857, rtol=1e-9)
    np.testing.assert_allclose(shear.potential(shear.unconstrain(w)),
                               -187.9547590527088, rtol=1e-9)


def test_shear_potential_finite_inside_domain(shear):
    rng = np.random.default_rng(5)
    u = rng.uniform(-12.0, 12.0, size=(50, shear.dim))
    pots = shear.potential_batch(u)
    assert np.all(np.isfinite(pots))


def test_constrain_unconstrain_roundtrip(shear):
    rng = np.random.default_rng(9)
    u = rng.uniform(-6, 6, size=(20, shear.dim))
    np.testing.assert_allclose(shear.unconstrain(shear.constrain(u)), u, rtol=1e-9, atol=1e-9)
    assert np.all(shear.constrain(u) > shear.lo)
    assert np.all(shear.constrain(u) < shear.hi)


def test_prior_variances(shear):
    t = anisotropic_gaussian([25, 9, 4, 1, 0.25])
    np.testing.assert_allclose(t.prior_variance_unconstrained(), [25, 9, 4, 1, 0.25])
    v = shear.prior_variance_unconstrained()
    assert v.shape == (3,)
    assert np.all(v > 0) and np.all(np.isfinite(v))
    # stiffness coordinates share a prior; sigma differs
    np.testing.assert_allclose(v[0], v[1], rtol=1e-10)
    assert v[2] > v[0]


# -- validation ------------------------------------------------------------------

def test_validate_rotation_rejects_non_orthonormal():
    P = np.eye(3)
    P[0, 1] = 1e-6
    with pytest.raises(ConfigError):
        validate_rotation(P, 3)
    validate_rotation(np.eye(3), 3)  # passes


def test_validate_rotation_pins_sigma_row(shear):
    rng = np.random.default_rng(1)
    P = np.eye(shear.dim)
    Q = random_orthogonal(shear.dim, rng)
    with pytest.raises(ConfigError):
        validate_rotation(Q, shear.dim, shear.sigma_index)
    # block rotation leaving the noise coordinate alone passes
    P[:2, :2] = random_orthogonal(2, rng)
    validate_rotation(P, shear.dim, shear.sigma_index)


def test_gaussian_target_validation():
    with pytest.raises(ConfigError):
        GaussianTarget(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))  # not PD
    with pytest.raises(ConfigError):
        GaussianTarget(np.zeros(2), np.array([[1.0, 0.2], [0.1, 1.0]]))  # asymmetric


def test_registry_names():
    assert build_target("gauss2d").dim == 2
    assert build_target("gauss5d-rho0.9").dim == 5
    assert build_target({"name": "shear2"}).dim == 3
    t = build_target({"type": "gaussian", "mean": [0.0, 1.0], "cov": [[2.0, 0.0], [0.0, 1.0]]})
    assert t.potential(np.array([0.0, 1.0])) == 0.0
    with pytest.raises(ConfigError):
        build_target("gauss2d-rho")
    with pytest.raises(ConfigError):
        build_target("nope")
    with pytest.raises(ConfigError):
        build_target({"type": "shear"})
