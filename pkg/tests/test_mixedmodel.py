import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import block_diag

from pofrm.basis import diff_matrix
from pofrm.errors import (InvalidArgumentError, NonConvergenceError, RankDeficiencyError,
                          SeparationWarning)
from pofrm.mixedmodel import build_penalty, fit_pirls_sop, get_family, reparameterize


def nonzero_eigs(n):
    d = diff_matrix(2, n)
    return np.linalg.eigvalsh(d.T @ d)[2:]


def assembled_g_inverse(sizes, lambdas):
    """Zero fixed block then, per covariate, the random-effect precision written with kron."""
    fixed = 1 + sum(2 if isinstance(s, int) else 4 for s in sizes)
    blocks = [np.zeros((fixed, fixed))]
    for s, lam in zip(sizes, lambdas):
        if isinstance(s, int):
            blocks.append(lam[0] * np.diag(nonzero_eigs(s)))
            continue
        r, c = s
        s1, s2 = np.diag(nonzero_eigs(r)), np.diag(nonzero_eigs(c))
        i2 = np.eye(2)
        l21, l22 = lam
        blocks.append(block_diag(
            l22 * np.kron(s2, i2),
            l21 * np.kron(i2, s1),
            l21 * np.kron(np.eye(c - 2), s1) + l22 * np.kron(s2, np.eye(r - 2)),
        ))
    return block_diag(*blocks)


def random_design(rng, n, p):
    b = rng.normal(size=(n, p))
    b[:, 0] = 1.0
    return b


def test_one_dimensional_block():
    p = build_penalty([4], [(1.0,)]).materialize()
    d = np.array([[1, -2, 1, 0], [0, 1, -2, 1]], dtype=float)
    want = np.zeros((5, 5))
    want[1:, 1:] = d.T @ d
    np.testing.assert_array_equal(p, want)


def test_constant_blocks_are_unpenalized():
    spec = build_penalty([6, (4, 5)], [(2.0,), (0.5, 3.0)])
    theta = np.r_[7.0, np.full(6, -1.5), np.full(20, 0.25)]
    assert abs(theta @ spec.materialize() @ theta) < 1e-12


def test_three_by_three_surface_has_four_null_directions():
    p = build_penalty([(3, 3)], [(1.0, 1.0)]).materialize()[1:, 1:]
    eig = np.linalg.eigvalsh(p)
    assert np.sum(np.abs(eig) < 1e-10 * eig.max()) == 4


def test_nonpositive_lambda_rejected():
    with pytest.raises(InvalidArgumentError):
        build_penalty([5], [(0.0,)])
    with pytest.raises(InvalidArgumentError):
        build_penalty([(4, 4)], [(1.0, -1.0)])


def test_reparameterization_shapes():
    rp = reparameterize(build_penalty([9, (5, 6)], [(1.0,), (1.0, 1.0)]))
    assert rp.n_fixed == 1 + 2 + 4
    assert rp.T.shape == (1 + 9 + 30, 1 + 9 + 30)
    assert rp.component_names == ("cov0", "cov1_t1", "cov1_t2")
    one_d = reparameterize(build_penalty([12], [(1.0,)]))
    assert one_d.Tn.shape[1] == 1 + 2


@settings(max_examples=25, deadline=None)
@given(q=st.integers(4, 12), r=st.integers(3, 7), c=st.integers(3, 7),
       lams=st.lists(st.floats(1e-3, 1e3), min_size=3, max_size=3))
def test_orthogonality_and_g_inverse_pattern(q, r, c, lams):
    sizes = [q, (r, c)]
    lam = [(lams[0],), (lams[1], lams[2])]
    rp = reparameterize(build_penalty(sizes, [(1.0,), (1.0, 1.0)]))
    np.testing.assert_allclose(rp.T.T @ rp.T, np.eye(rp.T.shape[0]), atol=1e-10)
    got = rp.T.T @ build_penalty(sizes, lam).materialize() @ rp.T
    want = assembled_g_inverse(sizes, lam)
    np.testing.assert_allclose(got, want, atol=1e-9 * max(1.0, np.abs(want).max()))
    tau2 = 1.0 / np.array(lams)
    np.testing.assert_allclose(rp.g_inverse(tau2), want, atol=1e-9 * max(1.0, np.abs(want).max()))


def test_fixed_tau_matches_closed_form(rng):
    sizes = [7, (4, 5)]
    lam = [(0.8,), (2.0, 0.3)]
    rp = reparameterize(build_penalty(sizes, [(1.0,), (1.0, 1.0)]))
    b = random_design(rng, 60, rp.T.shape[0])
    y = rng.normal(size=60)
    fit = fit_pirls_sop(b, y, "gaussian", rp, lambdas=[0.8, 2.0, 0.3])
    p = build_penalty(sizes, lam).materialize()
    want = np.linalg.solve(b.T @ b + p, b.T @ y)
    np.testing.assert_allclose(fit.theta, want, atol=1e-8 * np.abs(want).max())
    assert fit.iterations == 1


def test_tau_and_lambda_parameterizations_agree(rng):
    rp = reparameterize(build_penalty([8, 6], [(1.0,), (1.0,)]))
    b = random_design(rng, 50, rp.T.shape[0])
    y = rng.normal(size=50)
    a = fit_pirls_sop(b, y, "gaussian", rp, lambdas=[4.0, 0.25])
    c = fit_pirls_sop(b, y, "gaussian", rp, tau2=[0.25, 4.0], update=False)
    np.testing.assert_allclose(a.theta, c.theta, atol=1e-9)


def test_back_transform(rng):
    rp = reparameterize(build_penalty([8, (4, 4)], [(1.0,), (1.0, 1.0)]))
    b = random_design(rng, 80, rp.T.shape[0])
    y = b @ rng.normal(size=b.shape[1]) + 0.1 * rng.normal(size=80)
    fit = fit_pirls_sop(b, y, "gaussian", rp)
    xz = b @ rp.T
    np.testing.assert_allclose(b @ fit.theta, xz[:, :rp.n_fixed] @ fit.nu + xz[:, rp.n_fixed:] @ fit.delta,
                               atol=1e-9)
    np.testing.assert_allclose(fit.eta, b @ fit.theta, atol=1e-9)


def test_intercept_only_design_gives_mean(rng):
    rp = reparameterize(build_penalty([6, 5], [(1.0,), (1.0,)]))
    b = np.zeros((30, rp.T.shape[0]))
    b[:, 0] = 1.0
    y = rng.normal(3.0, 1.0, 30)
    fit = fit_pirls_sop(b, y, "gaussian", rp)
    assert fit.alpha == pytest.approx(np.mean(y), abs=1e-12)
    np.testing.assert_allclose(fit.theta[1:], 0.0, atol=1e-12)


def test_collinear_null_space_columns_raise(rng):
    rp = reparameterize(build_penalty([6], [(1.0,)]))
    b = random_design(rng, 20, 7)
    b[:, 1:] = b[:, 1:2]  # every coefficient column identical
    with pytest.raises(RankDeficiencyError):
        fit_pirls_sop(b, rng.normal(size=20), "gaussian", rp)


def test_flipped_labels_negate_the_fit(rng):
    rp = reparameterize(build_penalty([6], [(1.0,)]))
    b = random_design(rng, 120, 7)
    y = (rng.uniform(size=120) < 1 / (1 + np.exp(-(b[:, 1] - 0.5 * b[:, 3])))).astype(float)
    a = fit_pirls_sop(b, y, "binomial", rp, tol=1e-10, max_iter=500)
    c = fit_pirls_sop(b, 1.0 - y, "binomial", rp, tol=1e-10, max_iter=500)
    np.testing.assert_allclose(c.theta, -a.theta, atol=1e-6)
    np.testing.assert_allclose(c.mu, 1.0 - a.mu, atol=1e-6)


def test_penalized_deviance_never_increases_at_fixed_tau(rng):
    rp = reparameterize(build_penalty([8], [(1.0,)]))
    b = random_design(rng, 100, 9)
    y = (rng.uniform(size=100) < 1 / (1 + np.exp(-2 * b[:, 2]))).astype(float)
    fit = fit_pirls_sop(b, y, "binomial", rp, lambdas=[0.1], tol=1e-12)
    h = np.array(fit.history)
    assert np.all(np.diff(h) <= 1e-10 * (1 + np.abs(h[:-1])))


def test_null_space_truth_survives_heavy_penalty(rng):
    rp = reparameterize(build_penalty([8], [(1.0,)]))
    b = random_design(rng, 40, 9)
    theta = np.r_[0.7, 1.0 + 0.25 * np.arange(8)]  # linear in the coefficient index
    y = b @ theta
    a = fit_pirls_sop(b, y, "gaussian", rp, lambdas=[1.0])
    c = fit_pirls_sop(b, y, "gaussian", rp, lambdas=[1e6])
    np.testing.assert_allclose(a.theta, theta, atol=1e-4)
    np.testing.assert_allclose(c.theta, theta, atol=1e-4)


def test_effective_dimensions_add_up_to_hat_trace(rng):
    sizes = [8, (5, 5)]
    rp = reparameterize(build_penalty(sizes, [(1.0,), (1.0, 1.0)]))
    b = random_design(rng, 90, rp.T.shape[0])
    y = b @ rng.normal(size=b.shape[1]) * 0.3 + rng.normal(size=90)
    fit = fit_pirls_sop(b, y, "gaussian", rp, tau2=[0.5, 2.0, 1.5], update=False)
    lam = 1.0 / np.array([0.5, 2.0, 1.5])
    p = build_penalty(sizes, [(lam[0],), (lam[1], lam[2])]).materialize()
    hat = b @ np.linalg.solve(b.T @ b + p, b.T)
    assert fit.ed.sum() + rp.n_fixed == pytest.approx(np.trace(hat), rel=1e-9)


def test_variance_components_reach_their_fixed_point(rng):
    rp = reparameterize(build_penalty([10], [(1.0,)]))
    b = random_design(rng, 150, 11)
    y = b @ np.r_[0.2, np.sin(np.arange(10))] + 0.5 * rng.normal(size=150)
    fit = fit_pirls_sop(b, y, "gaussian", rp, tol=1e-10, max_iter=500)
    assert fit.converged
    delta = fit.delta
    quad = delta @ (rp.precisions[0] * delta)
    assert fit.tau2[0] == pytest.approx(quad / (fit.ed[0] * fit.dispersion), rel=1e-5)


def test_separation_warning(rng):
    rp = reparameterize(build_penalty([5], [(1.0,)]))
    b = random_design(rng, 60, 6)
    y = (b[:, 1] > 0).astype(float)
    with pytest.warns(SeparationWarning):
        fit_pirls_sop(b, y, "binomial", rp, lambdas=[1e-8], max_iter=100)


def test_non_convergence_carries_last_iterate(rng):
    rp = reparameterize(build_penalty([8], [(1.0,)]))
    b = random_design(rng, 80, 9)
    y = (rng.uniform(size=80) < 0.5).astype(float)
    with pytest.raises(NonConvergenceError) as err:
        fit_pirls_sop(b, y, "binomial", rp, max_iter=1)
    assert err.value.fit is not None and err.value.fit.iterations == 1


def test_invalid_inputs(rng):
    rp = reparameterize(build_penalty([5], [(1.0,)]))
    b = random_design(rng, 20, 6)
    with pytest.raises(InvalidArgumentError):
        fit_pirls_sop(b, np.full(20, 2.0), "binomial", rp)
    with pytest.raises(InvalidArgumentError):
        fit_pirls_sop(b[:, :5], np.zeros(20), "gaussian", rp)
    with pytest.raises(InvalidArgumentError):
        fit_pirls_sop(b, np.zeros(20), "poisson", rp)
    with pytest.raises(InvalidArgumentError):
        fit_pirls_sop(b, np.zeros(20), "gaussian", rp, lambdas=[1.0, 2.0])


def test_logit_inverse_at_zero():
    assert get_family("binomial").inverse_link(np.zeros(3)).tolist() == [0.5, 0.5, 0.5]


def test_gaussian_fit_needs_no_warnings(rng):
    rp = reparameterize(build_penalty([6], [(1.0,)]))
    b = random_design(rng, 40, 7)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_pirls_sop(b, rng.normal(size=40), "gaussian", rp)
