import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pofrm.basis import diff_matrix, eval_design, eval_design_2d, make_basis, make_basis_2d
from pofrm.errors import DomainError, InvalidArgumentError, SingularSystemError
from pofrm.smoothing import (DEFAULT_LAMBDAS_1D, FunctionalSample, fitted_values, select_lambda_gcv,
                             smooth_sample, smooth_samples)

T = np.linspace(0.0, 1.0, 40)


def reduced_solution(phi, mask, y, penalty):
    """Penalized LS on the rows that survive deletion."""
    po = phi[mask]
    return np.linalg.solve(po.T @ po + penalty, po.T @ y[mask])


def penalty_1d(p, lam):
    d = diff_matrix(2, p)
    return lam * d.T @ d


def penalty_2d(p1, p2, lam1, lam2):
    d1, d2 = diff_matrix(2, p1), diff_matrix(2, p2)
    return lam1 * np.kron(np.eye(p2), d1.T @ d1) + lam2 * np.kron(d2.T @ d2, np.eye(p1))


def oracle_gcv(phi, mask, y, penalty):
    po, yo = phi[mask], y[mask]
    hat = po @ np.linalg.solve(po.T @ po + penalty, po.T)
    n = yo.size
    rss = np.sum((yo - hat @ yo) ** 2)
    return n * rss / (n - np.trace(hat)) ** 2


def test_interpolation_limit():
    t = np.linspace(0, 1, 16)
    y = np.sin(3 * t) + t ** 3
    b = make_basis(0, 1, 16)
    s = FunctionalSample.from_array(y, t)
    fit = smooth_sample(s, b, 1e-13)
    np.testing.assert_allclose(fitted_values(s, b, fit.coeffs), y, atol=1e-8)


def test_masked_fit_equals_row_deleted_fit(rng):
    b = make_basis(0, 1, 12)
    y = np.cos(4 * T) + 0.1 * rng.normal(size=T.size)
    mask = np.ones(T.size, bool)
    mask[7:19] = False
    got = smooth_sample(FunctionalSample((T,), np.where(mask, y, np.nan), mask), b, 0.3).coeffs
    want = reduced_solution(eval_design(b, T), mask, y, penalty_1d(12, 0.3))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10 * np.abs(want).max())


def test_huge_lambda_projects_onto_penalty_null_space(rng):
    # with clamped knots the null space of the second-difference penalty is spanned
    # by the constant and the coefficient ramp, not by the straight line in t
    b = make_basis(0, 1, 12)
    phi = eval_design(b, T)
    y = np.exp(T) + 0.05 * rng.normal(size=T.size)
    mask = rng.uniform(size=T.size) < 0.7
    fit = smooth_sample(FunctionalSample((T,), np.where(mask, y, np.nan), mask), b, 1e12)
    null = phi @ np.column_stack([np.ones(12), np.arange(12.0)])
    coef, *_ = np.linalg.lstsq(null[mask], y[mask], rcond=None)
    np.testing.assert_allclose(phi @ fit.coeffs, null @ coef, atol=1e-6)


def test_noiseless_null_space_data_picks_largest_lambda():
    b = make_basis(0, 1, 12)
    y = eval_design(b, T) @ (0.4 - 0.2 * np.arange(12))
    got = select_lambda_gcv(FunctionalSample.from_array(y, T), b, [1e-2, 1.0, 1e2, 1e4])
    assert got.lambda_used == 1e4


def test_single_candidate_grid_matches_direct_fit(rng):
    b = make_basis(0, 1, 10)
    s = FunctionalSample.from_array(np.sin(5 * T) + 0.2 * rng.normal(size=T.size), T)
    a = select_lambda_gcv(s, b, [0.7])
    c = smooth_sample(s, b, 0.7)
    np.testing.assert_array_equal(a.coeffs, c.coeffs)
    assert a.gcv_score == c.gcv_score


def test_gcv_choice_is_the_exhaustive_minimum(rng):
    b = make_basis(0, 1, 15)
    phi = eval_design(b, T)
    y = np.sin(2 * np.pi * T) + 0.3 * rng.normal(size=T.size)
    s = FunctionalSample.from_array(y, T)
    grid = [1e-6, 1.0, 1e6]
    scores = [oracle_gcv(phi, np.ones(T.size, bool), y, penalty_1d(15, lam)) for lam in grid]
    got = select_lambda_gcv(s, b, grid)
    assert got.lambda_used == grid[int(np.argmin(scores))]
    assert got.gcv_score == pytest.approx(min(scores), rel=1e-8)


def test_empty_grid_rejected():
    with pytest.raises(InvalidArgumentError):
        select_lambda_gcv(FunctionalSample.from_array(T, T), make_basis(0, 1, 8), [])


def test_effective_dimension_decreases_along_lambda_ladder(rng):
    b = make_basis(0, 1, 15)
    s = FunctionalSample.from_array(np.sin(4 * T) + 0.1 * rng.normal(size=T.size), T)
    edf = [smooth_sample(s, b, lam).edf for lam in np.logspace(-6, 6, 25)]
    assert np.all(np.diff(edf) <= 1e-9)
    assert edf[0] > edf[-1] > 2.0 - 1e-6


def test_values_at_unobserved_positions_are_never_read(rng):
    b = make_basis(0, 1, 10)
    y = np.sin(3 * T)
    mask = np.ones(T.size, bool)
    mask[5:15] = False
    a = np.where(mask, y, 1e6)
    c = np.where(mask, y, -3.0)
    f1 = smooth_sample(FunctionalSample((T,), a, mask), b, 0.1).coeffs
    f2 = smooth_sample(FunctionalSample((T,), c, mask), b, 0.1).coeffs
    np.testing.assert_array_equal(f1, f2)
    m1 = smooth_samples([FunctionalSample((T,), a, mask)], b)[0].coeffs
    m2 = smooth_samples([FunctionalSample((T,), c, mask)], b)[0].coeffs
    np.testing.assert_array_equal(m1, m2)


def _constant_in_t2(profile, t1, t2, lams):
    values = np.repeat(profile[:, None], t2.size, axis=1)
    b = make_basis_2d((0, 1), (0, 1), (8, 7))
    s = FunctionalSample.from_array(values, (t1, t2))
    surf = fitted_values(s, b, smooth_sample(s, b, lams).coeffs)
    return np.max(np.abs(surf - surf[:, :1]))


def test_surface_constant_along_t2_stays_constant(rng):
    # the t2 penalty never acts on a t2-constant fit; the t1 penalty does, through the
    # unequal column sums of the clamped t2 basis, so it is made negligible here
    t1, t2 = np.linspace(0, 1, 14), np.linspace(0, 1, 11)
    profile = np.sin(3 * t1) + 0.1 * rng.normal(size=t1.size)
    assert _constant_in_t2(profile, t1, t2, (1e-10, 2.0)) < 1e-8
    assert _constant_in_t2(profile, t1, t2, (1e-10, 1e6)) < 1e-8


def test_surface_with_null_space_profile_stays_constant_for_any_lambda():
    t1, t2 = np.linspace(0, 1, 14), np.linspace(0, 1, 11)
    profile = eval_design(make_basis(0, 1, 8), t1) @ (1.0 + 0.3 * np.arange(8))
    for lams in [(0.5, 2.0), (100.0, 1e-3)]:
        assert _constant_in_t2(profile, t1, t2, lams) < 1e-8


def test_surface_masked_fit_equals_row_deleted_fit(rng):
    t1, t2 = np.linspace(0, 1, 10), np.linspace(0, 1, 9)
    b = make_basis_2d((0, 1), (0, 1), (6, 5))
    values = np.add.outer(np.sin(3 * t1), t2 ** 2) + 0.05 * rng.normal(size=(10, 9))
    mask = np.ones((10, 9), bool)
    mask[2:6, 3:7] = False
    got = smooth_sample(FunctionalSample((t1, t2), np.where(mask, values, np.nan), mask), b, (0.2, 3.0))
    phi = eval_design_2d(b, t1, t2)
    want = reduced_solution(phi, mask.ravel(order="F"), values.ravel(order="F"), penalty_2d(6, 5, 0.2, 3.0))
    np.testing.assert_allclose(got.coeffs, want, atol=1e-10 * np.abs(want).max())


def test_batched_smoothing_matches_single_sample_route(rng):
    # proportional grids go through a spectral downdate; single fits use a direct solve
    b = make_basis(0, 1, 20)
    grid = list(np.logspace(-3, 3, 9))
    samples = []
    for i in range(12):
        y = np.sin((2 + i % 3) * T) + 0.1 * rng.normal(size=T.size)
        mask = np.ones(T.size, bool)
        if i % 2:
            start = rng.integers(0, 30)
            mask[start:start + 9] = False
        samples.append(FunctionalSample((T,), np.where(mask, y, np.nan), mask))
    batch = smooth_samples(samples, b, grid)
    for s, got in zip(samples, batch):
        single = select_lambda_gcv(s, b, grid)
        assert got.lambda_used == single.lambda_used
        np.testing.assert_allclose(got.coeffs, single.coeffs, atol=1e-9)
        assert got.edf == pytest.approx(single.edf, abs=1e-8)


def test_batched_surface_smoothing_matches_single_route(rng):
    t1, t2 = np.linspace(0, 1, 12), np.linspace(0, 1, 12)
    b = make_basis_2d((0, 1), (0, 1), (7, 7))
    grid = [(lam, lam) for lam in np.logspace(-2, 2, 5)]
    samples = []
    for i in range(5):
        v = np.add.outer(rng.normal() * np.sin(4 * t1), np.cos(3 * t2)) + 0.05 * rng.normal(size=(12, 12))
        mask = np.ones((12, 12), bool)
        if i % 2:
            mask[3:7, 2:5] = False
        samples.append(FunctionalSample((t1, t2), np.where(mask, v, np.nan), mask))
    for s, got in zip(samples, smooth_samples(samples, b, grid)):
        single = select_lambda_gcv(s, b, grid)
        assert got.lambda_used == single.lambda_used
        np.testing.assert_allclose(got.coeffs, single.coeffs, atol=1e-9)


def test_shared_smoothing_uses_one_lambda(rng):
    b = make_basis(0, 1, 12)
    samples = [FunctionalSample.from_array(np.sin(k * T) + 0.1 * rng.normal(size=T.size), T) for k in range(1, 6)]
    out = smooth_samples(samples, b, shared=True)
    assert len({o.lambda_used for o in out}) == 1
    assert out[0].lambda_used in DEFAULT_LAMBDAS_1D


def test_fixed_lambda_bypasses_selection(rng):
    b = make_basis(0, 1, 12)
    s = FunctionalSample.from_array(np.sin(T) + 0.1 * rng.normal(size=T.size), T)
    out = smooth_samples([s], b, fixed_lambda=0.123)[0]
    assert out.lambda_used == 0.123
    np.testing.assert_allclose(out.coeffs, smooth_sample(s, b, 0.123).coeffs, atol=1e-12)


def test_single_observed_point_is_singular():
    mask = np.zeros(T.size, bool)
    mask[4] = True
    s = FunctionalSample((T,), np.where(mask, 1.0, np.nan), mask)
    with pytest.raises(SingularSystemError):
        smooth_sample(s, make_basis(0, 1, 8), 1.0)


def test_surface_observed_on_one_row_is_singular():
    t1, t2 = np.linspace(0, 1, 6), np.linspace(0, 1, 6)
    mask = np.zeros((6, 6), bool)
    mask[2, :] = True
    s = FunctionalSample((t1, t2), np.where(mask, 1.0, np.nan), mask)
    with pytest.raises(SingularSystemError):
        smooth_sample(s, make_basis_2d((0, 1), (0, 1), (5, 5)), (1.0, 1.0))


def test_grid_outside_basis_domain():
    s = FunctionalSample.from_array(np.ones(5), np.linspace(0, 2, 5))
    with pytest.raises(DomainError):
        smooth_sample(s, make_basis(0, 1, 6), 1.0)


def test_nonpositive_lambda_rejected():
    with pytest.raises(InvalidArgumentError):
        smooth_sample(FunctionalSample.from_array(np.sin(T), T), make_basis(0, 1, 8), 0.0)


def test_sample_validation():
    with pytest.raises(InvalidArgumentError):
        FunctionalSample((T,), np.full(T.size, np.inf), np.ones(T.size, bool))
    with pytest.raises(InvalidArgumentError):
        FunctionalSample.from_array(np.ones(3), [0.0, 0.5, 0.4])
    s = FunctionalSample.from_array(np.where(T < 0.5, T, np.nan), T)
    assert s.n_observed == int(np.sum(T < 0.5)) and not s.is_complete


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(1e-4, 1e4), keep=st.floats(0.3, 1.0))
def test_row_deletion_equivalence_over_random_masks(seed, lam, keep):
    r = np.random.default_rng(seed)
    b = make_basis(0, 1, 10)
    y = r.normal(size=T.size)
    mask = r.uniform(size=T.size) < keep
    if mask.sum() < 4:
        mask[:4] = True
    got = smooth_sample(FunctionalSample((T,), np.where(mask, y, np.nan), mask), b, lam).coeffs
    want = reduced_solution(eval_design(b, T), mask, y, penalty_1d(10, lam))
    np.testing.assert_allclose(got, want, atol=1e-10 * max(1.0, np.abs(want).max()))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_batched_route_is_mask_independent(seed):
    r = np.random.default_rng(seed)
    b = make_basis(0, 1, 10)
    y = r.normal(size=T.size)
    mask = r.uniform(size=T.size) < 0.6
    mask[:3] = True
    noise = np.where(mask, y, r.normal(size=T.size) * 100)
    a = smooth_samples([FunctionalSample((T,), np.where(mask, y, np.nan), mask)], b)[0]
    c = smooth_samples([FunctionalSample((T,), noise, mask)], b)[0]
    np.testing.assert_array_equal(a.coeffs, c.coeffs)
