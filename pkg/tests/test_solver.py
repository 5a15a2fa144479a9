"""Newton predictor solve, explicit Hessians, Neumann inverse-HVP."""

import math

import numpy as np
import pytest

from xrisk import autodiff as ad
from xrisk import solver as sv

from oracles import stratified_margin_sample


def _well_scaled_spd(rng, dim, lo, hi, spectral_norm=None):
    eigs = rng.uniform(lo, hi, size=dim)
    if spectral_norm is not None:
        eigs *= spectral_norm / eigs.max()
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q @ np.diag(eigs) @ q.T


def test_newton_matches_closed_form_axis_aligned():
    # margin mean 1, std 1 -> slope 2m/s^2 = 2
    features, labels = stratified_margin_sample(1.0, 1.0, 100_000, seed=0)
    result = sv.solve_optimal_predictor(features, labels)
    assert result.converged
    assert abs(float(result.w[0]) - 2.0) <= 1e-3


def test_newton_matches_closed_form_diagonal_features():
    # (a,b) = (1,1)/sqrt(2), mu_c = mu_i = 1: margin mean sqrt(2), std 1
    m = math.sqrt(2.0)
    features, labels = stratified_margin_sample(m, 1.0, 100_000, seed=1)
    result = sv.solve_optimal_predictor(features, labels)
    assert abs(float(result.w[0]) - 2.0 * m) <= 5e-3


def test_returned_gradient_norm_meets_tolerance():
    rng = np.random.default_rng(5)
    features = rng.normal(size=(400, 3))
    labels = np.where(rng.random(400) < 0.5, 1.0, -1.0)
    result = sv.solve_optimal_predictor(features, labels, tol=1e-8)
    assert result.converged
    assert result.grad_norm <= 1e-8
    # squared gradient norm doubles as the per-env penalty at the optimum
    assert result.grad_norm ** 2 <= 1e-16


def test_separable_sample_halts_without_divergence():
    features = np.array([[1.0], [2.0], [-1.0], [-2.0]])
    labels = np.array([1.0, 1.0, -1.0, -1.0])
    result = sv.solve_optimal_predictor(features, labels)
    assert np.all(np.isfinite(result.w))
    assert np.isfinite(result.grad_norm)
    assert float(np.linalg.norm(result.w)) <= 1e3 + 1e-9


def test_single_class_sample_rejected():
    features = np.ones((4, 2))
    labels = np.ones(4)
    with pytest.raises(sv.SingleClassError,
                       match="single-class group"):
        sv.solve_optimal_predictor(features, labels)


def test_hessian_matches_explicit_formula_at_origin():
    features = np.array([[1.0, 0.0], [0.0, 1.0]])
    labels = np.array([1.0, -1.0])
    op = sv.hessian_at(np.zeros(2), features, labels)
    # mean over the batch of sigma(0)(1-sigma(0)) z z^T = I/8
    np.testing.assert_allclose(op.matrix, 0.125 * np.eye(2), atol=1e-15)


def test_hessian_matches_explicit_formula_generic_point():
    rng = np.random.default_rng(3)
    features = rng.normal(size=(50, 2))
    labels = np.where(rng.random(50) < 0.5, 1.0, -1.0)
    w = np.array([0.4, -1.1])
    op = sv.hessian_at(w, features, labels)

    margins = labels * (features @ w)
    s = 1.0 / (1.0 + np.exp(-margins))
    expect = (features * (s * (1 - s))[:, None]).T @ features / 50
    np.testing.assert_allclose(op.matrix, expect, atol=1e-14)


def test_hessian_symmetric_and_psd_on_random_batches():
    rng = np.random.default_rng(8)
    for _ in range(5):
        features = rng.normal(size=(30, 3))
        labels = np.where(rng.random(30) < 0.5, 1.0, -1.0)
        w = rng.normal(size=3)
        op = sv.hessian_at(w, features, labels)
        assert float(np.max(np.abs(op.matrix - op.matrix.T))) == 0.0
        assert float(np.linalg.eigvalsh(op.matrix)[0]) >= -1e-12


def test_hessian_agrees_with_autodiff_hvp():
    rng = np.random.default_rng(11)
    features = rng.normal(size=(60, 3))
    labels = np.where(rng.random(60) < 0.5, 1.0, -1.0)
    w0 = rng.normal(size=3)
    op = sv.hessian_at(w0, features, labels)

    w = ad.leaf(w0)
    risk = ad.mean(ad.logistic_loss(
        ad.mul(ad.constant(labels), ad.matvec(ad.constant(features), w))))
    for k in range(3):
        basis = np.zeros(3)
        basis[k] = 1.0
        column = ad.hvp(risk, [w], [basis])[w].value
        denom = max(1.0, float(np.linalg.norm(op.matrix[:, k])))
        assert float(np.linalg.norm(column - op.matrix[:, k])) / denom <= 1e-8


def test_singular_hessian_gets_damped():
    # one-sample batch: rank-1 Hessian, smallest eigenvalue zero
    op = sv.hessian_at(np.zeros(2), np.array([[1.0, 0.0]]), np.array([1.0]))
    assert op.damping == pytest.approx(1e-4)
    ev = np.linalg.eigvalsh(op.effective_matrix())
    assert float(ev[0]) >= 1e-4 - 1e-12


def test_neumann_identity_hessian_is_exact():
    op = sv.HessianOperator(matrix=np.eye(3))
    cfg = sv.NeumannConfig(steps=3, scaling=1.0, damping=0.0)
    v = np.array([0.3, -2.0, 1.5])
    np.testing.assert_array_equal(sv.neumann_inv_hvp(op, v, cfg), v)


def test_neumann_geometric_series_is_binary_exact():
    op = sv.HessianOperator(matrix=0.5 * np.eye(2))
    cfg = sv.NeumannConfig(steps=10, scaling=1.0, damping=0.0)
    out = sv.neumann_inv_hvp(op, np.array([1.0, 0.0]), cfg)
    expect = sum(0.5 ** i for i in range(11))
    assert float(out[0]) == expect
    assert float(out[1]) == 0.0


def test_neumann_well_scaled_spd_matches_dense_solve():
    rng = np.random.default_rng(17)
    cfg = sv.NeumannConfig(steps=50, scaling=1.0, damping=0.0)
    for _ in range(5):
        h = _well_scaled_spd(rng, 5, 0.2, 1.0, spectral_norm=0.9)
        op = sv.HessianOperator(matrix=h)
        v = rng.standard_normal(5)
        approx = sv.neumann_inv_hvp(op, v, cfg)
        exact = np.linalg.solve(h, v)
        assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) <= 1e-2


def test_neumann_error_monotone_in_steps():
    rng = np.random.default_rng(23)
    h = _well_scaled_spd(rng, 5, 0.2, 1.0, spectral_norm=0.9)
    op = sv.HessianOperator(matrix=h)
    v = rng.standard_normal(5)
    exact = np.linalg.solve(h, v)
    errs = []
    for steps in (1, 2, 5, 10, 20, 40):
        cfg = sv.NeumannConfig(steps=steps, scaling=1.0, damping=0.0)
        errs.append(float(np.linalg.norm(sv.neumann_inv_hvp(op, v, cfg) - exact)))
    for prev, cur in zip(errs, errs[1:]):
        assert cur <= prev + 1e-15


def test_neumann_non_finite_intermediate_names_the_step():
    op = sv.HessianOperator(hvp=lambda v: v * -1e308)
    cfg = sv.NeumannConfig(steps=5, scaling=1.0, damping=0.0)
    with np.errstate(over="ignore"), \
            pytest.raises(sv.SolverError, match="Neumann step 2"):
        sv.neumann_inv_hvp(op, np.array([1.0, 1.0]), cfg)


def test_transfer_vector_identity_hessian_returns_gradient():
    op = sv.HessianOperator(matrix=np.eye(3))
    cfg = sv.NeumannConfig(steps=10, scaling=1.0, damping=0.0)
    g = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(sv.transfer_vector(op, g, cfg), g)


def test_transfer_vector_zero_gradient_is_zero():
    op = sv.HessianOperator(matrix=np.eye(3))
    np.testing.assert_array_equal(
        sv.transfer_vector(op, np.zeros(3), sv.NeumannConfig()), np.zeros(3))


def test_transfer_vector_neumann_tracks_dense_solve():
    rng = np.random.default_rng(29)
    cfg = sv.NeumannConfig(steps=10, damping=1e-4)
    for _ in range(5):
        # spectrum within 2x of the top keeps the 10-step series tight
        h = _well_scaled_spd(rng, 2, 0.5, 1.0)
        op = sv.HessianOperator(matrix=h)
        g = rng.standard_normal(2)
        approx = sv.transfer_vector(op, g, cfg)
        exact = sv.transfer_vector(op, g, cfg, exact=True)
        assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) <= 1e-2


def test_hessian_operator_validation():
    with pytest.raises(sv.SolverError):
        sv.HessianOperator(matrix=np.eye(2), hvp=lambda v: v)
    with pytest.raises(sv.SolverError):
        sv.HessianOperator()
    asym = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(sv.SolverError):
        sv.HessianOperator(matrix=asym)
    with pytest.raises(sv.SolverError):
        sv.HessianOperator(matrix=np.eye(2), damping=-1.0)
    with pytest.raises(sv.SolverError):
        sv.NeumannConfig(steps=0)


def test_exact_solve_applies_both_dampings():
    h = np.array([[2.0, 0.0], [0.0, 4.0]])
    op = sv.HessianOperator(matrix=h, damping=0.5)
    v = np.array([1.0, 1.0])
    out = op.solve(v, extra_damping=0.5)
    np.testing.assert_allclose(out, np.linalg.solve(h + np.eye(2), v), atol=1e-15)
