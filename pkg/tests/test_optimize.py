import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evacontrol.adjoint import control_inner, h1_inner
from evacontrol.checks import ball_kkt_residual, box_kkt_residual
from evacontrol.forward import ControlGrid
from evacontrol.optimize import (armijo_search, project_c, project_controls, project_u, projected_gradient,
                                 stationarity)
from oracles import ball_oracle, box_oracle, metric

N, T = 50, 1.0
TAU = T / N


def test_intensity_projection_matches_dense_oracle(rng):
    for _ in range(20):
        c = rng.uniform(-0.8, 1.8, (N + 1, 1)) + np.sin(np.linspace(0, 6, N + 1))[:, None]
        d, rep = project_c(c, TAU)
        ref = box_oracle(c[:, 0], TAU)
        assert np.sqrt(h1_inner(d[:, 0] - ref, d[:, 0] - ref, TAU)) <= 1e-8
        assert box_kkt_residual(c, d, TAU) <= 1e-10


def test_direction_projection_matches_dense_oracle(rng):
    for _ in range(20):
        u = 1.5 * rng.standard_normal((N + 1, 1, 2))
        w, rep = project_u(u, TAU)
        ref = ball_oracle(u[:, 0], TAU)
        assert np.sqrt(h1_inner(w[:, 0] - ref, w[:, 0] - ref, TAU)) <= 1e-8
        assert ball_kkt_residual(u, w, rep.multipliers, TAU) <= 1e-10


def test_projections_are_idempotent(rng):
    u = 2.0 * rng.standard_normal((N + 1, 3, 2))
    c = rng.uniform(-1, 2, (N + 1, 3))
    w, _ = project_u(u, TAU)
    d, _ = project_c(c, TAU)
    assert np.abs(project_u(w, TAU)[0] - w).max() <= 1e-10
    assert np.abs(project_c(d, TAU)[0] - d).max() <= 1e-10


def test_feasible_input_is_unchanged(rng):
    u = rng.uniform(-0.5, 0.5, (N + 1, 2, 2))
    c = rng.uniform(0.1, 0.9, (N + 1, 2))
    np.testing.assert_allclose(project_u(u, TAU)[0], u, atol=1e-12)
    np.testing.assert_allclose(project_c(c, TAU)[0], c, atol=1e-12)


def test_large_inputs_still_converge(rng):
    """Inputs of the size produced by a gradient step on the presets."""
    u = 1e4 * rng.standard_normal((301, 2, 2))
    w, _ = project_u(u, 0.03)
    assert np.linalg.norm(w, axis=2).max() <= 1 + 1e-12


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (11, 1, 2), elements=st.floats(-5, 5)),
       arrays(np.float64, (11, 1), elements=st.floats(-3, 3)))
def test_projection_properties(u, c):
    w, _ = project_u(u, 0.1)
    d, _ = project_c(c, 0.1)
    assert np.linalg.norm(w, axis=2).max() <= 1 + 1e-12
    assert d.min() >= 0.0 and d.max() <= 1.0
    # variational inequality against feasible points
    A = metric(11, 0.1)
    for z in (np.zeros_like(d), np.ones_like(d), np.full_like(d, 0.5)):
        assert float((A @ (c - d)[:, 0]) @ (z - d)[:, 0]) <= 1e-8


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        project_u(np.full((3, 1, 2), np.nan), 0.1)


class QuadraticProblem:
    """j(q) = 1/2 ||q - target||^2 in the H^1,tau control norm; its gradient is q - target."""

    def __init__(self, target):
        self.target = target

    def value(self, q):
        d = q.axpy(-1.0, self.target)
        return 0.5 * control_inner(d, d)

    def gradient(self, q):
        class Rep:
            pass
        rep = Rep()
        rep.grad = q.axpy(-1.0, self.target)
        return rep


def test_projected_gradient_on_quadratic(rng):
    n = 21
    target = ControlGrid(2 * rng.standard_normal((n, 2, 2)), rng.uniform(-1, 2, (n, 2)), 2.0)
    q0 = ControlGrid.constant(n - 1, np.zeros((2, 2)), np.full(2, 0.5), 2.0)
    res = projected_gradient(QuadraticProblem(target), q0, max_iter=100, tol=1e-8)
    assert res.success
    assert np.all(np.diff(res.objective) <= 0)
    expected, _ = project_controls(target)
    np.testing.assert_allclose(res.controls.u, expected.u, atol=1e-7)
    np.testing.assert_allclose(res.controls.c, expected.c, atol=1e-7)


def test_stationarity_vanishes_at_constrained_minimum(rng):
    target = ControlGrid(3 * rng.standard_normal((11, 1, 2)), rng.uniform(-1, 2, (11, 1)), 1.0)
    q, _ = project_controls(target)
    g = q.axpy(-1.0, target)
    assert stationarity(q, g) <= 1e-9


def test_armijo_backtracks_and_treats_failures_as_infinite():
    target = ControlGrid(np.full((5, 1, 2), 0.2), np.full((5, 1), 0.3), 1.0)
    prob = QuadraticProblem(target)
    q = ControlGrid(np.zeros((5, 1, 2)), np.zeros((5, 1)), 1.0)
    g = prob.gradient(q).grad
    calls = []

    def flaky(z):
        calls.append(1)
        if len(calls) == 1:
            raise ValueError("solver failure")
        return prob.value(z)

    res = armijo_search(q, g, prob.value(q), flaky, s0=1.0)
    assert res.success and res.step == 0.5 and res.evaluations == 2
    with pytest.raises(ValueError):
        armijo_search(q, g, 0.0, flaky, s0=-1.0)


def test_armijo_reports_failure():
    q = ControlGrid(np.zeros((3, 1, 2)), np.full((3, 1), 0.5), 1.0)
    g = ControlGrid(np.zeros((3, 1, 2)), np.ones((3, 1)), 1.0)
    res = armijo_search(q, g, 0.0, lambda z: 1.0, s0=1.0, s_min=1e-3)
    assert not res.success and res.trial is None


def test_projection_is_non_expansive(rng):
    for _ in range(5):
        a, b = 1.5 * rng.standard_normal((2, N + 1, 1, 2))
        pa, _ = project_u(a, TAU)
        pb, _ = project_u(b, TAU)
        d_in, d_out = a[:, 0] - b[:, 0], pa[:, 0] - pb[:, 0]
        assert h1_inner(d_out, d_out, TAU) <= h1_inner(d_in, d_in, TAU) * (1 + 1e-10)


def test_constant_controls_project_pointwise():
    w, _ = project_u(np.tile([2.0, 0.0], (N + 1, 1, 1)), TAU)
    np.testing.assert_allclose(w, np.tile([1.0, 0.0], (N + 1, 1, 1)), atol=1e-12)
    d, _ = project_c(np.full((N + 1, 1), 2.0), TAU)
    np.testing.assert_allclose(d, 1.0, atol=1e-12)


def test_armijo_fails_along_ascent_direction():
    target = ControlGrid(np.full((5, 1, 2), 0.2), np.full((5, 1), 0.3), 1.0)
    prob = QuadraticProblem(target)
    q = ControlGrid(np.zeros((5, 1, 2)), np.zeros((5, 1)) + 0.1, 1.0)
    ascent = prob.gradient(q).grad.axpy(-2.0, prob.gradient(q).grad)
    res = armijo_search(q, ascent, prob.value(q), prob.value, s0=1.0, s_min=1e-6)
    assert not res.success


def test_stationary_start_takes_no_steps(rng):
    target = ControlGrid(0.3 * rng.standard_normal((11, 1, 2)), rng.uniform(0.2, 0.8, (11, 1)), 1.0)
    res = projected_gradient(QuadraticProblem(target), target, max_iter=10, tol=1e-8)
    assert res.success and res.iterations == 0 and res.objective == [0.0]
