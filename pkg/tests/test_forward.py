import numpy as np
import pytest

from evacontrol.forward import (ControlGrid, Discretization, ForwardError, agent_step, assemble_advection,
                                forward_sweep, solve_eikonal, transport_step)
from evacontrol.linalg import check_m_matrix
from evacontrol.mesh import compute_geometry
from evacontrol.model import ModelParams, beta_cellwise, f_eval

from conftest import two_triangle_mesh
from oracles import eikonal_oracle, mirror_room


def test_eikonal_two_triangles_matches_dense_oracle():
    m = two_triangle_mesh()
    p = ModelParams()
    disc = Discretization(m, p, 1.0, 1)
    rho = np.array([0.2, 0.6])
    phi, info = solve_eikonal(disc, rho)
    ref, ref_res = eikonal_oracle(m.vertices, m.triangles, {0, 1}, rho, p.delta1, p.delta2)
    assert ref_res < 1e-13
    assert info.residual <= 1e-10
    np.testing.assert_allclose(phi, ref, atol=1e-12, rtol=0)


def test_eikonal_source_uses_density_rule():
    disc = Discretization(two_triangle_mesh(), ModelParams(), 1.0, 1)
    s, ds = disc.eikonal_source(np.array([0.25, 0.5]))
    np.testing.assert_allclose(s, 1.0 / (np.array([0.75, 0.5]) ** 2 + 0.1))
    h = 1e-6
    fd = (disc.eikonal_source(np.array([0.25 + h, 0.5 + h]))[0]
          - disc.eikonal_source(np.array([0.25 - h, 0.5 - h]))[0]) / (2 * h)
    np.testing.assert_allclose(ds, fd, rtol=1e-7)


def test_eikonal_mirror_symmetry():
    m, idx = mirror_room()
    g = compute_geometry(m)
    disc = Discretization(m, ModelParams(), 1.0, 1, geom=g)
    c = g.centroid
    rho = 0.6 * np.exp(-((c[:, 0] - 3.0) ** 2 + (c[:, 1] - 2.2) ** 2))
    phi, info = solve_eikonal(disc, rho)
    assert info.residual <= 1e-10
    np.testing.assert_allclose(phi, phi[idx], atol=1e-8)


def test_eikonal_warm_start_converges_quickly(check_scenario):
    sc = check_scenario
    phi, info = solve_eikonal(sc.disc, sc.rho0)
    phi2, info2 = solve_eikonal(sc.disc, sc.rho0, warm_start=phi)
    assert info2.iterations <= 1
    np.testing.assert_allclose(phi2, phi, atol=1e-10)
    # potential vanishes at exits and is positive inside
    assert np.all(phi[sc.mesh.dirichlet] == 0.0)
    assert np.all(phi[~sc.mesh.dirichlet] > 0.0)


def test_transport_conserves_mass_without_outflow(check_scenario, rng):
    sc = check_scenario
    d = sc.disc
    d0 = Discretization(d.mesh, d.params.replace(gamma=0.0), d.T, d.N, geom=d.geom)
    beta = rng.uniform(-1, 1, (d.mesh.n_triangles, 2))
    B = assemble_advection(d.mesh, d.geom, beta, 1.0)
    rho = sc.rho0.copy()
    m0 = d0.mass(rho)
    for _ in range(50):
        rho = transport_step(d0, rho, B)
    assert abs(d0.mass(rho) - m0) / m0 < 1e-12


def test_advection_fluxes_are_antisymmetric(check_scenario, rng):
    """Column sums of B vanish: what leaves one cell enters its neighbour."""
    d = check_scenario.disc
    B = assemble_advection(d.mesh, d.geom, rng.standard_normal((d.mesh.n_triangles, 2)), 0.7)
    np.testing.assert_allclose(np.asarray(B.sum(axis=0)).ravel(), 0.0, atol=1e-13)


def test_system_matrix_is_m_matrix(check_scenario):
    d = check_scenario.disc
    assert check_m_matrix(d.M + d.tau * d.A).is_m_matrix


def test_agent_step_solves_implicit_update(check_scenario):
    sc = check_scenario
    d = sc.disc
    u = np.array([[0.8, 0.1], [-0.3, 0.6]])
    x1 = agent_step(d, sc.x0, sc.rho0, u)
    for i in range(2):
        m, _, _, _ = d.mollifier.eval_cells(sc.rho0, x1[i])
        expected = sc.x0[i] + d.tau * d.params.v0 * f_eval(m)[0] * u[i]
        np.testing.assert_allclose(x1[i], expected, atol=1e-12)


def test_forward_sweep_invariants(check_scenario, check_traj):
    sc, tr = check_scenario, check_traj
    assert tr.rho.shape == (sc.disc.N + 1, sc.mesh.n_triangles)
    assert tr.x.shape == (sc.disc.N + 1, 2, 2)
    assert np.all(np.diff(tr.mass) <= 1e-14)           # outflow only
    assert tr.rho_min.min() >= -1e-10 and tr.rho_max.max() <= 1 + 1e-10
    assert tr.eikonal_residuals.max() <= 1e-10


def test_forward_sweep_is_deterministic(check_scenario, check_traj):
    sc = check_scenario
    again = forward_sweep(sc.disc, sc.controls, sc.rho0, sc.x0)
    assert np.array_equal(again.rho, check_traj.rho)
    assert np.array_equal(again.x, check_traj.x)


def test_forward_sweep_rejects_mismatched_controls(check_scenario):
    sc = check_scenario
    q = ControlGrid.constant(sc.disc.N - 1, np.zeros((2, 2)), np.zeros(2), sc.disc.T)
    with pytest.raises(ValueError, match="N="):
        forward_sweep(sc.disc, q, sc.rho0, sc.x0)


def test_agent_leaving_domain_raises_forward_error(check_scenario):
    sc = check_scenario
    q = ControlGrid.constant(sc.disc.N, np.full((2, 2), 0.5), np.zeros(2), sc.disc.T)
    with pytest.raises(ForwardError):
        forward_sweep(sc.disc, q, sc.rho0, np.array([[30.0, 30.0], [3.0, 3.0]]))


def test_control_grid_validation():
    with pytest.raises(ValueError):
        ControlGrid(np.zeros((3, 2, 2)), np.zeros((4, 2)), 1.0)
    q = ControlGrid.constant(4, np.ones((1, 2)), np.ones(1), 2.0)
    assert q.tau == 0.5 and q.N == 4
    np.testing.assert_allclose(q.axpy(2.0, q).u, 3.0)


def test_beta_points_down_the_potential(check_scenario):
    """Velocity -beta moves mass towards smaller phi, i.e. towards the exits."""
    sc = check_scenario
    d = sc.disc
    phi, _ = solve_eikonal(d, sc.rho0)
    bf = beta_cellwise(d.mesh, d.geom, sc.rho0, phi, np.zeros((0, 2)), np.zeros(0), d.params)
    G = np.einsum("tk,tkd->td", phi[d.mesh.triangles], d.geom.basis_gradients)
    assert np.all(np.sum(bf.beta * G, axis=1) >= 0.0)


def test_agents_move_freely_in_empty_room(check_scenario):
    sc = check_scenario
    d = sc.disc
    u = np.array([[0.8, 0.1], [-0.3, 0.6]])
    x1 = agent_step(d, sc.x0, np.zeros_like(sc.rho0), u)
    np.testing.assert_allclose(x1, sc.x0 + d.tau * d.params.v0 * u, atol=1e-12)


def test_agents_blocked_in_saturated_crowd(check_scenario):
    sc = check_scenario
    x1 = agent_step(sc.disc, sc.x0, np.ones_like(sc.rho0), np.array([[0.8, 0.1], [-0.3, 0.6]]))
    np.testing.assert_allclose(x1, sc.x0, atol=1e-12)
