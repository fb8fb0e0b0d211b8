import numpy as np
import pytest
from scipy import integrate

from conftest import two_triangle_mesh
from evacontrol.io import read_mesh, write_mesh
from evacontrol.mesh import (EXIT, WALL, Exit, MeshError, Mollifier, RoomSpec, TriMesh, cfl_max_tau,
                             compute_geometry, generate_room, project_p0, triangle_rule)


def room(h=0.75, **kw):
    return generate_room(RoomSpec(8.0, 6.0, h, exits=[Exit("east", 2.0, 4.0)], **kw))


def test_room_covers_rectangle():
    m = room()
    g = compute_geometry(m)
    assert np.all(g.area > 0)
    assert g.area.sum() == pytest.approx(48.0, rel=1e-13)
    # every interior face has two cells, boundary length adds up to the perimeter
    assert m.bface_lengths.sum() == pytest.approx(28.0, rel=1e-13)
    exit_len = m.bface_lengths[m.bface_tags == EXIT].sum()
    assert 1.0 <= exit_len <= 3.0


def test_walls_are_cut_out():
    m = generate_room(RoomSpec(8.0, 6.0, 0.5, exits=[Exit("east", 2.0, 4.0)], walls=[(3.0, 0.0, 4.0, 2.0)]))
    # cells are removed by centroid, so the cut follows the lattice
    area = compute_geometry(m).area.sum()
    assert 45.0 < area < 47.0
    assert area == pytest.approx(48.0 - 2.0, abs=0.5)


def test_geometry_of_single_right_triangle():
    """Legs 3 and 4: area 6, inradius 1, circumcenter at the hypotenuse midpoint."""
    v = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
    m = TriMesh(v, np.array([[0, 1, 2]]), np.array([[0, 1], [1, 2], [2, 0]]), np.array([EXIT, WALL, WALL]))
    g = compute_geometry(m)
    assert g.area[0] == pytest.approx(6.0)
    assert g.inradius[0] == pytest.approx(1.0)
    assert g.diameter[0] == pytest.approx(5.0)
    np.testing.assert_allclose(g.circumcenter[0], [1.5, 2.0])
    assert g.kappa == pytest.approx(5.0)
    assert cfl_max_tau(g) == pytest.approx(np.pi / 75.0 * 5.0)
    # hat gradients sum to zero and reproduce a linear function
    np.testing.assert_allclose(g.basis_gradients[0].sum(axis=0), 0.0, atol=1e-15)
    lin = v @ np.array([2.0, -1.0])
    np.testing.assert_allclose(lin @ g.basis_gradients[0], [2.0, -1.0])


def test_transmissibility_is_inverse_circumcenter_distance():
    m = two_triangle_mesh()
    g = compute_geometry(m)
    d = np.linalg.norm(g.circumcenter[0] - g.circumcenter[1])
    assert g.transmissibility == pytest.approx([1.0 / d])


def test_cocircular_neighbours_rejected():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    m = TriMesh(v, np.array([[0, 1, 2], [0, 2, 3]]), np.array([[0, 1], [1, 2], [2, 3], [3, 0]]),
                np.array([EXIT, WALL, WALL, WALL]))
    with pytest.raises(MeshError, match="circumcenters"):
        compute_geometry(m)


def test_triangle_rule_degree():
    # mean over the reference triangle of x^a y^b is 2 a! b! / (a + b + 2)!
    bary, w = triangle_rule(3, level=1)
    assert w.sum() == pytest.approx(1.0)
    x, y = bary[:, 1], bary[:, 2]
    assert (w * x**2 * y**2).sum() == pytest.approx(2 * 2 * 2 / 720, rel=1e-13)
    bary, w = triangle_rule(4)
    x, y = bary[:, 1], bary[:, 2]
    assert (w * x**2 * y**4).sum() == pytest.approx(2 * 2 * 24 / 40320, rel=1e-13)


def test_project_p0_matches_dblquad():
    m = two_triangle_mesh()

    def f(p):
        return 0.3 + 0.2 * np.sin(p[:, 0] * 2.0) * np.exp(-p[:, 1])

    avg = project_p0(m, f)
    for t in range(2):
        a, b, c = m.vertices[m.triangles[t]]

        def integrand(s, r):
            x = a + r * (b - a) + s * (c - a)
            return f(x[None])[0]

        val, _ = integrate.dblquad(integrand, 0, 1, 0, lambda r: 1 - r, epsabs=1e-13, epsrel=1e-13)
        assert avg[t] == pytest.approx(val * 2.0, rel=1e-10)


def test_project_p0_clamps_with_warning(caplog):
    m = two_triangle_mesh()
    out = project_p0(m, lambda p: np.full(len(p), 1.5))
    assert np.all(out == 1.0)
    assert "clamping" in caplog.text


def test_mollifier_constant_and_gradient():
    m = room(0.5)
    g = compute_geometry(m)
    mol = Mollifier(m, g, 1e-2)
    one = np.ones(m.n_triangles)
    val, grad, cells, w = mol.eval_cells(one, [3.1, 2.7])
    assert val == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)
    assert w.sum() == pytest.approx(1.0)

    rho = np.sin(g.centroid[:, 0]) * np.cos(g.centroid[:, 1]) * 0.5 + 0.5
    x0 = np.array([3.1, 2.7])
    _, grad, _, _ = mol.eval_cells(rho, x0)
    h = 1e-6
    fd = [(mol.eval_cells(rho, x0 + h * e)[0] - mol.eval_cells(rho, x0 - h * e)[0]) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


def test_mollifier_reproduces_linear_nodal_field():
    m = room(0.5)
    g = compute_geometry(m)
    mol = Mollifier(m, g, 1e-2)
    phi = m.vertices @ np.array([0.7, -0.2]) + 1.0
    val, grad = mol.eval_nodes(phi, [4.0, 3.0])
    assert val == pytest.approx(0.7 * 4.0 - 0.2 * 3.0 + 1.0, abs=1e-6)
    np.testing.assert_allclose(grad, [0.7, -0.2], atol=1e-5)


def test_mollifier_outside_domain():
    m = room()
    mol = Mollifier(m, compute_geometry(m), 1e-2)
    with pytest.raises(ValueError, match="outside"):
        mol.eval_cells(np.ones(m.n_triangles), [50.0, 50.0])


def test_mesh_file_round_trip(tmp_path):
    m = room()
    p = tmp_path / "room.mesh"
    write_mesh(p, m)
    m2 = read_mesh(p)
    np.testing.assert_array_equal(m2.vertices, m.vertices)
    np.testing.assert_array_equal(m2.triangles, m.triangles)
    np.testing.assert_array_equal(m2.bface_tags, m.bface_tags)


def test_mesh_file_errors_name_the_line(tmp_path):
    p = tmp_path / "bad.mesh"
    p.write_text("evacmesh 1\nvertices 2\n0 0\n1\n")
    with pytest.raises(MeshError, match=":4:"):
        read_mesh(p)
    p.write_text("mesh 2\n")
    with pytest.raises(MeshError, match="header"):
        read_mesh(p)
