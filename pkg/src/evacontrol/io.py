"""Plain-text mesh files, VTK legacy snapshots and CSV tables."""

from pathlib import Path

import numpy as np

from .mesh import EXIT, WALL, MeshError, TriMesh

_TAGS = {"exit": EXIT, "wall": WALL}
_NAMES = {EXIT: "exit", WALL: "wall"}


def write_mesh(path, mesh: TriMesh):
    """Write ``evacmesh 1`` format; indices are 0-based."""
    lines = ["evacmesh 1", f"vertices {mesh.n_vertices}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    lines.append(f"boundary {len(mesh.bface_tags)}")
    lines += [f"{a} {b} {_NAMES[int(t)]}" for (a, b), t in zip(mesh.bface_vertices.tolist(), mesh.bface_tags)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> TriMesh:
    """Read an ``evacmesh 1`` file; raises :class:`MeshError` with the line number on bad input."""
    raw = Path(path).read_text().splitlines()
    rows = [(i + 1, ln.split()) for i, ln in enumerate(raw) if ln.strip() and not ln.lstrip().startswith("#")]
    pos = 0

    def take(expected):
        nonlocal pos
        if pos >= len(rows):
            raise MeshError(f"{path}: unexpected end of file, expected '{expected}'")
        lineno, tok = rows[pos]
        pos += 1
        return lineno, tok

    lineno, tok = take("evacmesh 1")
    if tok != ["evacmesh", "1"]:
        raise MeshError(f"{path}:{lineno}: expected header 'evacmesh 1'")

    def section(name, width, conv):
        lineno, tok = take(f"{name} <count>")
        if len(tok) != 2 or tok[0] != name or not tok[1].isdigit():
            raise MeshError(f"{path}:{lineno}: expected '{name} <count>'")
        out = []
        for _ in range(int(tok[1])):
            lineno, tok = take(f"{width} values")
            if len(tok) != width:
                raise MeshError(f"{path}:{lineno}: expected {width} values in section '{name}'")
            try:
                out.append([c(t) for c, t in zip(conv, tok)])
            except (ValueError, KeyError) as exc:
                raise MeshError(f"{path}:{lineno}: cannot parse {tok}: {exc}") from exc
        return out

    verts = section("vertices", 2, (float, float))
    tris = section("triangles", 3, (int, int, int))
    bnd = section("boundary", 3, (int, int, lambda s: _TAGS[s]))
    if pos != len(rows):
        raise MeshError(f"{path}:{rows[pos][0]}: trailing content")
    bnd = np.array(bnd, dtype=np.int64).reshape(-1, 3)
    return TriMesh(np.array(verts), np.array(tris), bnd[:, :2], bnd[:, 2])


def write_vtk(path, mesh: TriMesh, cell_data=None, point_data=None, title="evacontrol"):
    """VTK legacy ASCII unstructured grid with scalar cell and point data."""
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {mesh.n_vertices} double"]
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    nt = mesh.n_triangles
    out.append(f"CELLS {nt} {4 * nt}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    out.append(f"CELL_TYPES {nt}")
    out += ["5"] * nt
    for header, data, size in (("CELL_DATA", cell_data, nt), ("POINT_DATA", point_data, mesh.n_vertices)):
        if not data:
            continue
        out.append(f"{header} {size}")
        for name, values in data.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (size,):
                raise ValueError(f"{name}: expected {size} values, got {values.shape}")
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [repr(v) for v in values.tolist()]
    Path(path).write_text("\n".join(out) + "\n")


def write_table(path, columns: dict, sep=","):
    """Table with a header row; float columns use repr for exact round-trip."""
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("table columns differ in length")
    lines = [sep.join(names)]
    for r in range(n):
        lines.append(sep.join(str(int(c[r])) if np.issubdtype(c.dtype, np.integer) else repr(float(c[r]))
                              for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> dict:
    """Read a comma- or whitespace-separated table written by :func:`write_table`."""
    lines = Path(path).read_text().split("\n")
    sep = "," if "," in lines[0] else None
    names = [n.strip() for n in lines[0].split(sep)]
    data = np.array([[float(v) for v in ln.split(sep)] for ln in lines[1:] if ln.strip()]).reshape(-1, len(names))
    return {n: data[:, i] for i, n in enumerate(names)}


def control_columns(u, c):
    """Columns ``k``, ``Ag_ux_i``, ``Ag_uy_i``, ``Ag_int_i`` for a control grid."""
    cols = {"k": np.arange(u.shape[0])}
    for i in range(u.shape[1]):
        cols[f"Ag_ux_{i}"] = u[:, i, 0]
        cols[f"Ag_uy_{i}"] = u[:, i, 1]
    for i in range(u.shape[1]):
        cols[f"Ag_int_{i}"] = c[:, i]
    return cols


def read_controls(path):
    """Inverse of writing :func:`control_columns`; returns ``(u, c)``."""
    tab = read_table(path)
    M = sum(1 for k in tab if k.startswith("Ag_int_"))
    if M == 0:
        n = len(tab["k"])
        return np.zeros((n, 0, 2)), np.zeros((n, 0))
    u = np.stack([np.stack([tab[f"Ag_ux_{i}"], tab[f"Ag_uy_{i}"]], axis=1) for i in range(M)], axis=1)
    c = np.stack([tab[f"Ag_int_{i}"] for i in range(M)], axis=1)
    return u, c
