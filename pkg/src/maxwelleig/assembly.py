"""Lowest-order edge-element assembly on tet meshes.

Edge degrees of freedom are unscaled tangential line integrals, oriented
from the lower to the higher global vertex id.  With that convention the
discrete gradient has entries exactly +-1 and prolongation weights are
rational.  Dirichlet conditions (tangential trace zero for fields, zero
trace for potentials) are imposed by deleting boundary rows/columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError
from .mesh import _LOCAL_EDGES

# 4-point tet quadrature, exact for polynomials of degree 2.
_QA = 0.5854101966249685
_QB = 0.13819660112501053
_QPOINTS = np.array(
    [
        [_QA, _QB, _QB, _QB],
        [_QB, _QA, _QB, _QB],
        [_QB, _QB, _QA, _QB],
        [_QB, _QB, _QB, _QA],
    ]
)


def tet_geometry(mesh):
    """Barycentric gradients (nt, 4, 3) and volumes of every tet."""
    x = mesh.vertices[mesh.tets]
    jac = x[:, 1:] - x[:, :1]
    inv = np.linalg.inv(jac)
    grads = np.empty((mesh.n_tets, 4, 3))
    grads[:, 1:] = np.swapaxes(inv, 1, 2)
    grads[:, 0] = -grads[:, 1:].sum(axis=1)
    return grads, mesh.volumes


def local_matrices(mesh):
    """Per-tet 6x6 curl-curl and mass matrices in local edge order,
    with the global orientation signs already applied."""
    grads, vols = tet_geometry(mesh)
    scale = np.ptp(mesh.vertices, axis=0).max()
    bad = vols <= 1e-14 * scale**3
    if np.any(bad):
        raise AssemblyError(f"degenerate tet {int(np.flatnonzero(bad)[0])}")

    curls = np.empty((mesh.n_tets, 6, 3))
    for e, (i, j) in enumerate(_LOCAL_EDGES):
        curls[:, e] = 2.0 * np.cross(grads[:, i], grads[:, j])
    a_loc = np.einsum("tec,tfc,t->tef", curls, curls, vols)

    # values of the six edge functions at the quadrature points
    w = np.empty((mesh.n_tets, 4, 6, 3))
    for e, (i, j) in enumerate(_LOCAL_EDGES):
        for q, lam in enumerate(_QPOINTS):
            w[:, q, e] = lam[i] * grads[:, j] - lam[j] * grads[:, i]
    m_loc = np.einsum("tqec,tqfc,t->tef", w, w, vols / 4.0)

    signs = mesh.tet_edge_signs.astype(np.float64)
    ss = signs[:, :, None] * signs[:, None, :]
    return a_loc * ss, m_loc * ss


def _scatter(mesh, loc):
    rows = np.repeat(mesh.tet_edges, 6, axis=1).ravel()
    cols = np.tile(mesh.tet_edges, (1, 6)).ravel()
    mat = sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(mesh.n_edges, mesh.n_edges))
    return mat.tocsr()


def assemble_full(mesh):
    """Curl-curl and mass matrices over all edges, boundary included."""
    a_loc, m_loc = local_matrices(mesh)
    return _scatter(mesh, a_loc), _scatter(mesh, m_loc)


def discrete_gradient_full(mesh):
    """Edge-by-node incidence: (G p) on edge (a, b) is p_b - p_a."""
    ne = mesh.n_edges
    rows = np.repeat(np.arange(ne), 2)
    cols = mesh.edges.ravel()
    vals = np.tile(np.array([-1.0, 1.0]), ne)
    return sp.coo_matrix((vals, (rows, cols)), shape=(ne, mesh.n_vertices)).tocsr()


@dataclass
class LevelOperators:
    """Assembled operators of one mesh level, boundary DOFs eliminated.

    A: curl-curl stiffness; M: mass; G: discrete gradient (interior edges
    by interior nodes); P: prolongation from the previous level's interior
    edges, or None on the coarsest level.
    """

    mesh: object
    A: sp.csr_matrix
    M: sp.csr_matrix
    G: sp.csr_matrix
    interior_edges: np.ndarray
    interior_nodes: np.ndarray
    edge_pos: np.ndarray
    node_pos: np.ndarray
    P: sp.csr_matrix | None = None

    @property
    def n_dofs(self):
        return len(self.interior_edges)

    def expand(self, u):
        """Interior coefficient vector -> full edge vector (zero trace)."""
        full = np.zeros(self.mesh.n_edges)
        full[self.interior_edges] = u
        return full

    def restrict(self, full):
        return np.asarray(full)[self.interior_edges]


def assemble(mesh):
    """Assemble a mesh level; exact quadrature, Dirichlet rows removed."""
    a_full, m_full = assemble_full(mesh)
    ie = mesh.interior_edge_ids()
    inn = mesh.interior_node_ids()
    edge_pos = np.full(mesh.n_edges, -1, dtype=np.int64)
    edge_pos[ie] = np.arange(len(ie))
    node_pos = np.full(mesh.n_vertices, -1, dtype=np.int64)
    node_pos[inn] = np.arange(len(inn))

    a = a_full[ie][:, ie].tocsr()
    m = m_full[ie][:, ie].tocsr()

    pairs = mesh.edges[ie]
    rows, cols, vals = [], [], []
    for sign, endpoint in ((-1.0, 0), (1.0, 1)):
        nd = pairs[:, endpoint]
        keep = node_pos[nd] >= 0
        rows.append(np.flatnonzero(keep))
        cols.append(node_pos[nd[keep]])
        vals.append(np.full(keep.sum(), sign))
    g = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(ie), len(inn)),
    ).tocsr()

    return LevelOperators(
        mesh=mesh,
        A=a,
        M=m,
        G=g,
        interior_edges=ie,
        interior_nodes=inn,
        edge_pos=edge_pos,
        node_pos=node_pos,
    )


def energy_inner(ops, lam, x, y):
    """Shifted inner product x^T (A - lam M) y."""
    return float(x @ (ops.A @ y) - lam * (x @ (ops.M @ y)))


# ---------------------------------------------------------------------------
# inter-level transfer
# ---------------------------------------------------------------------------

def edge_prolongation(hierarchy, level, ops_coarse, ops_fine):
    """Inclusion of the level-(l-1) edge space into the level-l one.

    The coefficient of a coarse field on a fine edge is its tangential line
    integral along that edge, evaluated inside the coarse tet the edge
    descends from; the integrand is linear so the midpoint value is exact.
    """
    if not 1 <= level <= hierarchy.depth:
        raise ValueError(f"level {level} out of range 1..{hierarchy.depth}")
    fine = hierarchy.levels[level]
    coarse = hierarchy.levels[level - 1]

    grads, _ = tet_geometry(coarse)
    k_of_edge = fine.parent_tets[fine.edge_first_tet]
    p = fine.vertices[fine.edges[:, 0]]
    q = fine.vertices[fine.edges[:, 1]]
    mid = 0.5 * (p + q)
    d = q - p

    x0 = coarse.vertices[coarse.tets[k_of_edge, 0]]
    gk = grads[k_of_edge]
    lam = np.empty((fine.n_edges, 4))
    lam[:, 1:] = np.einsum("nic,nc->ni", gk[:, 1:], mid - x0)
    lam[:, 0] = 1.0 - lam[:, 1:].sum(axis=1)
    gd = np.einsum("nic,nc->ni", gk, d)

    weights = np.empty((fine.n_edges, 6))
    for e, (i, j) in enumerate(_LOCAL_EDGES):
        weights[:, e] = lam[:, i] * gd[:, j] - lam[:, j] * gd[:, i]
    weights *= coarse.tet_edge_signs[k_of_edge]

    rows = np.repeat(np.arange(fine.n_edges), 6)
    cols = coarse.tet_edges[k_of_edge].ravel()
    vals = weights.ravel()

    rpos = ops_fine.edge_pos[rows]
    cpos = ops_coarse.edge_pos[cols]
    keep = (rpos >= 0) & (cpos >= 0) & (np.abs(vals) > 1e-13)
    mat = sp.coo_matrix(
        (vals[keep], (rpos[keep], cpos[keep])),
        shape=(ops_fine.n_dofs, ops_coarse.n_dofs),
    )
    mat.sum_duplicates()
    return mat.tocsr()


def nodal_prolongation(hierarchy, level, ops_coarse, ops_fine):
    """Piecewise-linear interpolation between nodal spaces: surviving nodes
    keep their value, bisection midpoints average their edge endpoints
    (chained when a midpoint's parents are themselves new)."""
    if not 1 <= level <= hierarchy.depth:
        raise ValueError(f"level {level} out of range 1..{hierarchy.depth}")
    fine = hierarchy.levels[level]
    coarse = hierarchy.levels[level - 1]
    nv_old = coarse.n_vertices

    combos = {}

    def weights_of(v):
        if v < nv_old:
            return {v: 1.0}
        return combos[v]

    for k, (a, b) in enumerate(fine.vertex_parents):
        out = {}
        for parent in (int(a), int(b)):
            for node, w in weights_of(parent).items():
                out[node] = out.get(node, 0.0) + 0.5 * w
        combos[nv_old + k] = out

    rows, cols, vals = [], [], []
    for v in ops_fine.interior_nodes:
        r = ops_fine.node_pos[v]
        for node, w in weights_of(int(v)).items():
            c = ops_coarse.node_pos[node]
            if c >= 0:
                rows.append(r)
                cols.append(c)
                vals.append(w)
    return sp.coo_matrix(
        (vals, (rows, cols)),
        shape=(len(ops_fine.interior_nodes), len(ops_coarse.interior_nodes)),
    ).tocsr()


def build_level_operators(hierarchy):
    """Assemble every level of a hierarchy, prolongations attached."""
    ops = [assemble(hierarchy.levels[0])]
    for l in range(1, hierarchy.depth + 1):
        cur = assemble(hierarchy.levels[l])
        cur.P = edge_prolongation(hierarchy, l, ops[-1], cur)
        ops.append(cur)
    return ops


def extend_level_operators(ops, hierarchy):
    """Assemble only the newly appended finest level."""
    if len(ops) != hierarchy.depth:
        raise ValueError("operator list does not match hierarchy depth")
    cur = assemble(hierarchy.finest)
    cur.P = edge_prolongation(hierarchy, hierarchy.depth, ops[-1], cur)
    ops.append(cur)
    return ops


def export_matrix_market(ops, directory, prefix="level"):
    """Dump A, M, G in Matrix Market coordinate format for cross-checking."""
    import pathlib

    from scipy.io import mmwrite

    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, mat in (("A", ops.A), ("M", ops.M), ("G", ops.G)):
        path = directory / f"{prefix}_{name}.mtx"
        mmwrite(path, mat)
        paths[name] = path
    return paths
