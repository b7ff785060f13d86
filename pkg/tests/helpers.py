"""Brute-force geometric oracles shared by the test modules.

These deliberately avoid the package's own connectivity bookkeeping:
everything is recomputed from vertex coordinates and containment tests.
"""

import numpy as np


def barycentric(tet_coords, points):
    """Barycentric coordinates of points (n,3) wrt one tet (4,3)."""
    jac = (tet_coords[1:] - tet_coords[0]).T
    lam = np.linalg.solve(jac, (np.atleast_2d(points) - tet_coords[0]).T).T
    return np.column_stack([1.0 - lam.sum(axis=1), lam])


def point_in_tet(tet_coords, point, tol=1e-10):
    lam = barycentric(tet_coords, point)[0]
    return lam.min() >= -tol


def hanging_node_scan(mesh, tol=1e-9):
    """Vertices lying strictly inside a face or an edge of some tet.

    Returns a list of offending (vertex, tet) pairs; empty for a
    conforming simplicial complex.
    """
    bad = []
    verts = mesh.vertices
    scale = np.ptp(verts, axis=0).max()
    for t in range(mesh.n_tets):
        quad = set(int(v) for v in mesh.tets[t])
        coords = verts[mesh.tets[t]]
        for v in range(mesh.n_vertices):
            if v in quad:
                continue
            lam = barycentric(coords, verts[v])[0]
            # inside the closed tet but not a vertex => hangs on a face/edge
            if lam.min() >= -tol and np.abs(lam).max() <= 1 + tol:
                if not any(np.linalg.norm(verts[v] - c) < tol * scale for c in coords):
                    bad.append((v, t))
    return bad


def children_partition_parent(parent_mesh, child_mesh, tol=1e-12):
    """Check nestedness: each child lies in its parent and the children of
    each parent fill its volume."""
    sums = np.zeros(parent_mesh.n_tets)
    for c in range(child_mesh.n_tets):
        p = int(child_mesh.parent_tets[c])
        pc = parent_mesh.vertices[parent_mesh.tets[p]]
        for v in child_mesh.tets[c]:
            if not point_in_tet(pc, child_mesh.vertices[v], tol=1e-9):
                return False
        sums[p] += child_mesh.volumes[c]
    return bool(np.allclose(sums, parent_mesh.volumes, rtol=tol, atol=0))


def edge_support_changed(prev, new, pair):
    """Whether the union of tets adjacent to edge `pair` shrank, by explicit
    decomposition: collect the new adjacent tets grouped by ancestor and ask
    if they fill each old adjacent tet."""
    a, b = sorted(pair)
    old_adj = [t for t in range(prev.n_tets) if a in prev.tets[t] and b in prev.tets[t]]
    new_adj = [t for t in range(new.n_tets) if a in new.tets[t] and b in new.tets[t]]
    vol_by_ancestor = {}
    for t in new_adj:
        anc = int(new.parent_tets[t])
        vol_by_ancestor[anc] = vol_by_ancestor.get(anc, 0.0) + new.volumes[t]
    for t in old_adj:
        got = vol_by_ancestor.pop(t, 0.0)
        if abs(got - prev.volumes[t]) > 1e-12 * prev.volumes[t]:
            return True
    # any leftover ancestor not adjacent before would mean support grew,
    # which nested refinement cannot do
    assert not vol_by_ancestor
    return False


def node_support_changed(prev, new, v):
    old_adj = [t for t in range(prev.n_tets) if v in prev.tets[t]]
    new_adj = [t for t in range(new.n_tets) if v in new.tets[t]]
    vol_by_ancestor = {}
    for t in new_adj:
        anc = int(new.parent_tets[t])
        vol_by_ancestor[anc] = vol_by_ancestor.get(anc, 0.0) + new.volumes[t]
    for t in old_adj:
        got = vol_by_ancestor.pop(t, 0.0)
        if abs(got - prev.volumes[t]) > 1e-12 * prev.volumes[t]:
            return True
    assert not vol_by_ancestor
    return False
