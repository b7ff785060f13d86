"""Tetrahedral meshes, bisection refinement and nested hierarchies.

Meshes are immutable after construction.  Refinement uses tagged-simplex
bisection: every tet carries an ordered vertex tuple whose first/last
entries span the refinement edge, plus a cyclic type in {0, 1, 2}.  The
two children of ``(x0, x1, x2, x3)`` with type ``g`` are::

    (x0, z, x1, x2)                       type (g + 1) % 3
    (x3, z, x2, x1) if g == 0             type (g + 1) % 3
    (x3, z, x1, x2) if g in (1, 2)

with ``z`` the midpoint of ``(x0, x3)``.  Seeded from box cells split into
six tets around the cell diagonal (Kuhn subdivision, diagonal = longest
edge), this scheme keeps the number of similarity classes finite and lets
conformity closure terminate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    HierarchyError,
    MeshError,
    MeshFormatError,
    RefinementError,
)

_LOCAL_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
_LOCAL_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))

_KEY_SHIFT = np.int64(1) << np.int64(32)


def _edge_keys(pairs):
    """Encode sorted vertex pairs as int64 keys (stable across levels)."""
    pairs = np.asarray(pairs, dtype=np.int64)
    return pairs[:, 0] * _KEY_SHIFT + pairs[:, 1]


@dataclass(frozen=True)
class DomainSpec:
    """Descriptor for a built-in domain generator.

    kind: "box" with extents (a, b, c) and cell counts (nx, ny, nz), or
    "fichera" (cube of side `a` with the upper-corner octant removed,
    `nx` cells per half side).
    """

    kind: str
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    nx: int = 1
    ny: int = 1
    nz: int = 1

    def describe(self):
        if self.kind == "box":
            return f"box({self.a:g},{self.b:g},{self.c:g},{self.nx},{self.ny},{self.nz})"
        return f"fichera({self.a:g},{self.nx})"


class TetMesh:
    """Conforming tetrahedral mesh with derived edge/face connectivity.

    Vertex ids of a refined mesh extend its input mesh's ids: original
    vertices keep their ids, midpoints are appended.
    """

    def __init__(self, vertices, tagged, types, parent_tets=None, vertex_parents=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        tagged = np.ascontiguousarray(tagged, dtype=np.int64)
        if tagged.ndim != 2 or tagged.shape[1] != 4:
            raise MeshError("tets must be quadruples of vertex ids")
        self.tagged = tagged
        self.types = np.ascontiguousarray(types, dtype=np.int8)
        self.parent_tets = None if parent_tets is None else np.asarray(parent_tets, dtype=np.int64)
        if vertex_parents is None:
            vertex_parents = np.empty((0, 2), dtype=np.int64)
        self.vertex_parents = np.asarray(vertex_parents, dtype=np.int64).reshape(-1, 2)

        # positively oriented copy used for all geometry/assembly
        vols6 = self._signed_volumes6(tagged)
        if np.any(vols6 == 0.0):
            raise MeshError(f"degenerate tet {int(np.flatnonzero(vols6 == 0.0)[0])}")
        tets = tagged.copy()
        flip = vols6 < 0.0
        tets[flip, 1], tets[flip, 2] = tagged[flip, 2], tagged[flip, 1]
        self.tets = tets
        self.volumes = np.abs(vols6) / 6.0

        self._build_connectivity()

    # -- construction helpers -------------------------------------------------

    def _signed_volumes6(self, tets):
        x = self.vertices[tets]
        return np.linalg.det(x[:, 1:] - x[:, :1])

    def _build_connectivity(self):
        nt = len(self.tets)
        nv = len(self.vertices)

        pairs = self.tets[:, _LOCAL_EDGES].reshape(-1, 2)
        lo = pairs.min(axis=1)
        hi = pairs.max(axis=1)
        keys = lo * _KEY_SHIFT + hi
        self.edge_keys, inverse = np.unique(keys, return_inverse=True)
        self.tet_edges = inverse.reshape(nt, 6).astype(np.int64)
        self.edges = np.column_stack(
            [self.edge_keys // _KEY_SHIFT, self.edge_keys % _KEY_SHIFT]
        )
        self.tet_edge_signs = np.where(pairs[:, 0] < pairs[:, 1], 1, -1).reshape(nt, 6).astype(np.int8)

        tris = np.sort(self.tets[:, _LOCAL_FACES].reshape(-1, 3), axis=1).astype(np.int64)
        fkeys = (tris[:, 0] * nv + tris[:, 1]) * nv + tris[:, 2]
        self.face_keys, finv, fcounts = np.unique(fkeys, return_inverse=True, return_counts=True)
        if fcounts.max(initial=0) > 2:
            raise MeshError("non-conforming mesh: a face is shared by more than two tets")
        nf = len(self.face_keys)
        self.faces = np.empty((nf, 3), dtype=np.int64)
        self.faces[:, 2] = self.face_keys % nv
        rest = self.face_keys // nv
        self.faces[:, 1] = rest % nv
        self.faces[:, 0] = rest // nv
        self.tet_faces = finv.reshape(nt, 4)
        # adjacency: one or two tets per face
        self.face_tets = np.full((nf, 2), -1, dtype=np.int64)
        tet_of_row = np.repeat(np.arange(nt, dtype=np.int64), 4)
        order = np.argsort(finv, kind="stable")
        sorted_faces = finv[order]
        sorted_tets = tet_of_row[order]
        first = np.searchsorted(sorted_faces, np.arange(nf))
        self.face_tets[:, 0] = sorted_tets[first]
        second = fcounts == 2
        self.face_tets[second, 1] = sorted_tets[first[second] + 1]

        self.boundary_faces = fcounts == 1
        self.boundary_vertices = np.zeros(nv, dtype=bool)
        self.boundary_vertices[self.faces[self.boundary_faces].ravel()] = True
        bface_pairs = self.faces[self.boundary_faces][:, [(0, 1), (0, 2), (1, 2)]].reshape(-1, 2)
        self.boundary_edges = np.zeros(len(self.edges), dtype=bool)
        if len(bface_pairs):
            bkeys = _edge_keys(np.sort(bface_pairs, axis=1))
            self.boundary_edges[np.searchsorted(self.edge_keys, np.unique(bkeys))] = True

        # one adjacent tet per edge, deterministic (highest tet id wins)
        self.edge_first_tet = np.empty(len(self.edges), dtype=np.int64)
        self.edge_first_tet[self.tet_edges.ravel()] = np.repeat(np.arange(nt, dtype=np.int64), 6)

    # -- basic queries ---------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def refinement_edges(self):
        """Global edge id of each tet's refinement edge."""
        pairs = np.sort(self.tagged[:, [0, 3]], axis=1)
        return np.searchsorted(self.edge_keys, _edge_keys(pairs))

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.linalg.norm(d, axis=1)

    def edge_id(self, a, b):
        key = _edge_keys(np.array([[min(a, b), max(a, b)]], dtype=np.int64))[0]
        idx = np.searchsorted(self.edge_keys, key)
        if idx >= len(self.edge_keys) or self.edge_keys[idx] != key:
            raise KeyError(f"no edge ({a},{b})")
        return int(idx)

    def interior_edge_ids(self):
        return np.flatnonzero(~self.boundary_edges)

    def interior_node_ids(self):
        return np.flatnonzero(~self.boundary_vertices)


def min_dihedral_angle(mesh):
    """Smallest dihedral angle over all tets, in radians (shape proxy)."""
    x = mesh.vertices[mesh.tets]
    normals = []
    for (i, j, k) in _LOCAL_FACES:
        n = np.cross(x[:, j] - x[:, i], x[:, k] - x[:, i])
        normals.append(n / np.linalg.norm(n, axis=1, keepdims=True))
    worst = np.pi
    # faces sharing an edge: local faces are indexed by their opposite vertex
    for a in range(4):
        for b in range(a + 1, 4):
            cosang = np.einsum("ij,ij->i", normals[a], normals[b])
            ang = np.pi - np.arccos(np.clip(cosang, -1.0, 1.0))
            worst = min(worst, float(ang.min()))
    return worst


# ---------------------------------------------------------------------------
# domain generators
# ---------------------------------------------------------------------------

def _kuhn_cells(cell_ids, vertex_id):
    """Six tagged tets per hexahedral cell, all sharing the cell diagonal.

    cell_ids: (n, 3) integer cell coordinates; vertex_id(i, j, k) maps grid
    coordinates to vertex ids.  The tagged order walks the cell from its
    lexicographically smallest corner to the opposite one, so the refinement
    edge is the cell diagonal.
    """
    import itertools

    tagged = []
    for (i, j, k) in cell_ids:
        for perm in itertools.permutations(range(3)):
            corner = np.array([i, j, k], dtype=np.int64)
            chain = [corner.copy()]
            for axis in perm:
                corner = corner.copy()
                corner[axis] += 1
                chain.append(corner)
            tagged.append([vertex_id(*c) for c in chain])
    return np.array(tagged, dtype=np.int64)


def box_mesh(a, b, c, nx, ny, nz):
    """Conforming tet mesh of the box (0,a)x(0,b)x(0,c), 6 tets per cell."""
    if min(a, b, c) <= 0:
        raise ConfigurationError("box extents must be positive")
    if min(nx, ny, nz) < 1:
        raise ConfigurationError("box subdivision counts must be >= 1")
    xs = np.linspace(0.0, a, nx + 1)
    ys = np.linspace(0.0, b, ny + 1)
    zs = np.linspace(0.0, c, nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    cells = np.array(
        [(i, j, k) for i in range(nx) for j in range(ny) for k in range(nz)],
        dtype=np.int64,
    )
    tagged = _kuhn_cells(cells, vid)
    return TetMesh(vertices, tagged, np.zeros(len(tagged), dtype=np.int8))


def fichera_mesh(side, n):
    """Cube (0,side)^3 with the octant nearest (side,side,side) removed.

    n is the number of cells per half side; the grid has 2n cells per axis
    and the n^3 cells in the removed octant are skipped.
    """
    if side <= 0:
        raise ConfigurationError("fichera side must be positive")
    if n < 1:
        raise ConfigurationError("fichera subdivision count must be >= 1")
    m = 2 * n
    xs = np.linspace(0.0, side, m + 1)
    X, Y, Z = np.meshgrid(xs, xs, xs, indexing="ij")
    grid_vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def gid(i, j, k):
        return (i * (m + 1) + j) * (m + 1) + k

    cells = np.array(
        [
            (i, j, k)
            for i in range(m)
            for j in range(m)
            for k in range(m)
            if not (i >= n and j >= n and k >= n)
        ],
        dtype=np.int64,
    )
    tagged = _kuhn_cells(cells, gid)
    used = np.unique(tagged)
    remap = np.full(len(grid_vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TetMesh(grid_vertices[used], remap[tagged], np.zeros(len(tagged), dtype=np.int8))


def generate_domain(spec):
    """Build the mesh described by a DomainSpec."""
    if spec.kind == "box":
        return box_mesh(spec.a, spec.b, spec.c, spec.nx, spec.ny, spec.nz)
    if spec.kind == "fichera":
        return fichera_mesh(spec.a, spec.nx)
    raise ConfigurationError(f"unknown domain kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# bisection
# ---------------------------------------------------------------------------

def bisect(mesh, marked, closure_bound_factor=100):
    """Bisect the marked tets plus whatever closure needs, conformingly.

    Returns a new mesh nested in the input; its ``parent_tets`` maps every
    output tet to the input tet it descends from, and ``vertex_parents``
    records the endpoints of the edge each new vertex bisected.
    """
    marked = sorted(set(int(t) for t in marked))
    if marked and (marked[0] < 0 or marked[-1] >= mesh.n_tets):
        raise ValueError("marked set contains invalid tet ids")
    if not marked:
        return TetMesh(
            mesh.vertices,
            mesh.tagged,
            mesh.types,
            parent_tets=np.arange(mesh.n_tets, dtype=np.int64),
        )

    tagged = [tuple(int(v) for v in row) for row in mesh.tagged]
    types = list(mesh.types)
    alive = [True] * len(tagged)
    ancestor = list(range(len(tagged)))
    coords = [tuple(p) for p in mesh.vertices]
    new_coords = []
    vertex_parents = []
    nv = mesh.n_vertices

    edge2tets = {}
    for t, row in enumerate(tagged):
        for (i, j) in _LOCAL_EDGES:
            a, b = row[i], row[j]
            key = (a, b) if a < b else (b, a)
            edge2tets.setdefault(key, set()).add(t)

    midpoint = {}
    budget = closure_bound_factor * max(mesh.n_tets, 1)
    work = 0

    def ref_pair(t):
        a, b = tagged[t][0], tagged[t][3]
        return (a, b) if a < b else (b, a)

    def split(t, z):
        x0, x1, x2, x3 = tagged[t]
        g = types[t]
        if g == 0:
            children = ((x0, z, x1, x2), (x3, z, x2, x1))
        else:
            children = ((x0, z, x1, x2), (x3, z, x1, x2))
        alive[t] = False
        for (i, j) in _LOCAL_EDGES:
            a, b = tagged[t][i], tagged[t][j]
            key = (a, b) if a < b else (b, a)
            edge2tets[key].discard(t)
        child_type = (g + 1) % 3
        for child in children:
            cid = len(tagged)
            tagged.append(child)
            types.append(child_type)
            alive.append(True)
            ancestor.append(ancestor[t])
            for (i, j) in _LOCAL_EDGES:
                a, b = child[i], child[j]
                key = (a, b) if a < b else (b, a)
                edge2tets.setdefault(key, set()).add(cid)

    def refine(t0):
        nonlocal nv, work
        stack = [t0]
        while stack:
            work += 1
            if work > budget:
                raise RefinementError(
                    f"closure work exceeded {budget} operations; "
                    "initial tagging is likely incompatible"
                )
            t = stack[-1]
            if not alive[t]:
                stack.pop()
                continue
            key = ref_pair(t)
            patch = edge2tets[key]
            bad = sorted(s for s in patch if ref_pair(s) != key)
            if bad:
                stack.extend(bad)
                continue
            z = midpoint.get(key)
            if z is None:
                z = nv
                nv += 1
                midpoint[key] = z
                pa, pb = key
                ca = coords[pa] if pa < mesh.n_vertices else new_coords[pa - mesh.n_vertices]
                cb = coords[pb] if pb < mesh.n_vertices else new_coords[pb - mesh.n_vertices]
                new_coords.append(tuple((ca[k] + cb[k]) * 0.5 for k in range(3)))
                vertex_parents.append(key)
            for s in sorted(patch):
                split(s, z)
            stack.pop()

    for t in marked:
        if alive[t]:
            refine(t)

    vertices = np.vstack([mesh.vertices, np.array(new_coords, dtype=np.float64).reshape(-1, 3)])
    keep = [i for i, a in enumerate(alive) if a]
    return TetMesh(
        vertices,
        np.array([tagged[i] for i in keep], dtype=np.int64),
        np.array([types[i] for i in keep], dtype=np.int8),
        parent_tets=np.array([ancestor[i] for i in keep], dtype=np.int64),
        vertex_parents=np.array(vertex_parents, dtype=np.int64).reshape(-1, 2),
    )


def uniform_refine(mesh, rounds=1):
    """Bisect every tet, `rounds` times (three rounds halve the mesh size)."""
    for _ in range(rounds):
        mesh = bisect(mesh, range(mesh.n_tets))
    return mesh


# ---------------------------------------------------------------------------
# hierarchy
# ---------------------------------------------------------------------------

def _support_volumes(mesh):
    """Per-edge and per-vertex total volume of adjacent tets."""
    vol_e = np.zeros(mesh.n_edges)
    np.add.at(vol_e, mesh.tet_edges.ravel(), np.repeat(mesh.volumes, 6))
    vol_v = np.zeros(mesh.n_vertices)
    np.add.at(vol_v, mesh.tets.ravel(), np.repeat(mesh.volumes, 4))
    return vol_e, vol_v


@dataclass
class MeshHierarchy:
    """Nested sequence of meshes plus the per-level local smoothing sets.

    ``smoothing_edges[l]`` holds the level-l edge ids that are new or whose
    basis-function support (union of adjacent tets) shrank relative to level
    l-1; level 0 contains every edge by convention.  ``smoothing_nodes`` is
    the nodal analogue.
    """

    levels: list = field(default_factory=list)
    smoothing_edges: list = field(default_factory=list)
    smoothing_nodes: list = field(default_factory=list)

    @classmethod
    def from_coarse(cls, mesh):
        return cls(
            levels=[mesh],
            smoothing_edges=[np.arange(mesh.n_edges)],
            smoothing_nodes=[np.arange(mesh.n_vertices)],
        )

    @property
    def finest(self):
        return self.levels[-1]

    @property
    def depth(self):
        """Index of the finest level."""
        return len(self.levels) - 1

    def extended(self, refined):
        """Hierarchy with `refined` appended (levels are shared, not copied)."""
        prev = self.finest
        if refined.parent_tets is None or len(refined.parent_tets) != refined.n_tets:
            raise HierarchyError("refined mesh carries no parent map")
        if refined.n_vertices < prev.n_vertices or not np.array_equal(
            refined.vertices[: prev.n_vertices], prev.vertices
        ):
            raise HierarchyError("refined mesh does not extend the finest level's vertices")
        if refined.parent_tets.min(initial=0) < 0 or refined.parent_tets.max(initial=-1) >= prev.n_tets:
            raise HierarchyError("parent map points outside the finest level")
        self._check_nested(prev, refined)

        prev_vol_e, prev_vol_v = _support_volumes(prev)
        new_vol_e, new_vol_v = _support_volumes(refined)

        pos = np.searchsorted(prev.edge_keys, refined.edge_keys)
        pos_clipped = np.minimum(pos, len(prev.edge_keys) - 1)
        survives = prev.edge_keys[pos_clipped] == refined.edge_keys
        changed = np.zeros(refined.n_edges, dtype=bool)
        changed[~survives] = True
        old = pos_clipped[survives]
        changed[survives] = np.abs(new_vol_e[survives] - prev_vol_e[old]) > 1e-12 * prev_vol_e[old]
        edges_l = np.flatnonzero(changed)

        nodes_changed = np.zeros(refined.n_vertices, dtype=bool)
        nodes_changed[prev.n_vertices :] = True
        surv = slice(0, prev.n_vertices)
        nodes_changed[surv] |= np.abs(new_vol_v[surv] - prev_vol_v) > 1e-12 * np.maximum(prev_vol_v, 1e-300)
        nodes_l = np.flatnonzero(nodes_changed)

        return MeshHierarchy(
            levels=self.levels + [refined],
            smoothing_edges=self.smoothing_edges + [edges_l],
            smoothing_nodes=self.smoothing_nodes + [nodes_l],
        )

    @staticmethod
    def _check_nested(prev, refined, rtol=1e-10):
        x0 = prev.vertices[prev.tets[refined.parent_tets, 0]]
        jac = (
            prev.vertices[prev.tets[refined.parent_tets, 1:]]
            - x0[:, None, :]
        )
        pts = refined.vertices[refined.tets] - x0[:, None, :]
        lam = np.linalg.solve(np.swapaxes(jac, 1, 2), np.swapaxes(pts, 1, 2))
        scale = np.abs(lam).max()
        ok = (lam.min() > -rtol * max(scale, 1.0)) and (
            lam.sum(axis=1).max() < 1.0 + rtol * max(scale, 1.0)
        )
        if not ok:
            raise HierarchyError("refined mesh is not nested in the finest level")


# ---------------------------------------------------------------------------
# plain-text mesh format
# ---------------------------------------------------------------------------

def write_mesh(mesh, path):
    """Write the plain-text format: header, vertices, tets."""
    with open(path, "w") as fh:
        fh.write("tetmesh 1\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        fh.write(f"tets {mesh.n_tets}\n")
        for row in mesh.tets:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def read_mesh(path):
    """Read the plain-text format; refinement edges are re-derived as the
    longest edge of each tet (ties broken by smallest global edge id)."""
    with open(path) as fh:
        lines = fh.read().splitlines()

    def expect(idx, what):
        if idx >= len(lines):
            raise MeshFormatError(f"unexpected end of file, expected {what}", line=idx + 1)
        return lines[idx]

    if expect(0, "header").strip() != "tetmesh 1":
        raise MeshFormatError("expected header 'tetmesh 1'", line=1)
    head = expect(1, "vertex count").split()
    if len(head) != 2 or head[0] != "vertices":
        raise MeshFormatError("expected 'vertices N'", line=2)
    nv = int(head[1])
    vertices = np.empty((nv, 3))
    for i in range(nv):
        parts = expect(2 + i, "vertex coordinates").split()
        if len(parts) != 3:
            raise MeshFormatError("expected 3 coordinates", line=3 + i)
        try:
            vertices[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise MeshFormatError(str(exc), line=3 + i) from None
    base = 2 + nv
    head = expect(base, "tet count").split()
    if len(head) != 2 or head[0] != "tets":
        raise MeshFormatError("expected 'tets M'", line=base + 1)
    nt = int(head[1])
    tets = np.empty((nt, 4), dtype=np.int64)
    for i in range(nt):
        parts = expect(base + 1 + i, "tet vertex ids").split()
        if len(parts) != 4:
            raise MeshFormatError("expected 4 vertex ids", line=base + 2 + i)
        try:
            tets[i] = [int(p) for p in parts]
        except ValueError as exc:
            raise MeshFormatError(str(exc), line=base + 2 + i) from None
        if tets[i].min() < 0 or tets[i].max() >= nv:
            raise MeshFormatError("vertex id out of range", line=base + 2 + i)

    return _retag_longest_edge(vertices, tets)


def _retag_longest_edge(vertices, tets):
    """Build a mesh whose refinement edges are the longest edge per tet."""
    probe = TetMesh(vertices, tets, np.zeros(len(tets), dtype=np.int8))
    lengths = probe.edge_lengths()
    tagged = np.empty_like(probe.tets)
    for t in range(probe.n_tets):
        eids = probe.tet_edges[t]
        # longest edge, ties by smallest global edge id
        best = min(range(6), key=lambda k: (-lengths[eids[k]], eids[k]))
        i, j = _LOCAL_EDGES[best]
        quad = probe.tets[t]
        rest = [v for k, v in enumerate(quad) if k not in (i, j)]
        a, b = int(quad[i]), int(quad[j])
        if a > b:
            a, b = b, a
        tagged[t] = [a, rest[0], rest[1], b]
    return TetMesh(vertices, tagged, np.zeros(len(tets), dtype=np.int8))
