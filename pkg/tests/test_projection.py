import numpy as np
import pytest
import scipy.linalg as sla

from maxwelleig import MeshHierarchy, bisect, box_mesh, fichera_mesh
from maxwelleig.assembly import build_level_operators
from maxwelleig.projection import ProjectionContext


def make_context(mesh, rounds=1, marked=None, **kwargs):
    h = MeshHierarchy.from_coarse(mesh)
    cur = mesh
    for _ in range(rounds):
        sel = range(cur.n_tets) if marked is None else marked
        cur = bisect(cur, sel)
        h = h.extended(cur)
    ops = build_level_operators(h)
    return h, ops, ProjectionContext(ops, h, **kwargs)


class TestProjector:
    def test_gradients_annihilated(self):
        rng = np.random.default_rng(0)
        _, ops, ctx = make_context(box_mesh(1, 1, 1, 2, 2, 2))
        top = ops[-1]
        q = rng.standard_normal(top.G.shape[1])
        u = top.G @ q
        u_proj = ctx.project_div_free(u)
        norm_m = np.sqrt(u @ (top.M @ u))
        assert np.sqrt(u_proj @ (top.M @ u_proj)) <= 1e-10 * norm_m

    def test_divergence_free_fixed_point(self):
        rng = np.random.default_rng(1)
        _, ops, ctx = make_context(box_mesh(1, 1, 1, 2, 2, 2))
        u = ctx.project_div_free(rng.standard_normal(ops[-1].n_dofs))
        again = ctx.project_div_free(u)
        assert np.linalg.norm(again - u) <= 1e-10 * np.linalg.norm(u)

    def test_residual_reduction_and_idempotence(self):
        rng = np.random.default_rng(2)
        _, ops, ctx = make_context(fichera_mesh(1.0, 1), rounds=2)
        u = rng.standard_normal(ops[-1].n_dofs)
        u1 = ctx.project_div_free(u)
        assert ctx.divergence_residual(u1) <= 1e-10 * ctx.divergence_residual(u)
        u2 = ctx.project_div_free(u1)
        assert np.linalg.norm(u2 - u1) <= 1e-10 * np.linalg.norm(u1)

    def test_b_orthogonality_of_removed_part(self):
        rng = np.random.default_rng(3)
        _, ops, ctx = make_context(box_mesh(1, 1, 1, 2, 2, 2))
        top = ops[-1]
        u = rng.standard_normal(top.n_dofs)
        u1 = ctx.project_div_free(u)
        removed = u - u1
        scale = np.sqrt(u @ (top.M @ u))
        for _ in range(10):
            w = ctx.project_div_free(rng.standard_normal(top.n_dofs))
            wn = np.sqrt(w @ (top.M @ w))
            assert abs(removed @ (top.M @ w)) <= 1e-10 * scale * wn

    def test_rayleigh_quotient_floor(self):
        rng = np.random.default_rng(4)
        _, ops, ctx = make_context(box_mesh(1, 1, 1, 2, 2, 2))
        top = ops[-1]
        w = sla.eigh(top.A.toarray(), top.M.toarray(), eigvals_only=True)
        lam1 = w[len(top.interior_nodes)]
        for _ in range(5):
            u = ctx.project_div_free(rng.standard_normal(top.n_dofs))
            rq = (u @ (top.A @ u)) / (u @ (top.M @ u))
            assert rq >= lam1 - 1e-8


class TestScalarSolve:
    def test_zero_rhs(self):
        _, _, ctx = make_context(box_mesh(1, 1, 1, 2, 2, 2))
        p = ctx.scalar_solve(np.zeros(ctx.n_nodes))
        assert np.all(p == 0.0)

    def test_recovers_known_solution(self):
        rng = np.random.default_rng(5)
        _, _, ctx = make_context(box_mesh(1, 1, 1, 2, 2, 2), rounds=2)
        q = rng.standard_normal(ctx.n_nodes)
        rhs = ctx.laplacians[-1] @ q
        p = ctx.scalar_solve(rhs)
        assert np.linalg.norm(p - q) <= 1e-8 * np.linalg.norm(q)

    def test_pcg_matches_direct(self):
        rng = np.random.default_rng(6)
        _, _, direct_ctx = make_context(box_mesh(1, 1, 1, 2, 2, 2), rounds=3)
        _, _, pcg_ctx = make_context(box_mesh(1, 1, 1, 2, 2, 2), rounds=3, direct_threshold=0)
        rhs = rng.standard_normal(pcg_ctx.n_nodes)
        pd = direct_ctx.scalar_solve(rhs)
        pp, info = pcg_ctx.scalar_solve_with_info(rhs)
        assert info.method == "pcg"
        assert np.linalg.norm(pd - pp) <= 1e-9 * np.linalg.norm(pd)

    def test_level_independent_iteration_counts(self):
        # the multilevel-preconditioned CG count must not grow with depth;
        # the first two refinements are warm-up so the baseline level is
        # past the handful-of-nodes regime
        rng = np.random.default_rng(7)
        cur = fichera_mesh(1.0, 2)
        h = MeshHierarchy.from_coarse(cur)
        for _ in range(2):
            cur = bisect(cur, range(cur.n_tets))
            h = h.extended(cur)
        counts = []
        for _ in range(5):
            cur = bisect(cur, range(cur.n_tets))
            h = h.extended(cur)
            ops = build_level_operators(h)
            ctx = ProjectionContext(ops, h, direct_threshold=0)
            rhs = rng.standard_normal(ctx.n_nodes)
            _, info = ctx.scalar_solve_with_info(rhs)
            counts.append(info.iterations)
        assert all(c <= 1.5 * counts[0] for c in counts[1:]), counts
