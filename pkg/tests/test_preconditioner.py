import numpy as np
import pytest
import scipy.linalg as sla

from maxwelleig import MeshHierarchy, bisect, box_mesh, fichera_mesh
from maxwelleig.assembly import assemble, build_level_operators, extend_level_operators
from maxwelleig.eigensolver import coarse_eigensolve
from maxwelleig.errors import ShiftTooLargeError
from maxwelleig.preconditioner import (
    CoarseCache,
    MultilevelPreconditioner,
    PrecondConfig,
    measure_contraction,
    verify_error_identity,
)
from maxwelleig.projection import ProjectionContext


def setup(mesh, rounds=0, marked=None, rng=None):
    h = MeshHierarchy.from_coarse(mesh)
    cur = mesh
    rng = np.random.default_rng(42) if rng is None else rng
    for _ in range(rounds):
        sel = range(cur.n_tets) if marked is None else rng.choice(
            cur.n_tets, size=max(1, cur.n_tets // 3), replace=False
        )
        cur = bisect(cur, sel)
        h = h.extended(cur)
    ops = build_level_operators(h)
    ce = coarse_eigensolve(ops[0])
    cfg = PrecondConfig(coarse_lambda=ce.lam1, coarse_vec=ce.u1)
    ctx = ProjectionContext(ops, h)
    return h, ops, cfg, ce, ctx


class TestBuild:
    def test_zero_shift_diagonals_positive(self):
        h, ops, cfg, ce, _ = setup(box_mesh(1, 1, 1, 2, 2, 2), rounds=2)
        pc = MultilevelPreconditioner(ops, h, cfg, 0.0)
        for l in range(1, pc.depth + 1):
            assert np.all(pc.diag[l] > 0)

    def test_target_shift_diagonals_positive(self):
        h, ops, cfg, ce, _ = setup(
            box_mesh(np.pi, 1.1 * np.pi, 1.2 * np.pi, 2, 2, 2), rounds=2
        )
        pc = MultilevelPreconditioner(ops, h, cfg, 1.5208907)
        for l in range(1, pc.depth + 1):
            assert np.all(pc.diag[l] > 0)

    def test_huge_shift_rejected(self):
        h, ops, cfg, ce, _ = setup(box_mesh(1, 1, 1, 2, 2, 2), rounds=1)
        with pytest.raises(ShiftTooLargeError):
            MultilevelPreconditioner(ops, h, cfg, 1e6)

    def test_gamma_range_enforced(self):
        with pytest.raises(ValueError):
            PrecondConfig(gamma=1.0)
        with pytest.raises(ValueError):
            PrecondConfig(gamma=0.0)
        with pytest.raises(ValueError):
            PrecondConfig(smoother="sor")


class TestApply:
    def test_depth_zero_is_deflated_coarse_solve(self):
        h, ops, cfg, ce, _ = setup(box_mesh(1, 1, 1, 2, 2, 2))
        lam = 0.5 * (ce.lam1 + ce.lam2)
        pc = MultilevelPreconditioner(ops, h, cfg, lam)
        rng = np.random.default_rng(0)
        g = rng.standard_normal(ops[0].n_dofs)
        x = pc.apply(g)
        cache = pc.coarse.cache
        # solution lies in the deflated subspace and solves the projected system
        assert np.allclose(cache.project(x), x, atol=1e-10)
        shifted = ops[0].A @ x - lam * (ops[0].M @ x)
        assert np.linalg.norm(cache.project_t(shifted - g)) <= 1e-9 * np.linalg.norm(g)

    def test_linearity(self):
        h, ops, cfg, ce, _ = setup(box_mesh(1, 1, 1, 2, 2, 2), rounds=2)
        pc = MultilevelPreconditioner(ops, h, cfg, 0.0)
        rng = np.random.default_rng(1)
        n = ops[-1].n_dofs
        g1, g2 = rng.standard_normal(n), rng.standard_normal(n)
        lhs = pc.apply(1.7 * g1 - 0.3 * g2)
        rhs = 1.7 * pc.apply(g1) - 0.3 * pc.apply(g2)
        scale = max(np.linalg.norm(lhs), 1.0)
        assert np.linalg.norm(lhs - rhs) <= 1e-12 * scale

    def test_corrections_local_to_smoothing_sets(self):
        h, ops, cfg, ce, _ = setup(fichera_mesh(1.0, 2), rounds=2, marked="adaptive")
        pc = MultilevelPreconditioner(ops, h, cfg, 0.0)
        rng = np.random.default_rng(2)
        for l in range(1, pc.depth + 1):
            rhat = rng.standard_normal(ops[l].n_dofs)
            c = pc._level_correction(l, rhat)
            outside = np.setdiff1d(np.arange(ops[l].n_dofs), pc.smooth_pos[l])
            assert np.all(c[outside] == 0.0)

    def test_error_contraction_monotone(self):
        h, ops, cfg, ce, ctx = setup(box_mesh(1, 1, 1, 2, 2, 2), rounds=1)
        pc = MultilevelPreconditioner(ops, h, cfg, 0.0)
        rng = np.random.default_rng(3)
        top = ops[-1]
        x_star = ctx.project_div_free(rng.standard_normal(top.n_dofs))
        ghat = top.A @ x_star  # lam = 0
        x = np.zeros_like(x_star)
        err = x_star - x

        def a_norm(v):
            return np.sqrt(max(float(v @ (top.A @ v)), 0.0))

        norms = [a_norm(err)]
        for _ in range(8):
            x = x + pc.apply(ghat - top.A @ x)
            norms.append(a_norm(x_star - x))
        for a, b in zip(norms, norms[1:]):
            assert b < a
        assert norms[-1] / norms[-2] < 1.0

    def test_adjoint_identity_small_mesh(self):
        # reverse sweep is the adjoint in the shifted inner product; at zero
        # shift the form is the curl-curl seminorm (positive on the range of
        # the divergence projector)
        h, ops, cfg, ce, _ = setup(box_mesh(1, 1, 1, 2, 2, 2), rounds=1)
        top = ops[-1]
        assert top.n_dofs <= 200
        pc = MultilevelPreconditioner(ops, h, cfg, 0.0)
        n = top.n_dofs
        a_mat = top.A.toarray()

        def error_op(v, reverse):
            return v - pc.apply(top.A @ v, reverse=reverse)

        rng = np.random.default_rng(4)
        for _ in range(20):
            v = rng.standard_normal(n)
            w = rng.standard_normal(n)
            lhs = error_op(v, reverse=False) @ (a_mat @ w)
            rhs = v @ (a_mat @ error_op(w, reverse=True))
            assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)

    def test_gauss_seidel_sweeps(self):
        h, ops, cfg, ce, ctx = setup(box_mesh(1, 1, 1, 2, 2, 2), rounds=2)
        cfg_gs = PrecondConfig(
            smoother="gauss_seidel", coarse_lambda=cfg.coarse_lambda, coarse_vec=cfg.coarse_vec
        )
        pc_j = MultilevelPreconditioner(ops, h, cfg, 0.0)
        pc_gs = MultilevelPreconditioner(ops, h, cfg_gs, 0.0)
        rng = np.random.default_rng(5)
        top = ops[-1]
        x_star = ctx.project_div_free(rng.standard_normal(top.n_dofs))
        ghat = top.A @ x_star

        def contraction(pc):
            x = np.zeros_like(x_star)
            before = np.sqrt(x_star @ (top.A @ x_star))
            for _ in range(5):
                x = x + pc.apply(ghat - top.A @ x)
            err = x_star - x
            return (np.sqrt(max(err @ (top.A @ err), 0.0)) / before) ** (1 / 5)

        assert contraction(pc_gs) <= contraction(pc_j) + 1e-12


class TestErrorIdentity:
    def test_depth_zero(self):
        h, ops, cfg, ce, _ = setup(box_mesh(1, 1, 1, 2, 2, 2))
        pc = MultilevelPreconditioner(ops, h, cfg, 0.0)
        assert verify_error_identity(pc)

    def test_two_level_cube(self):
        h, ops, cfg, ce, _ = setup(box_mesh(1, 1, 1, 2, 2, 2), rounds=1)
        pc = MultilevelPreconditioner(ops, h, cfg, 0.0)
        assert verify_error_identity(pc)

    def test_three_level_fichera_at_coarse_ritz(self):
        h, ops, cfg, ce, _ = setup(fichera_mesh(1.0, 1), rounds=2, marked="adaptive")
        pc = MultilevelPreconditioner(ops, h, cfg, ce.lam1)
        assert verify_error_identity(pc)

    def test_gauss_seidel_variant(self):
        h, ops, cfg, ce, _ = setup(box_mesh(1, 1, 1, 2, 2, 2), rounds=2)
        cfg_gs = PrecondConfig(
            smoother="gauss_seidel", coarse_lambda=cfg.coarse_lambda, coarse_vec=cfg.coarse_vec
        )
        pc = MultilevelPreconditioner(ops, h, cfg_gs, 0.0)
        assert verify_error_identity(pc)


class TestMeasureContraction:
    def _fixture(self):
        return setup(box_mesh(np.pi, 1.1 * np.pi, 1.2 * np.pi, 2, 2, 2), rounds=2)

    def test_identity_preconditioner_gives_one(self):
        h, ops, cfg, ce, ctx = self._fixture()
        lam = 0.5 * (ce.lam1 + ce.lam2)
        pc = MultilevelPreconditioner(ops, h, cfg, lam)
        u = ctx.project_div_free(np.ones(ops[-1].n_dofs))
        theta = measure_contraction(
            pc, ctx, u, n_samples=5, apply_fn=lambda g: np.zeros_like(g)
        )
        assert np.isclose(theta, 1.0, atol=1e-8)

    def test_exact_inverse_gives_zero(self):
        h, ops, cfg, ce, ctx = self._fixture()
        lam = 0.5 * (ce.lam1 + ce.lam2)
        pc = MultilevelPreconditioner(ops, h, cfg, lam)
        top = ops[-1]
        shifted = (top.A - lam * top.M).toarray()
        u = ctx.project_div_free(np.ones(top.n_dofs))
        theta = measure_contraction(
            pc, ctx, u, n_samples=5, apply_fn=lambda g: np.linalg.solve(shifted, g)
        )
        assert theta <= 1e-8

    def test_multilevel_contraction_below_one(self):
        h, ops, cfg, ce, ctx = self._fixture()
        # converged-shift regime: between the finest first and second values
        lam = ce.lam1
        pc = MultilevelPreconditioner(ops, h, cfg, lam)
        u = ctx.project_div_free(np.ones(ops[-1].n_dofs))
        theta = measure_contraction(pc, ctx, u, n_samples=8)
        assert 0.0 < theta < 1.0


def test_smoothing_work_proportional_to_fine_edges():
    rng = np.random.default_rng(9)
    mesh = fichera_mesh(1.0, 2)
    h = MeshHierarchy.from_coarse(mesh)
    cur = mesh
    for _ in range(5):
        cen = cur.vertices[cur.tets].mean(axis=1)
        d = np.linalg.norm(cen - 0.5, axis=1)
        marked = np.argsort(d)[: max(1, cur.n_tets // 4)]
        cur = bisect(cur, marked)
        h = h.extended(cur)
    ops = build_level_operators(h)
    ce = coarse_eigensolve(ops[0])
    cfg = PrecondConfig(coarse_lambda=ce.lam1, coarse_vec=ce.u1)
    pc = MultilevelPreconditioner(ops, h, cfg, 0.0)
    assert pc.smoothing_work() <= 4 * ops[-1].n_dofs
