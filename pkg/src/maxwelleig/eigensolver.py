"""Outer eigeniteration: Davidson subspace expansion with multilevel
preconditioning and divergence projection, plus the coarse-level solver
that seeds it.

Vectors are coefficient arrays over interior edge DOFs; residuals are
passed around as covectors (functionals), i.e. (lam M - A) u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import NonConvergenceError, SolverError
from .preconditioner import CoarseCache, MultilevelPreconditioner


@dataclass
class SolveOptions:
    """Outer-iteration controls."""

    tol: float = 1e-8
    max_outer: int = 100
    restart: int = 20
    coarse_dense_threshold: int = 1500
    mass_direct_threshold: int = 2000

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.restart < 3:
            raise ValueError("restart dimension must be at least 3")


@dataclass
class EigenState:
    """Converged (or best-so-far) iterate of the outer iteration."""

    lam: float
    u: np.ndarray
    basis: np.ndarray
    residual_norm: float
    iterations: int


@dataclass
class IterationRecord:
    j: int
    lam: float
    residual: float
    correction_borth: float = float("nan")
    basis_div_residual: float = float("nan")


class MassSolver:
    """Solves M x = g; direct factorization on small levels, Jacobi-CG
    otherwise (the edge mass matrix is mesh-quality conditioned)."""

    def __init__(self, ops, tol=1e-12, direct_threshold=2000):
        self.ops = ops
        self.tol = tol
        n = ops.n_dofs
        self._lu = spla.splu(ops.M.tocsc()) if 0 < n <= direct_threshold else None
        self._inv_diag = None if self._lu is not None else 1.0 / ops.M.diagonal()

    def solve(self, g):
        if self.ops.n_dofs == 0:
            return np.zeros(0)
        if self._lu is not None:
            return self._lu.solve(g)
        m = self.ops.M
        nrm = np.linalg.norm(g)
        if nrm == 0.0:
            return np.zeros_like(g)
        cap = max(50, int(10 * math.sqrt(self.ops.n_dofs)))
        x = np.zeros_like(g)
        r = g.copy()
        z = self._inv_diag * r
        p = z.copy()
        rho = r @ z
        for _ in range(cap):
            q = m @ p
            alpha = rho / (p @ q)
            x += alpha * p
            r -= alpha * q
            if np.linalg.norm(r) <= self.tol * nrm:
                return x
            z = self._inv_diag * r
            rho_new = r @ z
            p = z + (rho_new / rho) * p
            rho = rho_new
        raise SolverError("mass solve failed to converge")

    def b_norm(self, ghat):
        """b-norm of the functional ghat: sqrt(ghat^T M^{-1} ghat)."""
        return math.sqrt(max(float(ghat @ self.solve(ghat)), 0.0))


def residual_covector(ops, lam, u, mass_solver):
    """Residual functional (lam M - A) u and its b-norm."""
    ghat = lam * (ops.M @ u) - ops.A @ u
    return ghat, mass_solver.b_norm(ghat)


def rayleigh_ritz(basis, a_mat, m_mat):
    """Smallest eigenpair of the pencil projected onto the basis columns."""
    basis = np.atleast_2d(basis)
    if basis.ndim != 2 or basis.shape[1] == 0:
        raise ValueError("rayleigh_ritz needs at least one basis vector")
    h = basis.T @ (a_mat @ basis)
    s = basis.T @ (m_mat @ basis)
    h = 0.5 * (h + h.T)
    s = 0.5 * (s + s.T)
    if np.abs(s - np.eye(s.shape[0])).max() < 1e-8:
        w, y = sla.eigh(h)
    else:
        w, y = sla.eigh(h, s)
    return float(w[0]), y[:, 0]


@dataclass
class CoarseEig:
    lam1: float
    u1: np.ndarray
    lam2: float
    iterations: int


def _fix_sign(u):
    i = int(np.argmax(np.abs(u)))
    return u if u[i] >= 0 else -u


def coarse_eigensolve(
    ops,
    proj_ctx=None,
    rng=None,
    dense_threshold=1500,
    check_simple=True,
    x0=None,
    max_iters=300,
):
    """Smallest nonzero eigenpair of (A, M) plus a second-eigenvalue estimate.

    Dense generalized solve below `dense_threshold` DOFs; otherwise block
    inverse iteration on (A + M)^{-1} M with every iterate projected
    divergence-free so the gradient kernel never pollutes the block.
    """
    n = ops.n_dofs
    if n < 2:
        raise SolverError("coarse level too small to resolve two eigenvalues")
    rng = np.random.default_rng(0) if rng is None else rng

    if n <= dense_threshold:
        w, v = sla.eigh(ops.A.toarray(), ops.M.toarray())
        k = len(ops.interior_nodes)
        if 0 < k < n and w[k - 1] < 1e-6 * max(w[k], 1e-300):
            idx = k
        else:
            thresh = 1e-10 * np.abs(w).max()
            idx = int(np.searchsorted(w, thresh))
        if idx + 1 >= n:
            raise SolverError("mesh resolves fewer than two nonzero eigenvalues")
        lam1, lam2 = float(w[idx]), float(w[idx + 1])
        u1 = _fix_sign(v[:, idx])
        if check_simple and (lam2 - lam1) <= 1e-8 * max(abs(lam1), 1e-300):
            raise SolverError(
                f"principal eigenvalue not simple: {lam1:.12g} vs {lam2:.12g}"
            )
        return CoarseEig(lam1, u1 / math.sqrt(u1 @ (ops.M @ u1)), lam2, 0)

    if proj_ctx is None:
        raise SolverError("iterative coarse solve needs a projection context")
    lu = spla.splu((ops.A + ops.M).tocsc())
    m = ops.M
    block = 3
    x = np.empty((n, block))
    x[:, 0] = rng.standard_normal(n) if x0 is None else np.asarray(x0, dtype=np.float64)
    for j in range(1, block):
        x[:, j] = rng.standard_normal(n)

    def project_block(x):
        for j in range(x.shape[1]):
            pre = np.linalg.norm(x[:, j])
            x[:, j] = proj_ctx.project_div_free(x[:, j])
            if np.linalg.norm(x[:, j]) < 1e-12 * max(pre, 1e-300):
                # start vector was (numerically) a pure gradient: re-seed
                x[:, j] = proj_ctx.project_div_free(rng.standard_normal(n))
        return x

    def orthonormalize(x):
        gram = x.T @ (m @ x)
        chol = sla.cholesky(gram, lower=True)
        return sla.solve_triangular(chol, x.T, lower=True).T

    x = orthonormalize(project_block(x))
    lam_prev = np.inf
    for it in range(1, max_iters + 1):
        x = lu.solve(m @ x)
        x = orthonormalize(project_block(x))
        h = x.T @ (ops.A @ x)
        w, q = sla.eigh(0.5 * (h + h.T))
        x = x @ q
        lam1 = float(w[0])
        if abs(lam1 - lam_prev) <= 1e-12 * max(abs(lam1), 1e-300) and it >= 3:
            break
        lam_prev = lam1
    else:
        raise SolverError("coarse inverse iteration did not settle")
    lam2 = float(w[1])
    u1 = _fix_sign(x[:, 0])
    if check_simple and (lam2 - lam1) <= 1e-8 * max(abs(lam1), 1e-300):
        raise SolverError(f"principal eigenvalue not simple: {lam1:.12g} vs {lam2:.12g}")
    return CoarseEig(lam1, u1 / math.sqrt(u1 @ (m @ u1)), lam2, it)


def davidson_solve(
    ops_list,
    hierarchy,
    proj_ctx,
    precond_cfg,
    opts,
    seed,
    rng=None,
    coarse_cache=None,
):
    """Outer iteration on the finest level of the hierarchy.

    seed: (lam, u) start, typically the previous level's eigenpair carried
    through the prolongation.  Returns the converged state and one record
    per outer iteration.
    """
    ops = ops_list[-1]
    a_mat, m_mat = ops.A, ops.M
    rng = np.random.default_rng(0) if rng is None else rng
    mass = MassSolver(ops, direct_threshold=opts.mass_direct_threshold)
    if coarse_cache is None:
        coarse_cache = CoarseCache(ops_list[0], precond_cfg)

    def b_norm(v):
        return math.sqrt(max(float(v @ (m_mat @ v)), 0.0))

    def rayleigh(v):
        return float(v @ (a_mat @ v)) / float(v @ (m_mat @ v))

    _, u0 = seed
    t = proj_ctx.project_div_free(np.asarray(u0, dtype=np.float64))
    nb = b_norm(t)
    if nb < 1e-14:
        t = proj_ctx.project_div_free(rng.standard_normal(ops.n_dofs))
        nb = b_norm(t)
    u = t / nb
    lam = rayleigh(u)
    basis = u[:, None]
    history = []

    for j in range(1, opts.max_outer + 1):
        ghat, rnorm = residual_covector(ops, lam, u, mass)
        record = IterationRecord(
            j=j,
            lam=lam,
            residual=rnorm,
            basis_div_residual=_basis_div_residual(proj_ctx, basis),
        )
        history.append(record)
        if rnorm < opts.tol:
            return EigenState(lam, u, basis, rnorm, j), history

        precond = MultilevelPreconditioner(
            ops_list, hierarchy, precond_cfg, precond_cfg.clamp(lam),
            coarse_cache=coarse_cache,
        )
        e = precond.apply(ghat)
        for _ in range(2):
            e = e - u * float(u @ (m_mat @ e))
        record.correction_borth = abs(float(u @ (m_mat @ e)))

        t = proj_ctx.project_div_free(e)
        scale = max(b_norm(e), 1e-300)
        t, nb = _b_orthogonalize(t, basis, m_mat)
        if nb < 1e-12 * scale:
            t = proj_ctx.project_div_free(rng.standard_normal(ops.n_dofs))
            t, nb = _b_orthogonalize(t, basis, m_mat)
            if nb < 1e-12:
                raise SolverError(
                    f"search space stagnated at iteration {j} (residual {rnorm:.3e})"
                )
        basis = np.column_stack([basis, t / nb])

        _, y = rayleigh_ritz(basis, a_mat, m_mat)
        u = basis @ y
        u /= b_norm(u)
        lam = rayleigh(u)
        if basis.shape[1] > opts.restart:
            basis = u[:, None]

    raise NonConvergenceError(
        f"no convergence in {opts.max_outer} outer iterations "
        f"(last residual {history[-1].residual:.3e})",
        history=history,
    )


def _b_orthogonalize(t, basis, m_mat):
    """Twice-iterated Gram-Schmidt in the b-inner product."""
    for _ in range(2):
        t = t - basis @ (basis.T @ (m_mat @ t))
    return t, math.sqrt(max(float(t @ (m_mat @ t)), 0.0))


def _basis_div_residual(proj_ctx, basis):
    worst = 0.0
    for j in range(basis.shape[1]):
        worst = max(worst, proj_ctx.divergence_residual(basis[:, j]))
    return worst
