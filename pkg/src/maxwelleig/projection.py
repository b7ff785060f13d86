"""Discrete divergence-free projection and the scalar solve behind it.

Projecting a field u removes its gradient component: u' = u - G p with
G^T M G p = G^T M u, so b(u', grad q) = 0 for every nodal q.  The scalar
system is solved directly on small meshes and otherwise by conjugate
gradients preconditioned with a local multilevel V-cycle that smooths
(damped Jacobi) only on the nodes whose basis functions changed between
levels, with an exact solve on the coarsest level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import nodal_prolongation
from .errors import ProjectionError


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    method: str


class ProjectionContext:
    """Reusable state for divergence projections on a hierarchy's finest level.

    All members are immutable after construction; solves are reentrant.
    """

    def __init__(
        self,
        ops_list,
        hierarchy,
        tol=1e-12,
        direct_threshold=2000,
        damping=0.5,
        iter_cap_factor=10,
    ):
        if not 0 < tol <= 1e-6:
            raise ValueError("projection tolerance must lie in (0, 1e-6]")
        self.ops = ops_list[-1]
        self.tol = tol
        self.damping = damping
        self.iter_cap_factor = iter_cap_factor

        self.laplacians = [ops.G.T @ ops.M @ ops.G for ops in ops_list]
        self.nodal_P = [None] + [
            nodal_prolongation(hierarchy, l, ops_list[l - 1], ops_list[l])
            for l in range(1, len(ops_list))
        ]
        self.smooth_pos = [None]
        self.inv_diag = [None]
        for l in range(1, len(ops_list)):
            pos = ops_list[l].node_pos[hierarchy.smoothing_nodes[l]]
            pos = pos[pos >= 0]
            self.smooth_pos.append(pos)
            diag = self.laplacians[l].diagonal()
            self.inv_diag.append(np.where(diag[pos] > 0, 1.0 / np.maximum(diag[pos], 1e-300), 0.0))

        # bottom of the V-cycle: the coarsest level that has interior nodes
        # at all (very coarse meshes may have none); it is solved exactly
        self.base_level = 0
        while (
            self.base_level < len(ops_list) - 1
            and self.laplacians[self.base_level].shape[0] == 0
        ):
            self.base_level += 1
        nb = self.laplacians[self.base_level].shape[0]
        self._coarse = spla.factorized(self.laplacians[self.base_level].tocsc()) if nb else None
        n = self.laplacians[-1].shape[0]
        self._direct = (
            spla.factorized(self.laplacians[-1].tocsc()) if 0 < n <= direct_threshold else None
        )

    @property
    def n_nodes(self):
        return self.laplacians[-1].shape[0]

    # -- multilevel V-cycle ---------------------------------------------------

    def _vcycle(self, level, rhs):
        if level <= self.base_level:
            return self._coarse(rhs) if self._coarse is not None else rhs
        lap = self.laplacians[level]
        pos = self.smooth_pos[level]
        x = np.zeros_like(rhs)
        x[pos] = self.damping * rhs[pos] * self.inv_diag[level]
        r = rhs - lap @ x
        x += self.nodal_P[level] @ self._vcycle(level - 1, self.nodal_P[level].T @ r)
        r = rhs - lap @ x
        x[pos] += self.damping * r[pos] * self.inv_diag[level]
        return x

    # -- solves ----------------------------------------------------------------

    def scalar_solve_with_info(self, rhs):
        """Solve the scalar Laplacian system to the configured tolerance."""
        rhs = np.asarray(rhs, dtype=np.float64)
        n = self.n_nodes
        if n == 0:
            return rhs.copy(), SolveInfo(0, 0.0, "empty")
        norm_rhs = np.linalg.norm(rhs)
        if norm_rhs == 0.0:
            return np.zeros_like(rhs), SolveInfo(0, 0.0, "zero")
        if self._direct is not None:
            x = self._direct(rhs)
            res = np.linalg.norm(rhs - self.laplacians[-1] @ x) / norm_rhs
            return x, SolveInfo(0, res, "direct")

        lap = self.laplacians[-1]
        top = len(self.laplacians) - 1
        cap = max(20, int(self.iter_cap_factor * math.sqrt(n)))
        x = np.zeros(n)
        r = rhs.copy()
        z = self._vcycle(top, r)
        p = z.copy()
        rho = r @ z
        for it in range(1, cap + 1):
            q = lap @ p
            alpha = rho / (p @ q)
            x += alpha * p
            r -= alpha * q
            res = np.linalg.norm(r) / norm_rhs
            if res <= self.tol:
                return x, SolveInfo(it, res, "pcg")
            z = self._vcycle(top, r)
            rho_new = r @ z
            p = z + (rho_new / rho) * p
            rho = rho_new
        raise ProjectionError(
            f"scalar solve stalled at relative residual {res:.3e} after {cap} iterations"
        )

    def scalar_solve(self, rhs):
        return self.scalar_solve_with_info(rhs)[0]

    def project_div_free_with_info(self, u):
        """Remove the discrete gradient component of a finest-level field."""
        g = self.ops.G
        if g.shape[1] == 0:
            return np.asarray(u, dtype=np.float64).copy(), SolveInfo(0, 0.0, "empty")
        rhs = g.T @ (self.ops.M @ u)
        p, info = self.scalar_solve_with_info(rhs)
        return u - g @ p, info

    def project_div_free(self, u):
        return self.project_div_free_with_info(u)[0]

    def divergence_residual(self, u):
        """Norm of G^T M u, the quantity the projection drives to zero."""
        return float(np.linalg.norm(self.ops.G.T @ (self.ops.M @ u)))
