"""Small dense operator-splitting QP solver with warm starts.

Solves min 0.5 x'Px + q'x subject to l <= Ax <= u via ADMM. P and A are fixed
at construction so the KKT factorization is computed once; per-solve updates
touch only q, l, u, which is exactly the structure of a receding-horizon MPC.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class QPSolver:
    def __init__(self, p_mat: np.ndarray, a_mat: np.ndarray,
                 rho: float = 0.4, sigma: float = 1e-6, alpha: float = 1.6):
        self.p_mat = np.asarray(p_mat, dtype=float)
        self.a_mat = np.asarray(a_mat, dtype=float)
        self.n = self.p_mat.shape[0]
        self.m = self.a_mat.shape[0]
        self.rho = rho
        self.sigma = sigma
        self.alpha = alpha
        kkt = self.p_mat + sigma * np.eye(self.n) + rho * (self.a_mat.T @ self.a_mat)
        self._chol = cho_factor(kkt)
        self._x = np.zeros(self.n)
        self._z = np.zeros(self.m)
        self._y = np.zeros(self.m)

    def reset(self) -> None:
        self._x[:] = 0.0
        self._z[:] = 0.0
        self._y[:] = 0.0

    def solve(self, q: np.ndarray, lower: np.ndarray, upper: np.ndarray,
              max_iter: int = 200, eps: float = 1e-6):
        """Returns (x, info). Warm-started from the previous call."""
        rho, sigma, alpha = self.rho, self.sigma, self.alpha
        x, z, y = self._x, self._z, self._y
        a = self.a_mat
        r_prim = r_dual = np.inf
        it = 0
        for it in range(1, max_iter + 1):
            rhs = sigma * x - q + a.T @ (rho * z - y)
            x_tld = cho_solve(self._chol, rhs)
            z_tld = a @ x_tld
            x = alpha * x_tld + (1.0 - alpha) * x
            z_mix = alpha * z_tld + (1.0 - alpha) * z
            z_prev = z
            z = np.clip(z_mix + y / rho, lower, upper)
            y = y + rho * (z_mix - z)
            if it % 10 == 0 or it == max_iter:
                ax = a @ x
                r_prim = float(np.max(np.abs(ax - z))) if self.m else 0.0
                r_dual = float(np.max(np.abs(self.p_mat @ x + q + a.T @ y))) if self.m else 0.0
                if r_prim < eps and r_dual < eps:
                    break
        self._x, self._z, self._y = x, z, y
        return x.copy(), {"iterations": it, "r_prim": r_prim, "r_dual": r_dual,
                          "converged": r_prim < eps and r_dual < eps}
