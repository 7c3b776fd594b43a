"""
Firm-side Schur systems
---------------------------------------------------------------------------

Every ridge or OLS solve in the package goes through the p x p system

    L~_f = D_{f,lambda} - B^T D_{w,lambda}^{-1} B,

which is symmetric positive definite whenever lambda_f > 0 (or, with
lambda = 0, once one firm per component is pinned). ``SchurFactor`` picks
sparse Cholesky (CHOLMOD, when scikit-sparse is importable), then SuperLU,
and falls back to Jacobi-preconditioned conjugate gradients when the LU
fill-in is too large.
"""

import logging

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import LinearOperator, cg, splu

from ridge_twfe.errors import EstimationError, SolverError
from ridge_twfe.graph import ZERO_PENALTIES, rowscale

try:
    from sksparse import cholmod

    _HAS_CHOLMOD = True
except ImportError:
    _HAS_CHOLMOD = False

log = logging.getLogger(__name__)

FILL_LIMIT = 5e7
PCG_RTOL = 1e-10


class SchurFactor:
    def __init__(self, matrix, method="auto", fill_limit=FILL_LIMIT, rtol=PCG_RTOL, max_iter=None):
        self.matrix = sps.csc_matrix(matrix, dtype=float)
        self.size = self.matrix.shape[0]
        self.rtol = rtol
        self.max_iter = max_iter if max_iter is not None else max(10 * self.size, 1000)
        self.fill = 0
        self.iterations = 0
        self._factor = None

        if self.size == 0:
            self.method = "empty"
        elif method in ("auto", "cholmod") and _HAS_CHOLMOD:
            self._factor_cholmod()
        elif method == "cholmod":
            raise EstimationError("scikit-sparse is not installed; use method='splu' or 'pcg'")
        elif method in ("auto", "splu"):
            self._factor_splu(fill_limit if method == "auto" else np.inf)
        elif method == "pcg":
            self._setup_pcg()
        else:
            raise EstimationError(f"unknown solver method {method!r}")
        log.debug("Schur factor: size=%d method=%s fill=%d", self.size, self.method, self.fill)

    def _factor_cholmod(self):
        try:
            self._factor = cholmod.cholesky(self.matrix)
        except cholmod.CholmodNotPositiveDefiniteError as exc:
            raise SolverError("Schur matrix is not positive definite", method="cholmod") from exc
        self.method = "cholmod"
        self.fill = int(self._factor.L().nnz)

    def _factor_splu(self, fill_limit):
        try:
            lu = splu(self.matrix, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise SolverError(f"sparse LU failed: {exc}", method="splu") from exc
        fill = int(lu.L.nnz + lu.U.nnz)
        if fill > fill_limit:
            log.info("LU fill-in %d above limit %.0f, switching to conjugate gradients", fill, fill_limit)
            self._setup_pcg()
            return
        self._factor = lu
        self.method = "splu"
        self.fill = fill

    def _setup_pcg(self):
        diag = self.matrix.diagonal()
        if np.any(diag <= 0):
            raise SolverError("nonpositive diagonal in Schur matrix", method="pcg")
        inv_diag = 1.0 / diag
        self._preconditioner = LinearOperator(self.matrix.shape, matvec=lambda x: inv_diag * x, dtype=float)
        self.method = "pcg"

    def _solve_pcg(self, b):
        counter = {"it": 0}

        def callback(_):
            counter["it"] += 1

        x, info = cg(self.matrix, b, rtol=self.rtol, maxiter=self.max_iter, M=self._preconditioner, callback=callback)
        self.iterations = max(self.iterations, counter["it"])
        if info != 0:
            residual = float(np.linalg.norm(self.matrix @ x - b))
            raise SolverError("conjugate gradients did not converge", residual_norm=residual, method="pcg")
        return x

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if self.size == 0:
            return np.zeros_like(rhs)
        if self.method == "cholmod":
            return self._factor(rhs)
        if self.method == "splu":
            return self._factor.solve(np.ascontiguousarray(rhs))
        if rhs.ndim == 1:
            return self._solve_pcg(rhs)
        return np.column_stack([self._solve_pcg(rhs[:, k]) for k in range(rhs.shape[1])]) if rhs.shape[1] else np.zeros_like(rhs)


class SchurSolver:
    """Realized-network operators backed by one firm-side factorization.

    ``adjacency`` may be any (n, p) matrix; degrees default to its row and
    column sums, which lets dense expected adjacencies reuse this class.
    Explicit degrees are needed for OLS, where a pinned firm column is
    removed from B while the workers keep their full degree.
    """

    def __init__(self, adjacency, penalties=ZERO_PENALTIES, worker_degrees=None, firm_degrees=None, method="auto"):
        self.b = sps.csr_matrix(adjacency, dtype=float)
        self.bt = self.b.T.tocsr()
        self.penalties = penalties
        self.n, self.p = self.b.shape
        dw = np.asarray(self.b.sum(axis=1)).ravel() if worker_degrees is None else np.asarray(worker_degrees, dtype=float)
        df = np.asarray(self.b.sum(axis=0)).ravel() if firm_degrees is None else np.asarray(firm_degrees, dtype=float)
        self.dw_lambda = dw + penalties.lambda_w
        self.df_lambda = df + penalties.lambda_f
        if np.any(self.dw_lambda <= 0) or np.any(self.df_lambda <= 0):
            raise EstimationError("regularized degrees must be positive; use positive penalties or drop isolated nodes")
        schur = sps.diags(self.df_lambda) - self.bt @ sps.diags(1.0 / self.dw_lambda) @ self.b
        self.factor = SchurFactor(schur, method=method)

    @classmethod
    def from_graph(cls, g, penalties, method="auto"):
        return cls(g.adjacency, penalties, g.worker_degrees, g.firm_degrees, method=method)

    @property
    def method(self):
        return self.factor.method

    def adjacency(self, x):
        return self.b @ x

    def adjacency_t(self, y):
        return self.bt @ y

    def firm_schur_solve(self, y):
        return self.factor.solve(y)

    def worker_schur_solve(self, x):
        scaled = rowscale(1.0 / self.dw_lambda, x)
        return scaled + rowscale(1.0 / self.dw_lambda, self.b @ self.factor.solve(self.bt @ scaled))

    def schur_matrix(self):
        return self.factor.matrix
