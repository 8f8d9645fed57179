"""Conic-solver adapter.

The one shipped backend is Clarabel, an interior-point solver whose
positive-semidefinite cone uses the same scaled upper-triangle vectorization
as the internal variable vector described in :mod:`slqsdp.sdp.problem`.
Every solution the backend calls (almost) solved is re-checked here: the constraint
matrices are rebuilt from the returned variables and their eigenvalues
inspected, independently of the solver's own residuals.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import SolverError
from .problem import Key, SdpProblem

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_LIMIT = "numerical-limit"

_SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class SolverSettings:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    verbose: bool = False


@dataclass
class SdpSolution:
    values: dict[str, np.ndarray]
    objective: float
    status: str
    gap: float
    solve_time: float
    iterations: int = 0
    backend_status: str = ""
    min_eigenvalues: list[float] = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def require_optimal(self) -> "SdpSolution":
        if not self.optimal:
            raise SolverError(
                f"SDP solve ended with status {self.status} (backend: {self.backend_status})",
                status=self.status,
            )
        return self


def svec_index(i: int, j: int) -> int:
    """Position of entry (i, j), i <= j, in the column-major upper triangle."""
    return j * (j + 1) // 2 + i


def _svec_sparse(M: sp.spmatrix, dim: int) -> tuple[np.ndarray, np.ndarray]:
    U = sp.triu(M, format="coo")
    idx = U.col * (U.col + 1) // 2 + U.row
    vals = np.where(U.row == U.col, U.data, _SQRT2 * U.data)
    return idx.astype(np.int64), vals


def _internal_scale(key: Key) -> float:
    _, i, j = key
    return 1.0 if i == j else 1.0 / _SQRT2


def to_conic_form(prob: SdpProblem):
    """Clarabel data ``(q, A, b, cones, keys)`` for ``min q'x, b - A x in K``."""
    import clarabel

    keys = prob.keys()
    col = {k: n for n, k in enumerate(keys)}
    q = np.zeros(len(keys))
    for key, c in prob.objective.items():
        q[col[key]] = -c * _internal_scale(key)

    rows, cols, vals, b_parts, cones = [], [], [], [], []
    offset = 0
    for con in prob.constraints:
        size = con.dim * (con.dim + 1) // 2
        b = np.zeros(size)
        idx, v = _svec_sparse(con.constant, con.dim)
        np.add.at(b, idx, v)
        b_parts.append(b)
        for key, C in con.coefficients.items():
            idx, v = _svec_sparse(C, con.dim)
            rows.append(idx + offset)
            cols.append(np.full(idx.size, col[key]))
            vals.append(-v * _internal_scale(key))
        cones.append(clarabel.PSDTriangleConeT(con.dim))
        offset += size

    if rows:
        A = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(offset, len(keys)),
        )
    else:
        A = sp.csc_matrix((offset, len(keys)))
    return q, A, np.concatenate(b_parts) if b_parts else np.zeros(0), cones, keys


def _unpack(prob: SdpProblem, keys: list[Key], x: np.ndarray) -> dict[str, np.ndarray]:
    values = {v: np.zeros((d, d)) for v, d in prob.variables.items()}
    for key, xk in zip(keys, x):
        v, i, j = key
        val = xk * _internal_scale(key)
        values[v][i, j] = val
        values[v][j, i] = val
    return values


def audit(prob: SdpProblem, values: dict[str, np.ndarray], feas_tol: float) -> tuple[bool, list[float]]:
    """Recompute every constraint matrix and check its smallest eigenvalue.

    The threshold is relative: ``-feas_tol * max(1, ||C0||_F, ||G(x)||_F)``.
    """
    ok = True
    eigs = []
    for con in prob.constraints:
        G = con.evaluate(values)
        lam = float(np.linalg.eigvalsh(G)[0]) if con.dim else 0.0
        eigs.append(lam)
        scale = max(1.0, float(sp.linalg.norm(con.constant)), float(np.linalg.norm(G)))
        if lam < -feas_tol * scale:
            ok = False
    return ok, eigs


def solve(prob: SdpProblem, settings: SolverSettings | None = None) -> SdpSolution:
    """Solve ``prob`` with the Clarabel backend.

    Non-optimal outcomes are reported through ``status``; callers that need an
    optimum use :meth:`SdpSolution.require_optimal`.
    """
    import clarabel

    settings = settings or SolverSettings()
    prob.validate()
    q, A, b, cones, keys = to_conic_form(prob)

    opts = clarabel.DefaultSettings()
    opts.verbose = settings.verbose
    opts.max_iter = settings.max_iter
    opts.tol_feas = 0.1 * settings.feas_tol
    opts.tol_gap_abs = 0.1 * settings.gap_tol
    opts.tol_gap_rel = 0.1 * settings.gap_tol
    opts.max_threads = 1

    P = sp.csc_matrix((len(keys), len(keys)))
    t0 = time.perf_counter()
    result = clarabel.DefaultSolver(P, q, A, b, cones, opts).solve()
    elapsed = time.perf_counter() - t0

    backend = str(result.status)
    values = _unpack(prob, keys, np.asarray(result.x, dtype=float))
    objective = prob.objective_value(values)
    pobj, dobj = -float(result.obj_val), -float(result.obj_val_dual)
    gap = abs(pobj - dobj) / max(1.0, abs(pobj))

    # The backend is asked for a tenth of the requested tolerances; a result it
    # only calls almost solved is still accepted if the audit below passes at
    # the requested ones.
    if backend.endswith("Solved"):
        status = OPTIMAL
    elif backend.endswith("PrimalInfeasible"):
        status = INFEASIBLE
    elif backend.endswith("DualInfeasible"):
        status = UNBOUNDED
    else:
        status = NUMERICAL_LIMIT

    eigs: list[float] = []
    if status == OPTIMAL:
        feasible, eigs = audit(prob, values, settings.feas_tol)
        if not feasible or gap > settings.gap_tol:
            status = NUMERICAL_LIMIT
    return SdpSolution(
        values=values,
        objective=objective,
        status=status,
        gap=gap,
        solve_time=elapsed,
        iterations=int(result.iterations),
        backend_status=backend,
        min_eigenvalues=eigs,
    )
