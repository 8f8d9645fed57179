"""Model-based and data-driven SDPs whose dual variable ``F`` is the Q-function matrix.

All builders share the second constraint

    [[F11 - M, F12], [F12', F22]] >= 0,

i.e. ``M <= F11 - F12 F22^{-1} F12'``, and differ in how the Bellman-type
inequality ``F <= W + r [A B]' M [A B]`` is expressed:

* ``build_model_based`` uses ``(A, B)`` directly (block LMI of side n+2m).
* ``build_model_free_aggregated`` sums the per-trajectory congruences
  ``Z_i' (.) Z_i`` into one N x N inequality.
* ``build_model_free_literal`` keeps the per-trajectory input blocks, giving
  an LMI of side N + l m (noise-free data only).
* ``build_model_free_gram`` whitens the pooled data Gram matrix so the
  inequality is (n+m) x (n+m) and exactly congruent to the model-based one
  with ``[A B]`` replaced by its least-squares estimate.

The objective is ``tr(Omega M) + certificate_weight * tr(F)``.  With only
the first term ``F`` is not pinned down at the optimum; the pair
``(H*, P*)`` is the greatest feasible point, so any positive
``certificate_weight`` selects ``F = H*`` without moving ``M`` or the gain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from ..data import TrajectoryBatch, require_rank
from ..errors import ConditioningError, SizeCapError, ValidationError
from ..system import CostSpec, LinearSystem, _check_psd
from .problem import SdpProblem, affine_lmi, trace_objective
from .solver import SdpSolution, SolverSettings, solve

TRACE_MODES = ("m-sub", "fixed-point", "zero")
FORMS = ("gram", "aggregated", "literal")
LITERAL_SIZE_CAP = 2000


@dataclass(frozen=True)
class DualCertificate:
    F: np.ndarray
    M: np.ndarray

    @property
    def n(self) -> int:
        return self.M.shape[0]

    def blocks(self):
        n = self.n
        return self.F[:n, :n], self.F[:n, n:], self.F[n:, n:]

    def schur(self) -> np.ndarray:
        """``F11 - F12 F22^{-1} F12'``."""
        F11, F12, F22 = self.blocks()
        return F11 - F12 @ _solve_pd(F22, F12.T)

    def slack(self) -> float:
        """Smallest eigenvalue of ``schur() - M``; feasibility needs >= -1e-7."""
        D = self.schur() - self.M
        return float(np.linalg.eigvalsh(0.5 * (D + D.T))[0])

    def extract_gain(self) -> np.ndarray:
        return extract_gain(self)

    @classmethod
    def from_solution(cls, sol: SdpSolution) -> "DualCertificate":
        return cls(F=sol.values["F"], M=sol.values["M"])


def _solve_pd(F22: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    F22 = 0.5 * (F22 + F22.T)
    lam = np.linalg.eigvalsh(F22)
    if lam[0] <= 1e-10 * np.linalg.norm(F22, 2):
        raise ConditioningError(f"F22 is not safely positive definite (min eigenvalue {lam[0]:.3e})")
    return sla.cho_solve(sla.cho_factor(F22, lower=True), rhs)


def extract_gain(cert: DualCertificate) -> np.ndarray:
    """``L = -F22^{-1} F12'`` via a Cholesky solve."""
    _, F12, F22 = cert.blocks()
    return -_solve_pd(F22, F12.T)


def _variables(n: int, m: int) -> dict[str, int]:
    return {"F": n + m, "M": n}


def _objective(n: int, m: int, Omega, certificate_weight: float):
    obj = trace_objective("M", np.eye(n) if Omega is None else Omega)
    if certificate_weight:
        for key, c in trace_objective("F", certificate_weight * np.eye(n + m)).items():
            obj[key] = obj.get(key, 0.0) + c
    return obj


def _schur_constraint(n: int, m: int):
    """``[[F11 - M, F12], [F12', F22]] >= 0``."""

    def lin(v):
        G = v["F"].copy()
        G[:n, :n] -= v["M"]
        return G

    return affine_lmi(n + m, _variables(n, m), lin, name="schur")


def build_model_based(
    sys: LinearSystem,
    cost: CostSpec,
    Omega=None,
    certificate_weight: float = 1.0,
) -> SdpProblem:
    """Model-based program in ``F`` and ``M``.

    ``Omega`` weights the objective ``tr(Omega M)``; the identity is used
    when it is omitted.  The optimum does not depend on it.
    """
    n, m, r = sys.n, sys.m, cost.r
    if Omega is not None:
        Omega = np.asarray(Omega, dtype=float)
        if Omega.shape != (n, n):
            raise ValidationError(f"Omega must be {n}x{n}")
        if np.linalg.eigvalsh(0.5 * (Omega + Omega.T))[0] <= 0:
            raise ValidationError("Omega must be positive definite")
    AB = sys.AB
    sr = np.sqrt(r)
    d = n + 2 * m

    def lin(v):
        F = v["F"]
        F11, F12 = F[:n, :n], F[:n, n:]
        G = np.zeros((d, d))
        G[: n + m, : n + m] = r * AB.T @ F11 @ AB - F
        G[: n + m, n + m :] = sr * AB.T @ F12
        G[n + m :, : n + m] = sr * F12.T @ AB
        G[n + m :, n + m :] = F[n:, n:]
        return G

    const = np.zeros((d, d))
    const[: n + m, : n + m] = cost.W
    bellman = affine_lmi(d, _variables(n, m), lin, const, name="bellman", only=("F",))
    return SdpProblem(
        _variables(n, m),
        _objective(n, m, Omega, certificate_weight),
        [bellman, _schur_constraint(n, m)],
    )


def _check_batch(batch: TrajectoryBatch, cost: CostSpec) -> None:
    if cost.Q.shape[0] != batch.n or cost.R.shape[0] != batch.m:
        raise ValidationError("cost weights do not match the batch dimensions")
    require_rank(batch)


def _check_sigma(Sigma, n: int) -> np.ndarray:
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.shape != (n, n):
        raise ValidationError(f"Sigma must be {n}x{n}")
    _check_psd(Sigma, "Sigma")
    return Sigma


def _trace_term(mode: str, Sigma: np.ndarray, trace_value):
    """Returns (use_linear_trace, constant_trace)."""
    if mode not in TRACE_MODES:
        raise ValidationError(f"trace_mode must be one of {TRACE_MODES}")
    if mode == "zero" or not np.any(Sigma):
        return False, 0.0
    if trace_value is not None:
        return False, float(trace_value)
    return True, 0.0


def build_model_free_aggregated(
    batch: TrajectoryBatch,
    cost: CostSpec,
    Sigma,
    trace_mode: str = "m-sub",
    trace_value: float | None = None,
    certificate_weight: float = 1.0,
) -> SdpProblem:
    """Summed per-trajectory inequality (scaled by 1/l), an N x N LMI:

        r mean_i Y_i' M Y_i - r tr(M Sigma) I_N - mean_i Z_i' (F - W) Z_i >= 0.

    ``trace_value`` replaces ``tr(M Sigma)`` by a constant (second pass of
    the fixed-point mode).
    """
    _check_batch(batch, cost)
    n, m, N, r = batch.n, batch.m, batch.N, cost.r
    Sigma = _check_sigma(Sigma, n)
    linear_trace, const_trace = _trace_term(trace_mode, Sigma, trace_value)

    l = batch.l
    TY = np.einsum("iak,ibj->abkj", batch.Y, batch.Y) / l
    TZ = np.einsum("iak,ibj->abkj", batch.Z, batch.Z) / l
    I = np.eye(N)

    def lin(v):
        G = r * np.einsum("ab,abkj->kj", v["M"], TY) - np.einsum("ab,abkj->kj", v["F"], TZ)
        if linear_trace:
            G -= r * np.trace(v["M"] @ Sigma) * I
        return G

    const = np.einsum("ab,abkj->kj", cost.W, TZ) - r * const_trace * I
    data = affine_lmi(N, _variables(n, m), lin, const, name="data")
    return SdpProblem(
        _variables(n, m), _objective(n, m, None, certificate_weight), [data, _schur_constraint(n, m)]
    )


def build_model_free_literal(
    batch: TrajectoryBatch,
    cost: CostSpec,
    size_cap: int = LITERAL_SIZE_CAP,
    certificate_weight: float = 1.0,
) -> SdpProblem:
    """Block LMI of side N + l m with the direct-sum structure kept (noise term dropped).

        [[r sum_i Y_i' F11 Y_i - sum_i Z_i'(F - W) Z_i,  sqrt(r) [Y_1' F12, ..., Y_l' F12]],
         [ ... ,                                          blockdiag(F22, ..., F22)]] >= 0
    """
    _check_batch(batch, cost)
    n, m, N, l, r = batch.n, batch.m, batch.N, batch.l, cost.r
    d = N + l * m
    if d > size_cap:
        raise SizeCapError(
            f"literal LMI would have side {d} > cap {size_cap}; use the aggregated or gram form"
        )
    Y, Z = batch.Y, batch.Z
    sr = np.sqrt(r)

    def lin(v):
        F = v["F"]
        F11, F12, F22 = F[:n, :n], F[:n, n:], F[n:, n:]
        G = np.zeros((d, d))
        G[:N, :N] = r * np.einsum("iak,ab,ibj->kj", Y, F11, Y) - np.einsum("iak,ab,ibj->kj", Z, F, Z)
        for i in range(l):
            s = slice(N + i * m, N + (i + 1) * m)
            blk = sr * Y[i].T @ F12
            G[:N, s] = blk
            G[s, :N] = blk.T
            G[s, s] = F22
        return G

    const = np.zeros((d, d))
    const[:N, :N] = np.einsum("iak,ab,ibj->kj", Z, cost.W, Z)
    data = affine_lmi(d, _variables(n, m), lin, const, name="data", only=("F",))
    return SdpProblem(
        _variables(n, m), _objective(n, m, None, certificate_weight), [data, _schur_constraint(n, m)]
    )


def gram_factors(batch: TrajectoryBatch):
    """``(C, Phi)`` with ``C C' = mean_i Z_i Z_i'`` and ``Phi = mean_i Y_i Z_i' C^{-T}``.

    For noise-free data ``Phi = [A B] C`` exactly.
    """
    l = batch.l
    G = np.einsum("iak,ibk->ab", batch.Z, batch.Z) / l
    T = np.einsum("iak,ibk->ab", batch.Y, batch.Z) / l
    try:
        C = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise ConditioningError("pooled data Gram matrix is not positive definite") from None
    Phi = sla.solve_triangular(C, T.T, lower=True).T
    return C, Phi


def build_model_free_gram(
    batch: TrajectoryBatch,
    cost: CostSpec,
    Sigma,
    trace_mode: str = "m-sub",
    trace_value: float | None = None,
    certificate_weight: float = 1.0,
) -> SdpProblem:
    """Whitened (n+m) x (n+m) data inequality

        r Phi' M Phi - (r/l) tr(M Sigma) I - C'(F - W) C >= 0.

    The trace term removes the first-order noise bias of ``Phi' M Phi``.
    """
    _check_batch(batch, cost)
    n, m, l, r = batch.n, batch.m, batch.l, cost.r
    Sigma = _check_sigma(Sigma, n)
    linear_trace, const_trace = _trace_term(trace_mode, Sigma, trace_value)
    C, Phi = gram_factors(batch)
    I = np.eye(n + m)
    w = r / l

    def lin(v):
        G = r * Phi.T @ v["M"] @ Phi - C.T @ v["F"] @ C
        if linear_trace:
            G -= w * np.trace(v["M"] @ Sigma) * I
        return G

    const = C.T @ cost.W @ C - w * const_trace * I
    data = affine_lmi(n + m, _variables(n, m), lin, const, name="data")
    return SdpProblem(
        _variables(n, m), _objective(n, m, None, certificate_weight), [data, _schur_constraint(n, m)]
    )


def solve_model_based(sys, cost, Omega=None, settings: SolverSettings | None = None, certificate_weight=1.0):
    sol = solve(build_model_based(sys, cost, Omega, certificate_weight), settings)
    return sol


def solve_model_free(
    batch: TrajectoryBatch,
    cost: CostSpec,
    Sigma,
    form: str = "gram",
    trace_mode: str = "m-sub",
    settings: SolverSettings | None = None,
    certificate_weight: float = 1.0,
) -> SdpSolution:
    """Build and solve a data-driven program.

    In ``fixed-point`` mode the first pass uses the linear ``tr(M Sigma)``
    term and the second pass freezes it at the first pass's Schur complement.
    """
    if form not in FORMS:
        raise ValidationError(f"form must be one of {FORMS}")
    if trace_mode not in TRACE_MODES:
        raise ValidationError(f"trace_mode must be one of {TRACE_MODES}")
    if form == "literal":
        return solve(build_model_free_literal(batch, cost, certificate_weight=certificate_weight), settings)
    build = build_model_free_gram if form == "gram" else build_model_free_aggregated
    first_mode = "m-sub" if trace_mode == "fixed-point" else trace_mode
    sol = solve(build(batch, cost, Sigma, first_mode, certificate_weight=certificate_weight), settings)
    if trace_mode != "fixed-point" or not sol.optimal:
        return sol
    S = DualCertificate.from_solution(sol).schur()
    tv = float(np.trace(S @ np.asarray(Sigma, dtype=float)))
    return solve(build(batch, cost, Sigma, "m-sub", trace_value=tv, certificate_weight=certificate_weight), settings)
