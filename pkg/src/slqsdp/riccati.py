"""Ground-truth solutions of the discounted SLQ problem.

Everything here uses the plant matrices directly; it is the oracle the
semidefinite programs are checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import (
    ConditioningError,
    IterationLimitError,
    NumericalError,
    PreconditionError,
    ValidationError,
)
from .system import (
    CostSpec,
    InitialState,
    LinearSystem,
    NoiseModel,
    augment,
    check_stabilizable_detectable,
    check_gain,
    is_admissible,
    spectral_radius,
)


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _pd_factor(M: np.ndarray, what: str):
    try:
        return sla.cho_factor(_sym(M), lower=True)
    except np.linalg.LinAlgError:
        raise ConditioningError(f"{what} is not positive definite") from None


@dataclass(frozen=True)
class RiccatiSolution:
    P: np.ndarray
    H: np.ndarray
    L: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        return self.H[:n, :n], self.H[:n, n:], self.H[n:, n:]

    def to_dict(self) -> dict:
        return {
            "P": self.P.tolist(),
            "H": self.H.tolist(),
            "L": self.L.tolist(),
            "residual": float(self.residual),
            "iterations": int(self.iterations),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "RiccatiSolution":
        return cls(
            P=np.array(doc["P"], dtype=float),
            H=np.array(doc["H"], dtype=float),
            L=np.array(doc["L"], dtype=float),
            iterations=int(doc["iterations"]),
            residual=float(doc["residual"]),
        )


@dataclass(frozen=True)
class PolicyValue:
    """Cost of a fixed admissible gain.

    ``S`` is the discounted second moment of ``z = [x; Lx]`` and ``P_L`` the
    value matrix; both routes give the same ``J``.
    """

    P_L: np.ndarray
    S: np.ndarray
    J: float


def riccati_map(P: np.ndarray, sys: LinearSystem, cost: CostSpec) -> np.ndarray:
    """One application of the discounted Riccati operator."""
    A, B, r = sys.A, sys.B, cost.r
    PA = P @ A
    BtPA = B.T @ PA
    fac = _pd_factor(cost.R + r * B.T @ P @ B, "R + r B'PB")
    return _sym(cost.Q + r * A.T @ PA - r * r * BtPA.T @ sla.cho_solve(fac, BtPA))


def solve_dare(
    sys: LinearSystem,
    cost: CostSpec,
    tol: float = 1e-12,
    max_iter: int = 200_000,
) -> RiccatiSolution:
    """Solve the discounted DARE by value iteration from ``P = 0``.

    Stops once ``||P - Ric(P)||_F <= tol (1 + ||P||_F)``.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    stab, det = check_stabilizable_detectable(sys, cost)
    if not (stab and det):
        raise PreconditionError(
            f"precondition fails: stabilizable={stab}, detectable={det}"
        )

    P = np.zeros((sys.n, sys.n))
    residual = np.inf
    for it in range(1, max_iter + 1):
        P_next = riccati_map(P, sys, cost)
        residual = float(np.linalg.norm(P_next - P))
        if not np.isfinite(residual):
            raise NumericalError("Riccati iteration diverged")
        P = P_next
        if residual <= tol * (1.0 + np.linalg.norm(P)):
            break
    else:
        raise IterationLimitError(
            f"value iteration did not converge in {max_iter} iterations "
            f"(last residual {residual:.3e})",
            residual=residual,
            iterations=max_iter,
        )

    final_residual = float(np.linalg.norm(P - riccati_map(P, sys, cost)))
    H = h_from_p(P, sys, cost)
    L = gain_from_h(H, sys.n)
    if not is_admissible(sys, L):
        # discounting only guarantees rho(sqrt(r) (A + BL)) < 1
        raise PreconditionError(
            f"discounted optimal gain is not admissible: rho(A+BL) = "
            f"{spectral_radius(sys.closed_loop(L)):.6g}"
        )
    return RiccatiSolution(P=P, H=H, L=L, iterations=it, residual=final_residual)


def h_from_p(P, sys: LinearSystem, cost: CostSpec) -> np.ndarray:
    """Q-function matrix ``H = W + r [A B]' P [A B]``."""
    P = np.asarray(P, dtype=float)
    if P.shape != (sys.n, sys.n):
        raise ValidationError(f"P must be {sys.n}x{sys.n}, got {P.shape}")
    AB = sys.AB
    return _sym(cost.W + cost.r * AB.T @ P @ AB)


def gain_from_h(H, n: int) -> np.ndarray:
    """Minimizer of the quadratic Q-function: ``L = -H22^{-1} H12'``."""
    H = np.asarray(H, dtype=float)
    fac = _pd_factor(H[n:, n:], "H22")
    return -sla.cho_solve(fac, H[:n, n:].T)


def optimal_cost(sol: RiccatiSolution, init: InitialState, noise: NoiseModel, r: float) -> float:
    P = sol.P
    return float(np.trace(P @ init.X0) + r / (1.0 - r) * np.trace(P @ noise.Sigma))


def policy_value_matrix(sys: LinearSystem, cost: CostSpec, L) -> np.ndarray:
    """Bellman fixed point ``P_L = Q + L'RL + r (A+BL)' P_L (A+BL)``."""
    L = check_gain(sys, L)
    Acl = np.sqrt(cost.r) * sys.closed_loop(L)
    P_L = sla.solve_discrete_lyapunov(Acl.T, cost.Q + L.T @ cost.R @ L)
    return _sym(P_L)


def cost_of_gain(
    sys: LinearSystem,
    cost: CostSpec,
    init: InitialState,
    noise: NoiseModel,
    L,
) -> PolicyValue:
    L = check_gain(sys, L)
    if not is_admissible(sys, L):
        raise PreconditionError(
            f"gain is not admissible: rho(A+BL) = {spectral_radius(sys.closed_loop(L)):.6g}"
        )
    A_L, Lbar = augment(sys, L)
    Omega = init.X0 + cost.noise_weight * noise.Sigma
    S = sla.solve_discrete_lyapunov(np.sqrt(cost.r) * A_L, Lbar @ Omega @ Lbar.T)
    if not np.all(np.isfinite(S)):
        raise NumericalError("Lyapunov solve for the second-moment matrix failed")
    S = _sym(S)
    P_L = policy_value_matrix(sys, cost, L)
    return PolicyValue(P_L=P_L, S=S, J=float(np.trace(cost.W @ S)))


def evaluate_q(sol: RiccatiSolution, noise: NoiseModel, r: float, x, u) -> float:
    """Optimal Q-function at a deterministic state-input pair."""
    z = np.concatenate([np.ravel(x), np.ravel(u)]).astype(float)
    if z.size != sol.H.shape[0]:
        raise ValidationError("x and u do not match the Q-function dimensions")
    return float(z @ sol.H @ z + r / (1.0 - r) * np.trace(sol.P @ noise.Sigma))
