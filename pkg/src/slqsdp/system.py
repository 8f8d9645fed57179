"""Problem instances for discounted stochastic LQ regulation.

A problem instance is the plant ``x+ = A x + B u + w``, the Gaussian noise and
initial-state laws, and the discounted quadratic cost.  All containers are
frozen and hold read-only copies of their arrays, so they can be shared
between workers without defensive copying.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError, ValidationError

#: Strict margin used by :func:`is_admissible`.
ADMISSIBILITY_MARGIN = 1e-9
#: Singular values below this fraction of the largest count as zero in PBH tests.
PBH_RANK_TOL = 1e-8


def _frozen(a: Any, name: str, ndim: int = 2) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim == 0 and ndim == 2:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1 and ndim == 2:
        raise ValidationError(f"{name} must be a matrix, got a vector of shape {arr.shape}")
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def _check_square(M: np.ndarray, name: str, size: int | None = None) -> None:
    if M.shape[0] != M.shape[1]:
        raise ValidationError(f"{name} must be square, got {M.shape}")
    if size is not None and M.shape[0] != size:
        raise ValidationError(f"{name} must be {size}x{size}, got {M.shape}")


def _check_symmetric(M: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > 1e-12 * scale:
        raise ValidationError(f"{name} is not symmetric")


def _min_eig(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def _check_psd(M: np.ndarray, name: str) -> None:
    _check_symmetric(M, name)
    norm = float(np.linalg.norm(M, 2)) if M.size else 0.0
    if _min_eig(M) < -1e-10 * max(norm, 1.0):
        raise ValidationError(f"{name} is not positive semidefinite")


def _check_pd(M: np.ndarray, name: str) -> None:
    _check_symmetric(M, name)
    if _min_eig(M) <= 0.0:
        raise ValidationError(f"{name} is not positive definite")


@dataclass(frozen=True)
class LinearSystem:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _frozen(self.A, "A")
        B = _frozen(self.B, "B")
        if B.ndim == 2 and B.shape[0] != A.shape[0] and B.size == A.shape[0]:
            B = _frozen(B.reshape(A.shape[0], 1), "B")
        _check_square(A, "A")
        if B.shape[0] != A.shape[0]:
            raise ValidationError(f"B has {B.shape[0]} rows, A is {A.shape[0]}x{A.shape[0]}")
        if A.shape[0] < 1 or B.shape[1] < 1:
            raise ValidationError("need n >= 1 and m >= 1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def AB(self) -> np.ndarray:
        return np.hstack([self.A, self.B])

    def closed_loop(self, L) -> np.ndarray:
        return self.A + self.B @ check_gain(self, L)


@dataclass(frozen=True)
class NoiseModel:
    Sigma: np.ndarray

    def __post_init__(self):
        S = _frozen(self.Sigma, "Sigma")
        _check_square(S, "Sigma")
        _check_psd(S, "Sigma")
        object.__setattr__(self, "Sigma", S)

    @classmethod
    def isotropic(cls, n: int, variance: float) -> "NoiseModel":
        return cls(variance * np.eye(n))


@dataclass(frozen=True)
class InitialState:
    """Gaussian law of ``x0``.

    ``Sigma0`` must be positive definite.  :meth:`point` builds a degenerate
    point mass, which is only meaningful for simulation tests.
    """

    mu0: np.ndarray
    Sigma0: np.ndarray
    X0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self, _strict: bool = True):
        mu0 = _frozen(np.ravel(self.mu0), "mu0", ndim=1)
        S0 = _frozen(self.Sigma0, "Sigma0")
        _check_square(S0, "Sigma0", mu0.size)
        if _strict:
            _check_pd(S0, "Sigma0")
        X0 = S0 + np.outer(mu0, mu0)
        X0.setflags(write=False)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "Sigma0", S0)
        object.__setattr__(self, "X0", X0)

    @classmethod
    def point(cls, mu0) -> "InitialState":
        mu0 = np.ravel(np.asarray(mu0, dtype=float))
        obj = object.__new__(cls)
        object.__setattr__(obj, "mu0", mu0)
        object.__setattr__(obj, "Sigma0", np.zeros((mu0.size, mu0.size)))
        obj.__post_init__(_strict=False)
        return obj

    @property
    def n(self) -> int:
        return self.mu0.size


@dataclass(frozen=True)
class CostSpec:
    Q: np.ndarray
    R: np.ndarray
    r: float
    W: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        Q = _frozen(self.Q, "Q")
        R = _frozen(self.R, "R")
        _check_square(Q, "Q")
        _check_square(R, "R")
        _check_psd(Q, "Q")
        _check_pd(R, "R")
        r = float(self.r)
        if not (0.0 < r < 1.0):
            raise ValidationError(f"discount factor must lie in (0, 1), got {r}")
        W = sla.block_diag(Q, R)
        W.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "W", W)

    @property
    def noise_weight(self) -> float:
        """The factor r/(1-r) multiplying noise-driven terms."""
        return self.r / (1.0 - self.r)


def check_gain(sys: LinearSystem, L) -> np.ndarray:
    """Return ``L`` as a finite float array of shape (m, n)."""
    L = np.asarray(L, dtype=float)
    if L.ndim == 0 and sys.m == 1 and sys.n == 1:
        L = L.reshape(1, 1)
    if L.shape != (sys.m, sys.n):
        raise ValidationError(f"gain must be {sys.m}x{sys.n}, got {L.shape}")
    if not np.all(np.isfinite(L)):
        raise ValidationError("gain contains non-finite entries")
    return L


@dataclass(frozen=True)
class Instance:
    """Everything that defines one SLQ problem."""

    system: LinearSystem
    noise: NoiseModel
    init: InitialState
    cost: CostSpec

    def __post_init__(self):
        n = self.system.n
        if self.noise.Sigma.shape != (n, n):
            raise ValidationError("Sigma does not match the state dimension")
        if self.init.n != n:
            raise ValidationError("mu0/Sigma0 do not match the state dimension")
        if self.cost.Q.shape != (n, n) or self.cost.R.shape != (self.system.m,) * 2:
            raise ValidationError("Q/R do not match the system dimensions")

    @property
    def Omega(self) -> np.ndarray:
        """``X0 + r/(1-r) Sigma``, the weight of the dual objective."""
        return self.init.X0 + self.cost.noise_weight * self.noise.Sigma

    def to_dict(self) -> dict:
        return {
            "A": self.system.A.tolist(),
            "B": self.system.B.tolist(),
            "Sigma": self.noise.Sigma.tolist(),
            "mu0": self.init.mu0.tolist(),
            "Sigma0": self.init.Sigma0.tolist(),
            "Q": self.cost.Q.tolist(),
            "R": self.cost.R.tolist(),
            "r": self.cost.r,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def spectral_radius(M) -> float:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"spectral radius needs a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValidationError("matrix contains non-finite entries")
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def augment(sys: LinearSystem, L) -> tuple[np.ndarray, np.ndarray]:
    """Augmented closed loop on ``z = [x; u]``.

    Returns ``(A_L, Lbar)`` with ``A_L = [[A, B], [L A, L B]]`` and
    ``Lbar = [I; L]``, so that ``z+ = A_L z + Lbar w``.
    """
    L = check_gain(sys, L)
    A_L = np.block([[sys.A, sys.B], [L @ sys.A, L @ sys.B]])
    Lbar = np.vstack([np.eye(sys.n), L])
    return A_L, Lbar


def is_admissible(sys: LinearSystem, L) -> bool:
    return spectral_radius(sys.closed_loop(L)) < 1.0 - ADMISSIBILITY_MARGIN


def _full_rank(M: np.ndarray, rank: int) -> bool:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return rank == 0
    return int(np.sum(s > PBH_RANK_TOL * s[0])) >= rank


def psd_sqrt(M) -> np.ndarray:
    """Symmetric PSD square root (negative eigenvalues from round-off clipped)."""
    M = np.asarray(M, dtype=float)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def check_stabilizable_detectable(sys: LinearSystem, cost: CostSpec) -> tuple[bool, bool]:
    """PBH tests: (stabilizable(A, B), detectable(A, Q^{1/2}))."""
    n = sys.n
    Qh = psd_sqrt(cost.Q)
    stabilizable = detectable = True
    for lam in np.linalg.eigvals(sys.A):
        if abs(lam) < 1.0 - ADMISSIBILITY_MARGIN:
            continue
        shifted = lam * np.eye(n) - sys.A
        if stabilizable and not _full_rank(np.hstack([shifted, sys.B.astype(complex)]), n):
            stabilizable = False
        if detectable and not _full_rank(np.vstack([shifted, Qh.astype(complex)]), n):
            detectable = False
    return stabilizable, detectable


def zoh_discretize(Ac, Bc, T: float) -> LinearSystem:
    """Zero-order-hold discretization through one block matrix exponential.

    ``expm([[Ac, Bc], [0, 0]] T) = [[A, B], [0, I]]``.
    """
    Ac = np.asarray(Ac, dtype=float)
    Bc = np.asarray(Bc, dtype=float)
    if Bc.ndim == 1:
        Bc = Bc.reshape(-1, 1)
    if T <= 0:
        raise ValidationError(f"sampling time must be positive, got {T}")
    n, m = Bc.shape
    if Ac.shape != (n, n):
        raise ValidationError(f"Ac must be {n}x{n}, got {Ac.shape}")
    blk = np.zeros((n + m, n + m))
    blk[:n, :n] = Ac
    blk[:n, n:] = Bc
    with np.errstate(over="ignore", invalid="ignore"):
        E = sla.expm(blk * T)
    if not np.all(np.isfinite(E)):
        raise NumericalError("matrix exponential overflowed; Ac*T is too large")
    return LinearSystem(E[:n, :n], E[:n, n:])


def instance_from_dict(doc: dict) -> Instance:
    """Build an :class:`Instance` from the JSON instance schema.

    Discrete instances give ``A`` and ``B``; continuous ones give ``Ac``,
    ``Bc`` and ``T`` and are discretized here.
    """
    try:
        if "Ac" in doc:
            system = zoh_discretize(doc["Ac"], doc["Bc"], float(doc["T"]))
        else:
            system = LinearSystem(doc["A"], doc["B"])
        n = system.n
        noise = NoiseModel(doc.get("Sigma", np.zeros((n, n))))
        init = InitialState(doc["mu0"], doc["Sigma0"])
        cost = CostSpec(doc["Q"], doc["R"], doc["r"])
    except KeyError as exc:
        raise ValidationError(f"instance document is missing key {exc}") from None
    return Instance(system, noise, init, cost)


def load_instance(path) -> Instance:
    with open(Path(path)) as fh:
        return instance_from_dict(json.load(fh))
