"""Solver-agnostic container for SDPs over symmetric matrix variables.

A problem maximizes a linear functional of the variable entries subject to
affine matrix inequalities

    G(X) = C0 + sum_k X[v_k][i_k, j_k] * C_k  >= 0   (PSD),

where each key ``k = (v, i, j)`` with ``i <= j`` names one free entry of a
symmetric variable ``v``.  Because ``X[i, j]`` and ``X[j, i]`` are the same
free entry, ``C_k`` is the derivative of ``G`` with respect to the pair.

Exchange format (JSON)::

    {"format": "slqsdp-sdp", "version": 1, "sense": "maximize",
     "variables":   [{"name": "F", "dim": 3}, ...],
     "objective":   [{"variable": "M", "row": 0, "col": 0, "coefficient": 1.0}, ...],
     "constraints": [{"name": "...", "dim": d,
                      "constant": [[i, j, value], ...],
                      "coefficients": [{"variable": "F", "row": a, "col": b,
                                        "entries": [[i, j, value], ...]}, ...]}]}

Matrices are written as upper-triangle triplets (``i <= j``); the lower
triangle is implied by symmetry.  Objective coefficients multiply the entry
value ``X[row, col]`` once.

Solver adapters work on a vector ``x`` with one component per key, ordered
variable by variable and, inside a variable, column by column over the upper
triangle.  Diagonal entries enter as ``x = X[i, i]`` and off-diagonal ones as
``x = sqrt(2) X[i, j]``, which makes ``sum_k x_k^2 = ||X||_F^2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

from ..errors import ValidationError

Key = tuple[str, int, int]

FORMAT_NAME = "slqsdp-sdp"
FORMAT_VERSION = 1


def upper_keys(name: str, dim: int) -> list[Key]:
    return [(name, i, j) for j in range(dim) for i in range(j + 1)]


def unit_sym(dim: int, i: int, j: int) -> np.ndarray:
    """Symmetric matrix whose (i, j) and (j, i) entries are one."""
    E = np.zeros((dim, dim))
    E[i, j] = 1.0
    E[j, i] = 1.0
    return E


def _as_sym_csr(M, dim: int) -> sp.csr_matrix:
    if sp.issparse(M):
        out = sp.csr_matrix(M, dtype=float)
    else:
        out = sp.csr_matrix(np.asarray(M, dtype=float))
    if out.shape != (dim, dim):
        raise ValidationError(f"expected a {dim}x{dim} matrix, got {out.shape}")
    out.eliminate_zeros()
    return out


def _triplets(M: sp.spmatrix) -> list[list]:
    U = sp.triu(M, format="coo")
    order = np.lexsort((U.col, U.row))
    return [[int(U.row[k]), int(U.col[k]), float(U.data[k])] for k in order]


def _from_triplets(triplets, dim: int) -> sp.csr_matrix:
    if not triplets:
        return sp.csr_matrix((dim, dim))
    arr = np.asarray(triplets, dtype=float).reshape(-1, 3)
    i = arr[:, 0].astype(int)
    j = arr[:, 1].astype(int)
    if np.any(i > j):
        raise ValidationError("matrix triplets must satisfy row <= col")
    v = arr[:, 2]
    off = i != j
    rows = np.concatenate([i, j[off]])
    cols = np.concatenate([j, i[off]])
    vals = np.concatenate([v, v[off]])
    return sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim))


@dataclass
class LmiConstraint:
    """``constant + sum_k x_k coefficients[k] >= 0`` (full symmetric sparse matrices)."""

    dim: int
    constant: sp.csr_matrix
    coefficients: dict[Key, sp.csr_matrix]
    name: str = ""

    def evaluate(self, values: dict[str, np.ndarray]) -> np.ndarray:
        G = self.constant.copy()
        for (v, i, j), C in self.coefficients.items():
            x = values[v][i, j]
            if x != 0.0:
                G = G + x * C
        G = G.toarray()
        return 0.5 * (G + G.T)

    def is_symmetric(self, tol: float = 0.0) -> bool:
        mats = [self.constant, *self.coefficients.values()]
        return all(abs(M - M.T).max() <= tol if M.nnz else True for M in mats)


@dataclass
class SdpProblem:
    variables: dict[str, int]
    objective: dict[Key, float]
    constraints: list[LmiConstraint] = field(default_factory=list)
    sense: str = "maximize"

    def keys(self) -> list[Key]:
        out: list[Key] = []
        for name, dim in self.variables.items():
            out.extend(upper_keys(name, dim))
        return out

    def validate(self) -> None:
        declared = set(self.keys())
        for key in self.objective:
            if key not in declared:
                raise ValidationError(f"objective references undeclared entry {key}")
        for c in self.constraints:
            if c.constant.shape != (c.dim, c.dim):
                raise ValidationError(f"constraint {c.name!r}: constant has wrong shape")
            for key, C in c.coefficients.items():
                if key not in declared:
                    raise ValidationError(f"constraint {c.name!r} references undeclared {key}")
                if C.shape != (c.dim, c.dim):
                    raise ValidationError(f"constraint {c.name!r}: coefficient {key} has wrong shape")
            if not c.is_symmetric(tol=1e-12 * max(1.0, _max_abs(c))):
                raise ValidationError(f"constraint {c.name!r} has a non-symmetric matrix")

    def objective_value(self, values: dict[str, np.ndarray]) -> float:
        return float(sum(c * values[v][i, j] for (v, i, j), c in self.objective.items()))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "sense": self.sense,
            "variables": [{"name": k, "dim": d} for k, d in self.variables.items()],
            "objective": [
                {"variable": v, "row": i, "col": j, "coefficient": float(c)}
                for (v, i, j), c in self.objective.items()
            ],
            "constraints": [
                {
                    "name": c.name,
                    "dim": c.dim,
                    "constant": _triplets(c.constant),
                    "coefficients": [
                        {"variable": v, "row": i, "col": j, "entries": _triplets(C)}
                        for (v, i, j), C in c.coefficients.items()
                    ],
                }
                for c in self.constraints
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> "SdpProblem":
        if doc.get("format") != FORMAT_NAME or doc.get("version") != FORMAT_VERSION:
            raise ValidationError("not a version-1 slqsdp-sdp document")
        variables = {v["name"]: int(v["dim"]) for v in doc["variables"]}
        objective = {
            (o["variable"], int(o["row"]), int(o["col"])): float(o["coefficient"])
            for o in doc["objective"]
        }
        constraints = []
        for c in doc["constraints"]:
            dim = int(c["dim"])
            coefs = {
                (e["variable"], int(e["row"]), int(e["col"])): _from_triplets(e["entries"], dim)
                for e in c["coefficients"]
            }
            constraints.append(
                LmiConstraint(dim, _from_triplets(c["constant"], dim), coefs, c.get("name", ""))
            )
        prob = cls(variables, objective, constraints, doc.get("sense", "maximize"))
        prob.validate()
        return prob

    @classmethod
    def from_json(cls, text: str) -> "SdpProblem":
        return cls.from_dict(json.loads(text))


def _max_abs(c: LmiConstraint) -> float:
    vals = [abs(M).max() for M in [c.constant, *c.coefficients.values()] if M.nnz]
    return float(max(vals)) if vals else 0.0


def affine_lmi(
    dim: int,
    variables: dict[str, int],
    linear: Callable[[dict[str, np.ndarray]], np.ndarray],
    constant: np.ndarray | None = None,
    name: str = "",
    only: Iterable[str] | None = None,
) -> LmiConstraint:
    """Build an LMI from a linear map of the variables plus a constant.

    ``linear`` must be homogeneous (``linear(0) == 0``); it is probed at each
    symmetric unit matrix to read off the coefficient matrices.  ``only``
    restricts probing to variables known to appear in the map.
    """
    zero = {v: np.zeros((d, d)) for v, d in variables.items()}
    coefs: dict[Key, sp.csr_matrix] = {}
    for v, d in variables.items():
        if only is not None and v not in only:
            continue
        for key in upper_keys(v, d):
            _, i, j = key
            probe = dict(zero)
            probe[v] = unit_sym(d, i, j)
            C = _as_sym_csr(linear(probe), dim)
            if C.nnz:
                coefs[key] = C
    const = _as_sym_csr(np.zeros((dim, dim)) if constant is None else constant, dim)
    return LmiConstraint(dim, const, coefs, name)


def trace_objective(name: str, weight: np.ndarray) -> dict[Key, float]:
    """Coefficients of ``tr(weight @ X)`` for a symmetric variable ``X``."""
    weight = np.asarray(weight, dtype=float)
    d = weight.shape[0]
    out: dict[Key, float] = {}
    for _, i, j in upper_keys(name, d):
        c = weight[i, i] if i == j else weight[i, j] + weight[j, i]
        if c != 0.0:
            out[(name, i, j)] = float(c)
    return out
