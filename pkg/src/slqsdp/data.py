"""Trajectory data for model-free design.

Each trajectory ``i`` draws its randomness from its own Philox stream keyed by
``SeedSequence(seed, spawn_key=(i,))``.  Within a trajectory the draws happen
in a fixed order: ``x0`` (n normals), then the probing inputs (N x m), then
the process noise (N x n).  A batch therefore depends only on the
configuration and the master seed, never on how trajectories are split
across workers.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    DatasetError,
    FormatVersionError,
    HorizonTooShortError,
    RankDeficiencyError,
    SimulationOverflowError,
    TruncationError,
    ValidationError,
)
from .system import InitialState, LinearSystem, NoiseModel, check_gain, psd_sqrt

DATASET_VERSION = 1
_MAGIC = b"SLQB"
RANK_TOL = 1e-8


@dataclass(frozen=True)
class ProbingPolicy:
    """``u_k = L0 x_k + eta_k`` with ``eta_k ~ N(0, probe_cov)``."""

    L0: np.ndarray
    probe_cov: np.ndarray

    def __post_init__(self):
        L0 = np.array(self.L0, dtype=float, ndmin=2)
        cov = np.array(self.probe_cov, dtype=float, ndmin=2)
        if cov.shape != (L0.shape[0], L0.shape[0]):
            raise ValidationError("probe_cov must be m x m with m = rows of L0")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(cov))):
            raise ValidationError("probe_cov must be symmetric")
        if np.linalg.eigvalsh(cov)[0] < -1e-10 * max(1.0, np.max(np.abs(cov))):
            raise ValidationError("probe_cov must be positive semidefinite")
        L0.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "L0", L0)
        object.__setattr__(self, "probe_cov", cov)

    @classmethod
    def gaussian(cls, n: int, m: int, std: float = 1.0, L0=None) -> "ProbingPolicy":
        L0 = np.zeros((m, n)) if L0 is None else L0
        return cls(L0, std**2 * np.eye(m))

    def to_dict(self) -> dict:
        return {"L0": self.L0.tolist(), "probe_cov": self.probe_cov.tolist()}


@dataclass(frozen=True)
class TrajectoryBatch:
    """``l`` trajectories of horizon ``N``.

    ``Z[i]`` is (n+m) x N with columns ``[x_k; u_k]``, ``Y[i]`` is n x N with
    columns ``x_{k+1}``, for ``k = 0..N-1``.
    """

    Z: np.ndarray
    Y: np.ndarray
    seed: int
    policy: ProbingPolicy
    fingerprint: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.Z.ndim != 3 or self.Y.ndim != 3:
            raise ValidationError("Z and Y must be stacked as (l, rows, N) arrays")
        if self.Z.shape[0] != self.Y.shape[0] or self.Z.shape[2] != self.Y.shape[2]:
            raise ValidationError("Z and Y disagree on l or N")
        if self.Z.shape[1] <= self.Y.shape[1]:
            raise ValidationError("Z must have n + m rows with m >= 1")
        for arr in (self.Z, self.Y):
            arr.setflags(write=False)

    @property
    def l(self) -> int:
        return self.Z.shape[0]

    @property
    def N(self) -> int:
        return self.Z.shape[2]

    @property
    def n(self) -> int:
        return self.Y.shape[1]

    @property
    def m(self) -> int:
        return self.Z.shape[1] - self.Y.shape[1]

    def states(self) -> np.ndarray:
        """All states ``x_0..x_N`` as an (l, N+1, n) array."""
        X = np.concatenate([self.Z[:, : self.n, :1], self.Y], axis=2)
        return np.transpose(X, (0, 2, 1))

    def inputs(self) -> np.ndarray:
        return np.transpose(self.Z[:, self.n :, :], (0, 2, 1))

    def shift_consistent(self) -> bool:
        return bool(np.array_equal(self.Y[:, :, :-1], self.Z[:, : self.n, 1:]))

    def equals(self, other: "TrajectoryBatch") -> bool:
        """Bitwise equality of data plus identical provenance."""
        return (
            self.Z.shape == other.Z.shape
            and self.Z.tobytes() == other.Z.tobytes()
            and self.Y.tobytes() == other.Y.tobytes()
            and self.seed == other.seed
            and self.fingerprint == other.fingerprint
        )


def substream(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for trajectory ``index`` of master ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def batch_fingerprint(sys, noise, init, policy, l, N, seed) -> str:
    doc = {
        "A": sys.A.tolist(),
        "B": sys.B.tolist(),
        "Sigma": noise.Sigma.tolist(),
        "mu0": init.mu0.tolist(),
        "Sigma0": init.Sigma0.tolist(),
        "policy": policy.to_dict(),
        "l": int(l),
        "N": int(N),
        "seed": int(seed),
        "version": DATASET_VERSION,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _gaussian_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix ``G`` with ``G G' = cov``: Cholesky, or a clipped eigen root if singular."""
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return psd_sqrt(cov)


def _rowmul(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``X @ M.T`` summed in a fixed order, so each row is independent of the batch size.

    BLAS picks kernels by shape, which changes rounding when chunking changes.
    """
    out = np.zeros(X.shape[:-1] + (M.shape[0],))
    for j in range(M.shape[1]):
        out += X[..., j : j + 1] * M[:, j]
    return out


def _simulate_chunk(indices, sys, noise_f, init_f, policy, N, seed):
    n, m = sys.n, sys.m
    count = len(indices)
    x0 = np.empty((count, n))
    eta = np.empty((count, N, m))
    w = np.empty((count, N, n))
    for row, i in enumerate(indices):
        g = substream(seed, i)
        x0[row] = g.standard_normal(n)
        eta[row] = g.standard_normal((N, m))
        w[row] = g.standard_normal((N, n))
    X = np.empty((count, N + 1, n))
    U = np.empty((count, N, m))
    X[:, 0] = init_f[0] + _rowmul(x0, init_f[1])
    eta = _rowmul(eta, policy.probe_cov_factor)
    w = _rowmul(w, noise_f)
    # overflow is detected below and reported, not warned about
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            U[:, k] = _rowmul(X[:, k], policy.L0) + eta[:, k]
            X[:, k + 1] = _rowmul(X[:, k], sys.A) + _rowmul(U[:, k], sys.B) + w[:, k]
            bad = ~np.all(np.isfinite(X[:, k + 1]), axis=1)
            if bad.any():
                raise SimulationOverflowError(int(indices[int(np.argmax(bad))]), k + 1)
    return X, U


class _Policy:
    def __init__(self, policy: ProbingPolicy):
        self.L0 = policy.L0
        self.probe_cov_factor = _gaussian_factor(policy.probe_cov)


def simulate_batch(
    sys: LinearSystem,
    noise: NoiseModel,
    init: InitialState,
    policy: ProbingPolicy,
    l: int,
    N: int,
    seed: int,
    workers: int = 1,
    chunk: int = 4096,
) -> TrajectoryBatch:
    """Run ``l`` independent trajectories of length ``N`` under ``policy``."""
    if l < 1 or N < 1:
        raise ValidationError("need l >= 1 and N >= 1")
    check_gain(sys, policy.L0)
    seed = int(seed)
    pol = _Policy(policy)
    noise_f = _gaussian_factor(noise.Sigma)
    init_f = (init.mu0, _gaussian_factor(init.Sigma0))

    chunks = [np.arange(s, min(s + chunk, l)) for s in range(0, l, chunk)]
    args = (sys, noise_f, init_f, pol, N, seed)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda idx: _simulate_chunk(idx, *args), chunks))
    else:
        parts = [_simulate_chunk(idx, *args) for idx in chunks]
    X = np.concatenate([p[0] for p in parts])
    U = np.concatenate([p[1] for p in parts])

    Z = np.ascontiguousarray(np.concatenate([X[:, :-1], U], axis=2).transpose(0, 2, 1))
    Y = np.ascontiguousarray(X[:, 1:].transpose(0, 2, 1))
    fp = batch_fingerprint(sys, noise, init, policy, l, N, seed)
    return TrajectoryBatch(Z=Z, Y=Y, seed=seed, policy=policy, fingerprint=fp)


@dataclass(frozen=True)
class RankReport:
    per_trajectory: np.ndarray
    horizon_ok: bool

    @property
    def passed(self) -> bool:
        return self.horizon_ok and bool(np.all(self.per_trajectory))

    def first_failure(self) -> int | None:
        bad = np.flatnonzero(~self.per_trajectory)
        return int(bad[0]) if bad.size else None


def rank_check(batch: TrajectoryBatch) -> RankReport:
    """Full-row-rank test of every ``Z[i]`` (singular values above 1e-8 * max)."""
    rows = batch.n + batch.m
    horizon_ok = batch.N >= rows
    if not horizon_ok:
        return RankReport(np.zeros(batch.l, dtype=bool), False)
    s = np.linalg.svd(batch.Z, compute_uv=False)
    ok = (s[:, 0] > 0) & np.all(s > RANK_TOL * s[:, :1], axis=1)
    return RankReport(ok, True)


def require_rank(batch: TrajectoryBatch) -> None:
    """Raise the documented data errors if the rank condition fails."""
    rows = batch.n + batch.m
    if batch.N < rows:
        raise HorizonTooShortError(
            f"horizon N={batch.N} is shorter than n+m={rows}; Z cannot have full row rank"
        )
    report = rank_check(batch)
    if not report.passed:
        i = report.first_failure()
        raise RankDeficiencyError(f"Z of trajectory {i} is not full row rank", trajectory=i)


def mc_average(batch: TrajectoryBatch) -> np.ndarray:
    """Mean state over trajectories at steps 0..N, shape (N+1, n)."""
    return batch.states().mean(axis=0)


def propagate_mean(A_cl: np.ndarray, x_start: np.ndarray, steps: int) -> np.ndarray:
    """Mean closed-loop trajectory ``x_{k+1} = A_cl x_k`` (zero-mean noise drops out)."""
    out = np.empty((steps + 1, x_start.size))
    out[0] = x_start
    for k in range(steps):
        out[k + 1] = A_cl @ out[k]
    return out


# -- persistence ----------------------------------------------------------


def _pack(batch: TrajectoryBatch) -> bytes:
    head = struct.pack("<4sIIIIIQ", _MAGIC, DATASET_VERSION, batch.n, batch.m, batch.l, batch.N, batch.seed)
    body = b""
    for arr in (batch.Z, batch.Y):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        body += struct.pack("<Q", arr.size) + data
    payload = head + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def _unpack(blob: bytes):
    head_size = struct.calcsize("<4sIIIIIQ")
    if len(blob) < head_size + 4:
        raise TruncationError("batch.bin is shorter than its header")
    magic, version, n, m, l, N, seed = struct.unpack_from("<4sIIIIIQ", blob)
    if magic != _MAGIC:
        raise DatasetError("batch.bin has the wrong magic bytes")
    if version != DATASET_VERSION:
        raise FormatVersionError(f"batch.bin version {version}, expected {DATASET_VERSION}")
    pos = head_size
    arrays = []
    for shape in ((l, n + m, N), (l, n, N)):
        if len(blob) < pos + 8:
            raise TruncationError("batch.bin ends inside a section header")
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if count != int(np.prod(shape)):
            raise DatasetError("section length does not match the declared dimensions")
        end = pos + 8 * count
        if len(blob) < end + 4:
            raise TruncationError("batch.bin ends inside a data section")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float))
        pos = end
    if len(blob) != pos + 4:
        raise TruncationError("batch.bin has trailing or missing bytes")
    (crc,) = struct.unpack_from("<I", blob, pos)
    if crc != zlib.crc32(blob[:pos]):
        raise ChecksumError("batch.bin CRC32 mismatch")
    return arrays[0], arrays[1], seed


def _csv_header(n: int, m: int) -> str:
    return ",".join(["k"] + [f"x{j + 1}" for j in range(n)] + [f"u{j + 1}" for j in range(m)])


def save_batch(batch: TrajectoryBatch, path, csv: bool = True) -> Path:
    """Write ``manifest.json``, ``batch.bin`` and (optionally) ``traj_<i>.csv``.

    CSV values use ``repr`` so they also round-trip exactly.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = _pack(batch)
    (path / "batch.bin").write_bytes(blob)
    if csv:
        X = batch.states()
        U = batch.inputs()
        header = _csv_header(batch.n, batch.m)
        for i in range(batch.l):
            lines = [header]
            for k in range(batch.N + 1):
                xs = [repr(float(v)) for v in X[i, k]]
                us = [repr(float(v)) for v in U[i, k]] if k < batch.N else [""] * batch.m
                lines.append(",".join([str(k), *xs, *us]))
            (path / f"traj_{i}.csv").write_text("\n".join(lines) + "\n")
    manifest = {
        "version": DATASET_VERSION,
        "n": batch.n,
        "m": batch.m,
        "l": batch.l,
        "N": batch.N,
        "seed": batch.seed,
        "fingerprint": batch.fingerprint,
        "policy": batch.policy.to_dict(),
        "csv": bool(csv),
        "crc32": zlib.crc32(blob),
        "meta": batch.meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def _load_csv(path: Path, man: dict):
    n, m, l, N = man["n"], man["m"], man["l"], man["N"]
    files = sorted(path.glob("traj_*.csv"))
    if len(files) != l:
        raise ChecksumError(f"manifest declares l={l} but {len(files)} trajectory files exist")
    Z = np.empty((l, n + m, N))
    Y = np.empty((l, n, N))
    for i in range(l):
        f = path / f"traj_{i}.csv"
        if not f.exists():
            raise ChecksumError(f"missing {f.name}")
        rows = f.read_text().strip().splitlines()
        if rows[0] != _csv_header(n, m) or len(rows) != N + 2:
            raise TruncationError(f"{f.name} has the wrong header or row count")
        X = np.empty((N + 1, n))
        U = np.empty((N, m))
        for k, line in enumerate(rows[1:]):
            cells = line.split(",")
            X[k] = [float(c) for c in cells[1 : 1 + n]]
            if k < N:
                U[k] = [float(c) for c in cells[1 + n : 1 + n + m]]
        Z[i] = np.vstack([X[:-1].T, U.T])
        Y[i] = X[1:].T
    return Z, Y


def load_batch(path) -> TrajectoryBatch:
    path = Path(path)
    try:
        man = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{path} has no manifest.json") from None
    if man.get("version") != DATASET_VERSION:
        raise FormatVersionError(f"dataset version {man.get('version')}, expected {DATASET_VERSION}")
    policy = ProbingPolicy(man["policy"]["L0"], man["policy"]["probe_cov"])
    binfile = path / "batch.bin"
    if binfile.exists():
        blob = binfile.read_bytes()
        Z, Y, seed = _unpack(blob)
        if zlib.crc32(blob) != man.get("crc32"):
            raise ChecksumError("batch.bin does not match the manifest checksum")
        if man.get("csv"):
            count = len(list(path.glob("traj_*.csv")))
            if count != man["l"]:
                raise ChecksumError(f"manifest declares l={man['l']} but {count} trajectory files exist")
    else:
        Z, Y = _load_csv(path, man)
        seed = man["seed"]
    if Z.shape != (man["l"], man["n"] + man["m"], man["N"]) or seed != man["seed"]:
        raise ChecksumError("manifest disagrees with the stored data")
    return TrajectoryBatch(Z=Z, Y=Y, seed=int(seed), policy=policy, fingerprint=man["fingerprint"], meta=man.get("meta", {}))
