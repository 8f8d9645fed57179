"""End-to-end pipelines, the two built-in presets, and report handling."""

from __future__ import annotations

import copy
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import ProbingPolicy, TrajectoryBatch, mc_average, propagate_mean, require_rank, simulate_batch
from .errors import ConfigError, SlqError, StageError, ValidationError
from .riccati import cost_of_gain, optimal_cost, solve_dare
from .sdp import FORMS, TRACE_MODES, DualCertificate, SolverSettings, solve_model_based, solve_model_free
from .system import Instance, instance_from_dict, is_admissible, spectral_radius

MODES = ("dare", "model-based", "model-free")

_EX1_AC = [
    [-0.4125, -0.0248, 0.0741, 0.0089, 0.0, 0.0],
    [101.5873, -7.2651, 2.7608, 2.8068, 0.0, 0.0],
    [0.0704, 0.0085, -0.0741, -0.0089, 0.0, 0.0200],
    [0.0878, 0.2672, 0.0, -0.3674, 0.0044, 0.3962],
    [-1.8414, 0.0990, 0.0, 0.0, -0.0343, -0.0330],
    [0.0, 0.0, 0.0, -359.0000, 187.5364, -87.0316],
]
_EX1_BC = [
    [-0.0042, 0.0064],
    [-1.0360, 1.5849],
    [0.0042, 0.0],
    [0.1261, 0.0],
    [0.0, -0.0168],
    [0.0, 0.0],
]
_EX2_A = [
    [0.3, 0.4, 0.2, 0.2],
    [0.2, 0.3, 0.3, 0.2],
    [0.2, 0.2, 0.4, 0.4],
    [0.4, 0.2, 0.2, 0.4],
]
_EX2_Q = [
    [3.0, -1.0, 0.0, -1.0],
    [-1.0, 3.0, -1.0, 0.0],
    [0.0, -1.0, 3.0, -1.0],
    [-1.0, 0.0, -1.0, 3.0],
]


def _diag(values) -> list[list[float]]:
    return np.diag(np.asarray(values, dtype=float)).tolist()


@dataclass(frozen=True)
class Preset:
    instance: dict
    l: int
    N: int
    published_l: int
    probe_std: float
    # published reference values, kept for reports only
    L_star: list
    L_hat: list
    error: float


PRESETS: dict[str, Preset] = {
    "example1": Preset(
        instance={
            "Ac": _EX1_AC,
            "Bc": _EX1_BC,
            "T": 0.1,
            "Q": _diag([1, 1, 0.1, 0.1, 0.1, 0.1]),
            "R": _diag([1, 1]),
            "r": 0.8,
            "Sigma": _diag([0.001] * 6),
            "mu0": [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            "Sigma0": _diag([5.0] * 6),
        },
        l=1000,
        N=10,
        published_l=100000,
        probe_std=50.0,
        L_star=[
            [0.7446, 0.0328, 0.0271, -0.0057, 0.0146, 0.0],
            [-1.3011, -0.0528, -0.0496, -0.0404, 0.0015, -0.0002],
        ],
        L_hat=[
            [0.7448, 0.0328, 0.0270, -0.0056, 0.0147, 0.0],
            [-1.3009, -0.0528, -0.0497, -0.0405, 0.0015, -0.0002],
        ],
        error=3.3123e-4,
    ),
    "example2": Preset(
        instance={
            "A": _EX2_A,
            "B": _diag([1, 1, 1, 1]),
            "Q": _EX2_Q,
            "R": _diag([1, 1, 1, 1]),
            "r": 0.8,
            "Sigma": _diag([0.01] * 4),
            "mu0": [1.0, 2.0, 3.0, 4.0],
            "Sigma0": _diag([5.0] * 4),
        },
        l=100,
        N=9,
        published_l=100,
        probe_std=50.0,
        L_star=[
            [-0.1756, -0.2506, -0.1089, -0.1039],
            [-0.1084, -0.1744, -0.1743, -0.1028],
            [-0.1046, -0.1087, -0.2504, -0.2453],
            [-0.2529, -0.1062, -0.1062, -0.2476],
        ],
        L_hat=[
            [-0.1757, -0.2506, -0.1089, -0.1038],
            [-0.1085, -0.1744, -0.1743, -0.1027],
            [-0.1046, -0.1087, -0.2503, -0.2453],
            [-0.2530, -0.1062, -0.1061, -0.2475],
        ],
        error=1.4306e-4,
    ),
}


def preset_document(name: str) -> dict:
    """Instance document of a preset, in the JSON instance schema."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name].instance)


@dataclass
class ExperimentConfig:
    instance: dict
    preset: str | None = None
    mode: str = "model-free"
    l: int = 100
    N: int = 10
    seed: int = 0
    form: str = "gram"
    trace_mode: str = "m-sub"
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    probe_std: float = 1.0
    sigma_zero: bool = False
    r: float | None = None
    post_steps: int = 20

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.form not in FORMS:
            raise ConfigError(f"form must be one of {FORMS}")
        if self.trace_mode not in TRACE_MODES:
            raise ConfigError(f"trace-mode must be one of {TRACE_MODES}")
        if self.l < 1 or self.N < 1:
            raise ConfigError("l and N must be positive")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.probe_std < 0 or self.feas_tol <= 0 or self.gap_tol <= 0:
            raise ConfigError("probe-std must be >= 0 and tolerances > 0")
        if self.r is not None and not (0.0 < self.r < 1.0):
            raise ConfigError("r must lie in (0, 1)")

    @classmethod
    def from_preset(cls, name: str, paper_scale: bool = False, **overrides) -> "ExperimentConfig":
        p = PRESETS.get(name)
        if p is None:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        base = dict(
            instance=preset_document(name),
            preset=name,
            l=p.published_l if paper_scale else p.l,
            N=p.N,
            probe_std=p.probe_std,
        )
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)} | {"instance_file", "paper_scale"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        paper_scale = bool(doc.pop("paper_scale", False))
        if "instance_file" in doc:
            path = Path(doc.pop("instance_file"))
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            try:
                doc["instance"] = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read instance file {path}: {exc}") from None
        preset = doc.pop("preset", None)
        if preset is not None and "instance" not in doc:
            return cls.from_preset(preset, paper_scale=paper_scale, **doc)
        if "instance" not in doc:
            raise ConfigError("config needs one of 'preset', 'instance' or 'instance_file'")
        try:
            return cls(preset=preset, **doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def build_instance(self) -> Instance:
        doc = dict(self.instance)
        if self.r is not None:
            doc["r"] = self.r
        try:
            return instance_from_dict(doc)
        except ValidationError as exc:
            raise ConfigError(f"invalid instance: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(doc, base_dir=path.parent)


def derive_seed(master: int, k: int) -> int:
    """Seed of run ``k`` in a multi-seed study: first 64 bits of ``SeedSequence([master, k])``."""
    return int(np.random.SeedSequence([int(master), int(k)]).generate_state(1, np.uint64)[0])


@dataclass
class ExperimentReport:
    mode: str
    L_star: list
    L_hat: list
    frobenius_error: float
    max_entry_error: float
    rho_open: float
    rho_star: float
    rho_hat: float
    admissible: bool
    J_star: float
    J_hat: float | None
    instance_fingerprint: str
    dataset_fingerprint: str | None
    seed: int | None
    solver: dict | None
    config: dict
    reference: dict | None = None
    files: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        names = {f.name for f in fields(cls)}
        missing = names - set(doc) - {"reference", "files"}
        if missing:
            raise ValidationError(f"report is missing fields {sorted(missing)}")
        return cls(**{k: v for k, v in doc.items() if k in names})

    def recomputed_error(self) -> float:
        return float(np.linalg.norm(np.asarray(self.L_star) - np.asarray(self.L_hat)))


def load_report(path) -> ExperimentReport:
    try:
        return ExperimentReport.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {path}: {exc}") from None


@dataclass
class RunResult:
    report: ExperimentReport
    batch: TrajectoryBatch | None
    averages: np.ndarray  # rows: (phase, k, x...)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except SlqError as exc:
        raise StageError(name, exc) from exc
    except np.linalg.LinAlgError as exc:
        raise StageError(name, exc) from exc


def run_experiment(cfg: ExperimentConfig, batch: TrajectoryBatch | None = None, workers: int = 1) -> RunResult:
    """collect -> rank check -> build/solve -> extract -> evaluate against the oracle."""
    inst = _stage("instance", cfg.build_instance)
    sys, cost = inst.system, inst.cost
    oracle = _stage("oracle", solve_dare, sys, cost)
    settings = SolverSettings(feas_tol=cfg.feas_tol, gap_tol=cfg.gap_tol)
    solver = None

    if cfg.mode == "dare":
        L_hat = oracle.L
    elif cfg.mode == "model-based":
        sol = _stage("solve", solve_model_based, sys, cost, None, settings)
        _stage("solve", sol.require_optimal)
        L_hat = _stage("extract", DualCertificate.from_solution(sol).extract_gain)
        solver = _solver_summary(sol)
    else:
        if batch is None:
            policy = ProbingPolicy.gaussian(sys.n, sys.m, cfg.probe_std)
            batch = _stage(
                "collect", simulate_batch, sys, inst.noise, inst.init, policy, cfg.l, cfg.N, cfg.seed, workers
            )
        _stage("rank-check", require_rank, batch)
        # sigma_zero keeps the simulated noise but leaves it out of the data LMI
        Sigma = np.zeros_like(inst.noise.Sigma) if cfg.sigma_zero else inst.noise.Sigma
        sol = _stage("solve", solve_model_free, batch, cost, Sigma, cfg.form, cfg.trace_mode, settings)
        _stage("solve", sol.require_optimal)
        L_hat = _stage("extract", DualCertificate.from_solution(sol).extract_gain)
        solver = _solver_summary(sol)

    L_star = oracle.L
    admissible = is_admissible(sys, L_hat)
    J_hat = cost_of_gain(sys, cost, inst.init, inst.noise, L_hat).J if admissible else None
    ref = None
    if cfg.preset in PRESETS:
        p = PRESETS[cfg.preset]
        ref = {"L_star": p.L_star, "L_hat": p.L_hat, "frobenius_error": p.error, "l": p.published_l}
    report = ExperimentReport(
        mode=cfg.mode,
        L_star=L_star.tolist(),
        L_hat=np.asarray(L_hat).tolist(),
        frobenius_error=float(np.linalg.norm(L_star - L_hat)),
        max_entry_error=float(np.max(np.abs(L_star - L_hat))),
        rho_open=spectral_radius(sys.A),
        rho_star=spectral_radius(sys.closed_loop(L_star)),
        rho_hat=spectral_radius(sys.closed_loop(L_hat)),
        admissible=bool(admissible),
        J_star=optimal_cost(oracle, inst.init, inst.noise, cost.r),
        J_hat=J_hat,
        instance_fingerprint=inst.fingerprint(),
        dataset_fingerprint=batch.fingerprint if batch is not None else None,
        seed=cfg.seed if cfg.mode == "model-free" else None,
        solver=solver,
        config=cfg.to_dict(),
        reference=ref,
    )
    return RunResult(report, batch, _averages(sys, inst, batch, L_hat, cfg.post_steps))


def _solver_summary(sol) -> dict:
    return {
        "status": sol.status,
        "backend_status": sol.backend_status,
        "gap": sol.gap,
        "objective": sol.objective,
        "iterations": sol.iterations,
        "solve_time": sol.solve_time,
        "min_eigenvalues": sol.min_eigenvalues,
    }


def _averages(sys, inst: Instance, batch, L_hat, post_steps: int) -> np.ndarray:
    """Rows ``(phase, k, x_1..x_n)``: phase 0 is data collection, 1 is closed loop under ``L_hat``."""
    rows = []
    if batch is not None:
        avg = mc_average(batch)
        rows += [[0, k, *x] for k, x in enumerate(avg)]
        start, k0 = avg[-1], batch.N
    else:
        start, k0 = inst.init.mu0, 0
    post = propagate_mean(sys.closed_loop(L_hat), start, post_steps)
    rows += [[1, k0 + k, *x] for k, x in enumerate(post)]
    return np.asarray(rows, dtype=float)


_PLOT_SCRIPT = '''"""Plot the averaged state trajectories written next to this script."""
import csv
import sys
from pathlib import Path

import matplotlib.pyplot as plt

here = Path(__file__).resolve().parent
with open(here / "trajectory_average.csv") as fh:
    rows = list(csv.DictReader(fh))
states = [c for c in rows[0] if c.startswith("x")]
fig, ax = plt.subplots(figsize=(8, 3))
for phase, style in (("collect", "-"), ("closed-loop", "--")):
    sel = [r for r in rows if r["phase"] == phase]
    for j, s in enumerate(states):
        ax.plot([int(r["k"]) for r in sel], [float(r[s]) for r in sel], style, color=f"C{j}",
                label=s if phase == "collect" or not any(r["phase"] == "collect" for r in rows) else None)
ax.set_xlabel("k")
ax.set_ylabel("mean state")
ax.legend(ncol=len(states), fontsize="small")
fig.tight_layout()
out = sys.argv[1] if len(sys.argv) > 1 else str(here / "trajectory_average.png")
fig.savefig(out, dpi=150)
'''


def write_run(result: RunResult, out) -> list[str]:
    """Write report.json, trajectory_average.csv and the plot script into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    avg = result.averages
    n = avg.shape[1] - 2
    lines = ["phase,k," + ",".join(f"x{j + 1}" for j in range(n))]
    for row in avg:
        phase = "collect" if row[0] == 0 else "closed-loop"
        lines.append(",".join([phase, str(int(row[1])), *(repr(float(v)) for v in row[2:])]))
    (out / "trajectory_average.csv").write_text("\n".join(lines) + "\n")
    (out / "plot_trajectory_average.py").write_text(_PLOT_SCRIPT)
    files = ["report.json", "trajectory_average.csv", "plot_trajectory_average.py"]
    result.report.files = files
    (out / "report.json").write_text(result.report.to_json())
    return files


@dataclass
class Study:
    reports: list[ExperimentReport]
    seeds: list[int]

    def summary(self) -> dict:
        errs = [r.frobenius_error for r in self.reports]
        return {
            "runs": len(errs),
            "seeds": self.seeds,
            "frobenius_errors": errs,
            "median_frobenius_error": float(np.median(errs)),
            "max_frobenius_error": float(np.max(errs)),
            "all_admissible": all(r.admissible for r in self.reports),
            "instance_fingerprint": self.reports[0].instance_fingerprint,
        }


def run_reproduce(
    preset: str,
    overrides: dict | None = None,
    seeds: int = 1,
    out=None,
    paper_scale: bool = False,
    workers: int = 1,
) -> Study:
    """Run a preset once or over ``seeds`` derived seeds.

    With ``seeds > 1`` run ``k`` uses ``derive_seed(seed, k)`` and writes to
    ``out/run_<k>``; a ``summary.json`` with the median error is added.
    """
    overrides = dict(overrides or {})
    base = ExperimentConfig.from_preset(preset, paper_scale=paper_scale, **overrides)
    if seeds < 1:
        raise ConfigError("seeds must be >= 1")
    run_seeds = [base.seed] if seeds == 1 else [derive_seed(base.seed, k) for k in range(seeds)]
    cfgs = [ExperimentConfig(**{**base.to_dict(), "seed": s}) for s in run_seeds]
    if base.mode != "model-free":
        cfgs, run_seeds = cfgs[:1], run_seeds[:1]

    def one(k_cfg):
        k, cfg = k_cfg
        res = run_experiment(cfg)
        if out is not None:
            write_run(res, Path(out) if len(cfgs) == 1 else Path(out) / f"run_{k}")
        return res.report

    if workers > 1 and len(cfgs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(one, enumerate(cfgs)))
    else:
        reports = [one(kc) for kc in enumerate(cfgs)]
    study = Study(reports, run_seeds)
    if out is not None and len(cfgs) > 1:
        (Path(out) / "summary.json").write_text(json.dumps(study.summary(), indent=2))
    return study


def run_compare(a: ExperimentReport, b: ExperimentReport) -> dict:
    """Side-by-side comparison; refuses reports of different instances."""
    if a.instance_fingerprint != b.instance_fingerprint:
        raise ConfigError(
            f"reports describe different instances ({a.instance_fingerprint} vs {b.instance_fingerprint})"
        )
    La, Lb = np.asarray(a.L_hat), np.asarray(b.L_hat)
    delta = Lb - La
    flags = [f"{tag} gain is not admissible" for tag, r in (("a", a), ("b", b)) if not r.admissible]
    return {
        "instance_fingerprint": a.instance_fingerprint,
        "modes": [a.mode, b.mode],
        "L_hat": [a.L_hat, b.L_hat],
        "delta_L_hat": delta.tolist(),
        "max_abs_delta": float(np.max(np.abs(delta))),
        "frobenius_delta": float(np.linalg.norm(delta)),
        "frobenius_error": [a.frobenius_error, b.frobenius_error],
        "rho_hat": [a.rho_hat, b.rho_hat],
        "admissible": [a.admissible, b.admissible],
        "solver": [a.solver, b.solver],
        "flags": flags,
    }


_VOLATILE = {"solve_time", "files"}


def reports_match(a: ExperimentReport, b: ExperimentReport, tol: float = 1e-9) -> bool:
    """Field-wise comparison ignoring wall-clock timings."""

    def close(x, y) -> bool:
        if isinstance(x, dict) and isinstance(y, dict):
            keys = (set(x) | set(y)) - _VOLATILE
            return all(close(x.get(k), y.get(k)) for k in keys)
        if isinstance(x, (list, tuple)) and isinstance(y, (list, tuple)):
            return len(x) == len(y) and all(close(p, q) for p, q in zip(x, y))
        if isinstance(x, bool) or isinstance(y, bool) or x is None or y is None or isinstance(x, str):
            return x == y
        if isinstance(x, (int, float)) and isinstance(y, (int, float)):
            if math.isnan(x) and math.isnan(y):
                return True
            return abs(x - y) <= tol * max(1.0, abs(x), abs(y))
        return x == y

    return close(a.to_dict(), b.to_dict())
