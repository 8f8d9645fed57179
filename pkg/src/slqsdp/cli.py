"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data/rank error,
4 solver did not reach optimality, 5 oracle precondition failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import ProbingPolicy, load_batch, rank_check, save_batch, simulate_batch
from .errors import ConfigError, SlqError
from .experiments import (
    PRESETS,
    ExperimentConfig,
    load_config,
    load_report,
    run_compare,
    run_experiment,
    run_reproduce,
    write_run,
)
from .riccati import solve_dare
from .system import is_admissible, spectral_radius


def _common(p: argparse.ArgumentParser, preset_flag: bool = True) -> None:
    if preset_flag:
        p.add_argument("--preset", choices=sorted(PRESETS), help="built-in instance")
        p.add_argument("--instance", help="instance JSON file")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--l", type=int, dest="l")
    p.add_argument("--N", type=int, dest="N")
    p.add_argument("--r", type=float)
    p.add_argument("--trace-mode", dest="trace_mode")
    p.add_argument("--form", help="gram (default), aggregated or literal")
    p.add_argument("--feas-tol", type=float, dest="feas_tol")
    p.add_argument("--gap-tol", type=float, dest="gap_tol")
    p.add_argument("--probe-std", type=float, dest="probe_std")
    p.add_argument("--sigma", choices=["model", "zero"], default="model",
                   help="'zero' ignores the noise covariance in the data LMI")
    p.add_argument("--paper-scale", action="store_true", help="use the published trajectory count")
    p.add_argument("--out", help="output directory")


_OVERRIDES = ("seed", "l", "N", "r", "trace_mode", "form", "feas_tol", "gap_tol", "probe_std")


def _overrides(args) -> dict:
    out = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
    if getattr(args, "sigma", "model") == "zero":
        out["sigma_zero"] = True
    return out


def _config(args, mode: str) -> ExperimentConfig:
    ov = _overrides(args)
    ov["mode"] = mode
    if args.config:
        base = load_config(args.config).to_dict()
        base.update(ov)
        return ExperimentConfig(**base)
    if getattr(args, "preset", None):
        return ExperimentConfig.from_preset(args.preset, paper_scale=args.paper_scale, **ov)
    if getattr(args, "instance", None):
        try:
            doc = json.loads(Path(args.instance).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read instance {args.instance}: {exc}") from None
        return ExperimentConfig(instance=doc, **ov)
    raise ConfigError("give one of --config, --preset or --instance")


def _emit(doc: dict, out: str | None, name: str) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)
    print(text)


def cmd_dare(args) -> int:
    cfg = _config(args, "dare")
    inst = cfg.build_instance()
    sol = solve_dare(inst.system, inst.cost)
    L0 = np.zeros((inst.system.m, inst.system.n))
    doc = sol.to_dict()
    doc["rho_open"] = spectral_radius(inst.system.A)
    doc["zero_gain_admissible"] = is_admissible(inst.system, L0)
    doc["rho_closed"] = spectral_radius(inst.system.closed_loop(sol.L))
    _emit(doc, args.out, "riccati.json")
    return 0


def _run_single(args, mode: str) -> int:
    cfg = _config(args, mode)
    batch = load_batch(args.data) if getattr(args, "data", None) else None
    res = run_experiment(cfg, batch=batch)
    if args.out:
        write_run(res, args.out)
    print(res.report.to_json())
    return 0


def cmd_model_based(args) -> int:
    return _run_single(args, "model-based")


def cmd_model_free(args) -> int:
    return _run_single(args, "model-free")


def cmd_collect(args) -> int:
    if not args.out:
        raise ConfigError("collect needs --out")
    cfg = _config(args, "model-free")
    inst = cfg.build_instance()
    policy = ProbingPolicy.gaussian(inst.system.n, inst.system.m, cfg.probe_std)
    batch = simulate_batch(inst.system, inst.noise, inst.init, policy, cfg.l, cfg.N, cfg.seed, workers=args.workers)
    batch.meta.update({"instance": inst.to_dict(), "instance_fingerprint": inst.fingerprint()})
    save_batch(batch, args.out, csv=not args.no_csv)
    rc = rank_check(batch)
    print(json.dumps({
        "out": str(args.out),
        "fingerprint": batch.fingerprint,
        "l": batch.l,
        "N": batch.N,
        "rank_check": rc.passed,
        "first_rank_failure": rc.first_failure(),
    }, indent=2))
    return 0


def cmd_reproduce(args) -> int:
    ov = _overrides(args)
    ov["mode"] = args.mode
    study = run_reproduce(args.preset, ov, seeds=args.seeds, out=args.out,
                          paper_scale=args.paper_scale, workers=args.workers)
    if len(study.reports) == 1:
        print(study.reports[0].to_json())
    else:
        print(json.dumps(study.summary(), indent=2))
    return 0


def cmd_compare(args) -> int:
    doc = run_compare(load_report(args.report_a), load_report(args.report_b))
    _emit(doc, args.out, "comparison.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slqsdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dare", help="solve the discounted Riccati equation")
    _common(p)
    p.set_defaults(func=cmd_dare)

    p = sub.add_parser("model-based", help="solve the model-based SDP and compare to the oracle")
    _common(p)
    p.set_defaults(func=cmd_model_based)

    p = sub.add_parser("collect", help="simulate and save a trajectory batch")
    _common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-csv", action="store_true", help="write only the binary batch")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("model-free", help="data-driven SDP design")
    _common(p)
    p.add_argument("--data", help="load a saved batch instead of simulating")
    p.set_defaults(func=cmd_model_free)

    p = sub.add_parser("reproduce", help="run a built-in example end to end")
    p.add_argument("preset", choices=sorted(PRESETS))
    _common(p, preset_flag=False)
    p.add_argument("--mode", choices=["dare", "model-based", "model-free"], default="model-free")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("compare", help="compare two reports of the same instance")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) and args.command == "reproduce":
        print("error: reproduce takes a preset, not --config", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except SlqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)


if __name__ == "__main__":
    sys.exit(main())
