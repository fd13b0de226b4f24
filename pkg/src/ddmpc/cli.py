"""Experiment orchestration: data generation, runs, checks and comparisons.

A single JSON config describes the plant, the offline data, the controller
parameters and the run matrix.  Subcommands:

    ddmpc generate-data --config cfg.json --out data_dir
    ddmpc run           --config cfg.json --data data_dir --out runs_dir
    ddmpc compare       --a runs_dir/robust_seed1 --b runs_dir/robust_tec_seed1 \
                        --out report.json
    ddmpc check-pe      --data data_dir/data.csv --order 24

The environment variable DDMPC_SEED_OVERRIDE (an integer) replaces every
configured seed, for quick smoke runs.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys as _sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import closed_loop_cost, compare_runs
from .behavior import DataSet, check_pe, generate_dataset
from .lti import LtiSystem, cstr_example
from .mpc import ClosedLoopLog, MpcConfig, MpcVariant, closed_loop

SEED_OVERRIDE_ENV = "DDMPC_SEED_OVERRIDE"


class ConfigError(ValueError):
    pass


def _check_keys(section: dict, where: str, required: set, optional: set = frozenset()):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(section) - required - set(optional)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = required - set(section)
    if missing:
        raise ConfigError(f"missing keys in {where}: {sorted(missing)}")


def _vector(value, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ConfigError(f"{name} must be a scalar or flat list")
    return arr


def _build_system(section: dict) -> LtiSystem:
    if "builtin" in section:
        _check_keys(section, "system", {"builtin"})
        if section["builtin"] != "cstr":
            raise ConfigError(f"unknown builtin system {section['builtin']!r}")
        return cstr_example()
    _check_keys(section, "system", {"A", "B", "C", "D"})
    try:
        return LtiSystem(A=np.array(section["A"], dtype=float),
                         B=np.array(section["B"], dtype=float),
                         C=np.array(section["C"], dtype=float),
                         D=np.array(section["D"], dtype=float))
    except ValueError as exc:
        raise ConfigError(f"invalid system matrices: {exc}") from exc


@dataclass
class ExperimentConfig:
    system: LtiSystem
    N: int
    input_lower: np.ndarray
    input_upper: np.ndarray
    eps_bar: float
    data_seed: int
    mpc: dict
    T_sim: int
    variants: list
    seeds: list
    x0: Optional[np.ndarray]

    def mpc_config(self, variant: MpcVariant,
                   eps_bar: Optional[float] = None) -> MpcConfig:
        eps = self.eps_bar if eps_bar is None else eps_bar
        if variant is MpcVariant.NOMINAL:
            eps = 0.0
        return MpcConfig(
            L=self.mpc["L"], l=self.mpc["l"], Q=self.mpc["Q"], R=self.mpc["R"],
            u_min=self.mpc["u_min"], u_max=self.mpc["u_max"],
            u_setpoint=self.mpc["u_setpoint"],
            y_setpoint=self.mpc["y_setpoint"], variant=variant, eps_bar=eps,
            lambda_alpha_times_eps=self.mpc["lambda_alpha_times_eps"],
            lambda_sigma_over_eps=self.mpc["lambda_sigma_over_eps"],
            T_sim=self.T_sim)


def load_config(path) -> ExperimentConfig:
    """Parse and validate the experiment JSON; unknown keys are rejected."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    _check_keys(raw, "config", {"system", "data", "mpc", "run"})
    system = _build_system(raw["system"])

    data = raw["data"]
    _check_keys(data, "data", {"N", "input_box", "eps_bar", "seed"})
    box = data["input_box"]
    if not isinstance(box, list) or len(box) != 2:
        raise ConfigError("data.input_box must be [lower, upper]")
    lower, upper = _vector(box[0], "input lower"), _vector(box[1], "input upper")
    if np.any(lower > upper):
        raise ConfigError("data.input_box lower exceeds upper")
    eps_bar = float(data["eps_bar"])
    if eps_bar < 0:
        raise ConfigError("data.eps_bar must be >= 0")

    mpc_raw = raw["mpc"]
    _check_keys(mpc_raw, "mpc",
                {"L", "l", "Q", "R", "lambda_alpha_times_eps",
                 "lambda_sigma_over_eps", "u_min", "u_max", "setpoint"})
    setpoint = mpc_raw["setpoint"]
    _check_keys(setpoint, "mpc.setpoint", {"u", "y"})
    mpc = {
        "L": int(mpc_raw["L"]), "l": int(mpc_raw["l"]),
        "Q": np.atleast_2d(np.asarray(mpc_raw["Q"], dtype=float)),
        "R": np.atleast_2d(np.asarray(mpc_raw["R"], dtype=float)),
        "lambda_alpha_times_eps": float(mpc_raw["lambda_alpha_times_eps"]),
        "lambda_sigma_over_eps": float(mpc_raw["lambda_sigma_over_eps"]),
        "u_min": _vector(mpc_raw["u_min"], "mpc.u_min"),
        "u_max": _vector(mpc_raw["u_max"], "mpc.u_max"),
        "u_setpoint": _vector(setpoint["u"], "mpc.setpoint.u"),
        "y_setpoint": _vector(setpoint["y"], "mpc.setpoint.y"),
    }

    run = raw["run"]
    _check_keys(run, "run", {"T_sim", "variants", "seeds"}, {"x0"})
    variants = []
    for name in run["variants"]:
        try:
            variants.append(MpcVariant(name))
        except ValueError:
            raise ConfigError(
                f"unknown variant {name!r}; choose from "
                f"{[v.value for v in MpcVariant]}") from None
    seeds = [int(s) for s in run["seeds"]]
    all_seeds = seeds + [int(data["seed"])]
    if len(set(all_seeds)) != len(all_seeds):
        raise ConfigError("all referenced seeds must be distinct")
    x0 = _vector(run["x0"], "run.x0") if "x0" in run else None

    cfg = ExperimentConfig(
        system=system, N=int(data["N"]), input_lower=lower, input_upper=upper,
        eps_bar=eps_bar, data_seed=int(data["seed"]), mpc=mpc,
        T_sim=int(run["T_sim"]), variants=variants, seeds=seeds, x0=x0)

    override = os.environ.get(SEED_OVERRIDE_ENV)
    if override is not None:
        value = int(override)
        cfg.data_seed = value
        cfg.seeds = [value]
    return cfg


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate_data(config_path, out_dir) -> int:
    cfg = load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(cfg.system, cfg.N, cfg.input_lower,
                               cfg.input_upper, cfg.eps_bar, cfg.data_seed)
    order = cfg.mpc["L"] + cfg.mpc["l"] + cfg.system.n
    try:
        pe = check_pe(dataset.u_d, order)
    except ValueError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        print("hint: increase data.N or lower the horizon, then regenerate",
              file=_sys.stderr)
        return 1
    dataset.save(out / "data.csv")
    print(f"wrote {out / 'data.csv'} (N={dataset.N}, eps_bar={dataset.eps_bar})")
    print(f"persistency of excitation order {order}: "
          f"{'PASS' if pe.passes else 'FAIL'} "
          f"(min singular value {pe.min_singular_value:.6e})")
    if not pe.passes:
        print("hint: the sampled input is not exciting enough; "
              "pick another data seed or increase N", file=_sys.stderr)
        return 1
    return 0


def _summary(log: ClosedLoopLog, config: MpcConfig) -> dict:
    T = len(log) - 1
    cost = closed_loop_cost(log, (config.u_setpoint, config.y_setpoint),
                            config.Q, config.R, T)
    return {
        "cost": cost,
        "final_tracking_error": float(np.max(np.abs(log.y[-1] - config.y_setpoint))),
        "steps": len(log),
        "solver_stats": {
            "total_iterations": int(np.sum(log.iterations)),
            "max_iterations": int(np.max(log.iterations)) if len(log) else 0,
            "all_solved": bool(not log.aborted
                               and all(s == "solved" for s in log.status)),
        },
        "aborted": log.aborted,
        "abort_reason": log.abort_reason,
    }


def cmd_run(config_path, data_dir, out_dir) -> int:
    cfg = load_config(config_path)
    data_path = Path(data_dir) / "data.csv"
    if not data_path.exists():
        print(f"error: missing data file {data_path}", file=_sys.stderr)
        return 1
    dataset = DataSet.load(data_path)
    out = Path(out_dir)
    all_ok = True
    for variant in cfg.variants:
        mpc_cfg = cfg.mpc_config(variant)
        for seed in cfg.seeds:
            run_dir = out / f"{variant.value}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            log = closed_loop(cfg.system, dataset, mpc_cfg, seed=seed,
                              x0=cfg.x0, n_state=cfg.system.n)
            log.to_csv(run_dir / "log.csv")
            summary = _summary(log, mpc_cfg)
            _write_json(run_dir / "summary.json", summary)
            _write_json(run_dir / "meta.json", {
                "variant": variant.value,
                "seed": seed,
                "T_sim": cfg.T_sim,
                "eps_bar": mpc_cfg.eps_bar,
                "config_digest": mpc_cfg.digest(),
                "Q": mpc_cfg.Q.tolist(),
                "R": mpc_cfg.R.tolist(),
                "setpoint": {"u": mpc_cfg.u_setpoint.tolist(),
                             "y": mpc_cfg.y_setpoint.tolist()},
            })
            ok = summary["solver_stats"]["all_solved"]
            all_ok = all_ok and ok
            print(f"{run_dir}: cost={summary['cost']:.6g} "
                  f"final_err={summary['final_tracking_error']:.3e} "
                  f"{'ok' if ok else 'SOLVER FAILURE'}")
    return 0 if all_ok else 1


def _load_run(run_dir) -> tuple:
    run_dir = Path(run_dir)
    with open(run_dir / "meta.json") as fh:
        meta = json.load(fh)
    log = ClosedLoopLog.from_csv(run_dir / "log.csv", variant=meta["variant"],
                                 config_digest=meta["config_digest"],
                                 seed=meta["seed"])
    return log, meta


def cmd_compare(dir_a, dir_b, out_file) -> int:
    log_a, meta_a = _load_run(dir_a)
    log_b, meta_b = _load_run(dir_b)
    if len(log_a) != len(log_b):
        print(f"error: run lengths differ ({len(log_a)} vs {len(log_b)})",
              file=_sys.stderr)
        return 1
    for key in ("Q", "R", "setpoint"):
        if meta_a[key] != meta_b[key]:
            print(f"error: runs disagree on {key}", file=_sys.stderr)
            return 1
    setpoint = (np.asarray(meta_a["setpoint"]["u"], dtype=float),
                np.asarray(meta_a["setpoint"]["y"], dtype=float))
    T = len(log_a) - 1
    report = compare_runs(log_a, log_b, setpoint,
                          np.asarray(meta_a["Q"]), np.asarray(meta_a["R"]), T)
    out_file = Path(out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out_file, report.to_dict())

    merged = out_file.with_suffix(".csv")
    def group(base, count):
        return [base] if count == 1 else [f"{base}_{i}" for i in range(count)]
    with open(merged, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + group("u_a", log_a.m) + group("u_b", log_b.m)
                        + group("y_a", log_a.p) + group("y_b", log_b.p))
        for k in range(len(log_a)):
            row = [int(log_a.t[k])]
            row += [repr(float(v)) for v in log_a.u[k]]
            row += [repr(float(v)) for v in log_b.u[k]]
            row += [repr(float(v)) for v in log_a.y[k]]
            row += [repr(float(v)) for v in log_b.y[k]]
            writer.writerow(row)
    print(f"cost_a={report.cost_a:.6g} cost_b={report.cost_b:.6g} "
          f"relative_gap={report.relative_gap:+.4%}")
    print(f"wrote {out_file} and {merged}")
    return 0


def cmd_check_pe(data_path, order: int) -> int:
    try:
        dataset = DataSet.load(Path(data_path))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load data file {data_path}: {exc}",
              file=_sys.stderr)
        return 2
    try:
        pe = check_pe(dataset.u_d, order)
    except ValueError as exc:
        print(f"FAIL (order {order}): {exc}")
        return 1
    print(f"{'PASS' if pe.passes else 'FAIL'} (order {order}, "
          f"min singular value {pe.min_singular_value:.6e})")
    return 0 if pe.passes else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ddmpc",
        description="Data-driven MPC experiments: generate data, run closed "
                    "loops, compare schemes.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="simulate the plant under a "
                         "persistently exciting input and store the dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)

    run = sub.add_parser("run", help="run the closed loop for each "
                         "(variant, seed) pair")
    run.add_argument("--config", required=True)
    run.add_argument("--data", required=True)
    run.add_argument("--out", required=True)

    cmp_ = sub.add_parser("compare", help="compare two finished runs")
    cmp_.add_argument("--a", required=True)
    cmp_.add_argument("--b", required=True)
    cmp_.add_argument("--out", required=True)

    pe = sub.add_parser("check-pe", help="check persistency of excitation "
                        "of a stored dataset")
    pe.add_argument("--data", required=True)
    pe.add_argument("--order", required=True, type=int)

    args = parser.parse_args(argv)
    try:
        if args.command == "generate-data":
            return cmd_generate_data(args.config, args.out)
        if args.command == "run":
            return cmd_run(args.config, args.data, args.out)
        if args.command == "compare":
            return cmd_compare(args.a, args.b, args.out)
        if args.command == "check-pe":
            return cmd_check_pe(args.data, args.order)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
