"""Command-line entry point: ``pertpinn <command> [options]``.

Commands: ``train``, ``solve``, ``sweep-p``, ``sweep-eps``, ``compare`` and
``reference``. Every option may also be given in a JSON file passed with
``--config``; flags on the command line win. Exit codes are 0 on success, 1
on a numerical failure and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import statistics
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import kernels
from .cascade import build_plan
from .export import write_field_csv, write_rows_csv
from .grid import Grid, GridField
from .network import MultiHeadCheckpoint, load_checkpoint, save_checkpoint
from .presets import PRESETS, get_preset
from .problem import PdeProblem, validate_problem
from .reference import MolConfig, StiffnessError, relative_error, solve_reference
from .training import TrainConfig, TrainingDiverged, train
from .transfer import cached_latent_system, assemble_latent_system, solve_cascade, transfer_timing

log = logging.getLogger("pertpinn")

SCHEMA_VERSION = 1
SWEEP_P_COLUMNS = ["p", "epsilon", "relative_l2", "max_abs", "adapt_seconds", "reference_seconds"]
SWEEP_EPS_COLUMNS = ["case", "epsilon", "p", "relative_l2", "max_abs", "adapt_seconds", "reference_seconds"]
LOSS_COLUMNS = ["iteration", "total", "pde", "ic", "bc"]
DEFAULT_EPS = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class ConfigError(Exception):
    """Bad usage or configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    command: str
    preset: str | None = None
    problem: str | None = None
    checkpoint: str | None = None
    out: str = "."
    seed: int = 0
    p: int = 10
    p_range: str = "0:10"
    eps: list[float] = field(default_factory=lambda: list(DEFAULT_EPS))
    cases: list[str] | None = None
    epsilon: float | None = None
    forcing: str | None = None
    grid_nx: int = 101
    grid_nt: int = 101
    ref_nx: int = 201
    ref_rtol: float = 1e-8
    hires_nx: int = 401
    repeats: int = 5
    workers: int = 1
    cache_dir: str | None = None
    no_cache: bool = False
    training: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.problem is not None and not Path(self.problem).is_file():
            raise ConfigError(f"problem file not found: {self.problem}")
        if self.checkpoint is not None and self.command != "train" and not Path(self.checkpoint).is_file():
            raise ConfigError(f"checkpoint not found: {self.checkpoint}")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.p < 0:
            raise ConfigError("p must be >= 0")
        for e in self.eps + ([self.epsilon] if self.epsilon is not None else []):
            if not (0.0 <= e < 1.0):
                raise ConfigError(f"epsilon {e} outside [0, 1)")
        if min(self.grid_nx, self.grid_nt) < 2:
            raise ConfigError("output grid needs at least 2 nodes per axis")
        if self.ref_nx < 16 or self.hires_nx < 16:
            raise ConfigError("reference grids need at least 16 nodes")
        if self.repeats < 1 or self.workers < 1:
            raise ConfigError("repeats and workers must be >= 1")

    def p_values(self) -> list[int]:
        return parse_p_range(self.p_range)


def parse_p_range(text: str) -> list[int]:
    """``"0:10"`` (inclusive), ``"3"`` or ``"0,2,5"``."""
    text = str(text).strip()
    try:
        if ":" in text:
            lo, hi = (int(v) for v in text.split(":"))
            values = list(range(lo, hi + 1))
        else:
            values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad p range {text!r}") from None
    if not values or min(values) < 0:
        raise ConfigError(f"bad p range {text!r}")
    return sorted(set(values))


def dedupe_eps(values: Sequence[float]) -> list[float]:
    seen: list[float] = []
    for v in values:
        if v in seen:
            continue
        seen.append(float(v))
    if len(seen) != len(values):
        warnings.warn("duplicate epsilon values removed", stacklevel=2)
    return sorted(seen)


def _float_list(text: str | Sequence[float]) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad number list {text!r}") from None


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    base: dict[str, Any] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            base = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    base = {k.replace("-", "_"): v for k, v in base.items()}
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(base) - known - {"command"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base.pop("command", None)
    cfg = ExperimentConfig(command=args.command, **base)
    for name in known - {"command", "training"}:
        v = getattr(args, name, None)
        if v is None or v is False:
            continue
        setattr(cfg, name, v)
    cfg.eps = dedupe_eps(_float_list(cfg.eps))
    if isinstance(cfg.cases, str):
        cfg.cases = [c for c in cfg.cases.split(",") if c]
    train_flags = {k: getattr(args, k, None) for k in ("iterations", "lr", "heads", "width", "layers")}
    for k, v in train_flags.items():
        if v is not None:
            cfg.training.setdefault("architecture", {})
            if k in ("width", "layers"):
                cfg.training["architecture"][k] = v
            else:
                cfg.training[k] = v
    cfg.validate()
    return cfg


def load_problem(cfg: ExperimentConfig) -> PdeProblem:
    if cfg.problem and cfg.preset:
        raise ConfigError("give either --preset or --problem, not both")
    if cfg.problem:
        try:
            problem = PdeProblem.from_json(Path(cfg.problem).read_text())
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{cfg.problem}: {exc}") from None
    elif cfg.preset:
        problem = get_preset(cfg.preset)
    else:
        raise ConfigError("a problem is required (--preset or --problem)")
    if cfg.epsilon is not None:
        problem = problem.with_epsilon(cfg.epsilon)
    if cfg.forcing is not None:
        problem = problem.with_forcing(cfg.forcing)
    issues = validate_problem(problem)
    if issues:
        raise ConfigError("invalid problem: " + "; ".join(issues))
    return problem


def load_matching_checkpoint(cfg: ExperimentConfig, problem: PdeProblem) -> MultiHeadCheckpoint:
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    ckpt = load_checkpoint(cfg.checkpoint)
    if ckpt.operator != problem.operator:
        raise ConfigError(f"checkpoint operator {ckpt.operator.to_dict()} does not match "
                          f"problem operator {problem.operator.to_dict()}")
    if ckpt.domain != problem.domain:
        raise ConfigError(f"checkpoint domain {ckpt.domain.to_dict()} does not match "
                          f"problem domain {problem.domain.to_dict()}")
    return ckpt


def _grid(cfg: ExperimentConfig, problem: PdeProblem) -> Grid:
    return Grid(cfg.grid_nx, cfg.grid_nt, problem.domain)


def _system(cfg: ExperimentConfig, ckpt: MultiHeadCheckpoint, problem: PdeProblem, grid: Grid):
    if cfg.no_cache:
        return assemble_latent_system(ckpt, problem, grid=grid), False
    return cached_latent_system(ckpt, problem, grid=grid, directory=cfg.cache_dir)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# reference solves (picklable for the worker pool)


def _reference_job(job: tuple[str, int, int, int, float]) -> tuple[np.ndarray, float]:
    problem_json, n_x, gx, gt, rtol = job
    problem = PdeProblem.from_json(problem_json)
    grid = Grid(gx, gt, problem.domain)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref = solve_reference(problem, MolConfig(n_x=n_x, rtol=rtol, atol=rtol, grid=grid))
    return np.array(ref.values), time.perf_counter() - t0


def _pool_map(fn: Callable, jobs: list, workers: int) -> list:
    """Map in order; ``workers > 1`` uses a process pool."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _reference(cfg: ExperimentConfig, problem: PdeProblem, grid: Grid, n_x: int | None = None,
               rtol: float | None = None) -> tuple[GridField, float]:
    values, seconds = _reference_job((problem.to_json(None), n_x or cfg.ref_nx, grid.n_x, grid.n_t,
                                      rtol or cfg.ref_rtol))
    return GridField(values, grid), seconds


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig) -> int:
    problem = load_problem(cfg)
    tcfg = TrainConfig.from_json_dict({"seed": cfg.seed, **cfg.training})
    out = _out_dir(cfg)
    ck_path = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.json"
    config_hash = hashlib.sha256(json.dumps({"problem": problem.to_dict(), "training": tcfg.to_json_dict()},
                                            sort_keys=True).encode()).hexdigest()[:16]
    t0 = time.perf_counter()
    try:
        ckpt, history = train(problem, None, tcfg, progress_every=max(1, tcfg.iterations // 20))
    except TrainingDiverged as exc:
        _write_loss(out / "loss.csv", exc.history)
        _write_json(out / "train_meta.json", {
            "schema_version": SCHEMA_VERSION, "status": "diverged", "message": str(exc),
            "seed": tcfg.seed, "config_hash": config_hash, "iterations_completed": len(exc.history),
        })
        raise
    seconds = time.perf_counter() - t0
    save_checkpoint(ckpt, ck_path)
    _write_loss(out / "loss.csv", history)
    _write_json(out / "train_meta.json", {
        "schema_version": SCHEMA_VERSION, "status": "ok", "seed": tcfg.seed, "config_hash": config_hash,
        "final_loss": float(history[-1, 0]) if len(history) else None, "iterations": tcfg.iterations,
        "checkpoint": str(ck_path), "checkpoint_digest": ckpt.digest(), "train_seconds": seconds,
        "backend": kernels.backend(), "training": tcfg.to_json_dict(),
    })
    print(f"checkpoint {ck_path}  final loss {history[-1, 0]:.4e}  {seconds:.1f}s")
    return 0


def _write_loss(path: Path, history: np.ndarray) -> None:
    rows = [[i + 1, *map(float, h)] for i, h in enumerate(history)]
    write_rows_csv(path, LOSS_COLUMNS, rows)


def cmd_solve(cfg: ExperimentConfig) -> int:
    problem = load_problem(cfg)
    ckpt = load_matching_checkpoint(cfg, problem)
    grid = _grid(cfg, problem)
    system, hit = _system(cfg, ckpt, problem, grid)
    plan = build_plan(problem.perturbation, cfg.p)
    t0 = time.perf_counter()
    result = solve_cascade(system, problem, plan, grid)
    adapt = time.perf_counter() - t0
    ref, ref_seconds = _reference(cfg, problem, grid)
    report = relative_error(result.solution, ref)
    out = _out_dir(cfg)
    write_field_csv(out / "solution.csv", result.solution, result.orders)
    payload = {
        "schema_version": SCHEMA_VERSION, "problem": problem.name, "p": cfg.p, "epsilon": problem.epsilon,
        **report.to_dict(), "adapt_seconds": adapt, "reference_seconds": ref_seconds,
        "assembly_seconds": system.assembly_seconds, "cache_hit": hit,
    }
    _write_json(out / "error.json", payload)
    print(f"{problem.name or 'problem'} p={cfg.p} eps={problem.epsilon}: "
          f"relative L2 {report.relative_l2:.4e}  max abs {report.max_abs:.4e}")
    return 0


def cmd_sweep_p(cfg: ExperimentConfig) -> int:
    problem = load_problem(cfg)
    ckpt = load_matching_checkpoint(cfg, problem)
    grid = _grid(cfg, problem)
    system, _ = _system(cfg, ckpt, problem, grid)
    ref, ref_seconds = _reference(cfg, problem, grid)
    rows = []
    for p in cfg.p_values():
        plan = build_plan(problem.perturbation, p)
        t0 = time.perf_counter()
        result = solve_cascade(system, problem, plan, grid)
        adapt = time.perf_counter() - t0
        rep = relative_error(result.solution, ref)
        rows.append([p, problem.epsilon, rep.relative_l2, rep.max_abs, adapt, ref_seconds])
    out = _out_dir(cfg)
    write_rows_csv(out / "sweep_p.csv", SWEEP_P_COLUMNS, rows)
    for r in rows:
        print(f"p={r[0]:3d}  relative L2 {r[2]:.4e}")
    return 0


def cmd_sweep_eps(cfg: ExperimentConfig) -> int:
    if cfg.preset or cfg.problem:
        problems = [load_problem(cfg)]
    else:
        names = cfg.cases or ["eps-f0", "eps-f1"]
        problems = []
        for n in names:
            if n not in PRESETS:
                raise ConfigError(f"unknown preset {n!r}")
            problems.append(load_problem(ExperimentConfig(command=cfg.command, preset=n, forcing=cfg.forcing)))
    first = problems[0]
    ckpt = load_matching_checkpoint(cfg, first)
    grid = _grid(cfg, first)
    rows = []
    for problem in problems:
        if problem.operator != ckpt.operator or problem.domain != ckpt.domain:
            raise ConfigError(f"case {problem.name} does not match the checkpoint")
        system, _ = _system(cfg, ckpt, problem, grid)
        plan = build_plan(problem.perturbation, cfg.p)
        variants = [problem.with_epsilon(e) for e in cfg.eps]
        jobs = [(v.to_json(None), cfg.ref_nx, grid.n_x, grid.n_t, cfg.ref_rtol) for v in variants]
        refs = _pool_map(_reference_job, jobs, cfg.workers)
        for eps, v, (ref_values, ref_seconds) in zip(cfg.eps, variants, refs):
            t0 = time.perf_counter()
            result = solve_cascade(system, v, plan, grid)
            adapt = time.perf_counter() - t0
            rep = relative_error(result.solution, GridField(ref_values, grid))
            rows.append([problem.name, eps, cfg.p, rep.relative_l2, rep.max_abs, adapt, ref_seconds])
    out = _out_dir(cfg)
    write_rows_csv(out / "sweep_eps.csv", SWEEP_EPS_COLUMNS, rows)
    for r in rows:
        print(f"{r[0]:>8s} eps={r[1]:<5g} relative L2 {r[3]:.4e}")
    return 0


def cmd_compare(cfg: ExperimentConfig) -> int:
    problem = load_problem(cfg)
    ckpt = load_matching_checkpoint(cfg, problem)
    grid = _grid(cfg, problem)
    t0 = time.perf_counter()
    system, hit = _system(cfg, ckpt, problem, grid)
    assembly_wall = time.perf_counter() - t0
    plan = build_plan(problem.perturbation, cfg.p)
    timing = transfer_timing(system, problem, plan, grid, repeats=cfg.repeats)
    result = solve_cascade(system, problem, plan, grid)
    ref_runs = [_reference(cfg, problem, grid) for _ in range(cfg.repeats)]
    ref = ref_runs[0][0]
    ref_seconds = statistics.median(s for _, s in ref_runs)
    hires, hires_seconds = _reference(cfg, problem, grid, n_x=cfg.hires_nx, rtol=min(cfg.ref_rtol, 1e-10))
    pert = relative_error(result.solution, hires)
    classical = relative_error(ref, hires)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "problem": problem.name, "p": cfg.p, "epsilon": problem.epsilon,
        "latent_dim": system.latent_dim, "grid": [grid.n_x, grid.n_t],
        "one_time": {"assembly_seconds": system.assembly_seconds, "assembly_wall_seconds": assembly_wall,
                     "cache_hit": hit},
        "per_task": {"adapt_seconds": timing["adapt_seconds"], "adapt_runs": timing["adapt_runs"],
                     "reference_seconds": ref_seconds, "repeats": cfg.repeats},
        "accuracy": {"perturbative": pert.to_dict(), "reference": classical.to_dict(),
                     "hires_nx": cfg.hires_nx, "hires_seconds": hires_seconds},
        "backend": kernels.backend(),
    }
    out = _out_dir(cfg)
    _write_json(out / "compare.json", payload)
    text = format_compare(payload)
    (out / "compare.txt").write_text(text)
    print(text, end="")
    return 0


COMPARE_SCHEMA = {
    "schema_version": int, "problem": str, "p": int, "epsilon": float, "latent_dim": int, "grid": list,
    "one_time": {"assembly_seconds": float, "assembly_wall_seconds": float, "cache_hit": bool},
    "per_task": {"adapt_seconds": float, "adapt_runs": list, "reference_seconds": float, "repeats": int},
    "accuracy": {"perturbative": dict, "reference": dict, "hires_nx": int, "hires_seconds": float},
    "backend": str,
}


def check_schema(payload: dict, schema: dict = COMPARE_SCHEMA, where: str = "") -> None:
    """Raise ``ValueError`` if ``payload`` misses a key or has a wrong type."""
    for key, kind in schema.items():
        if key not in payload:
            raise ValueError(f"missing key {where}{key}")
        value = payload[key]
        if isinstance(kind, dict):
            check_schema(value, kind, f"{where}{key}.")
        elif kind is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ValueError(f"{where}{key}: expected a number")
        elif not isinstance(value, kind):
            raise ValueError(f"{where}{key}: expected {kind.__name__}")


def format_compare(payload: dict) -> str:
    acc, per, one = payload["accuracy"], payload["per_task"], payload["one_time"]
    lines = [
        f"{payload['problem']}  p={payload['p']}  eps={payload['epsilon']}  N_H={payload['latent_dim']}  "
        f"grid={payload['grid'][0]}x{payload['grid'][1]}",
        f"{'method':<14}{'seconds':>12}{'rel L2':>14}{'max abs':>14}",
        f"{'perturbative':<14}{per['adapt_seconds']:>12.4f}{acc['perturbative']['relative_l2']:>14.4e}"
        f"{acc['perturbative']['max_abs']:>14.4e}",
        f"{'reference':<14}{per['reference_seconds']:>12.4f}{acc['reference']['relative_l2']:>14.4e}"
        f"{acc['reference']['max_abs']:>14.4e}",
        f"one-time assembly {one['assembly_seconds']:.4f}s (cache {'hit' if one['cache_hit'] else 'miss'}), "
        f"errors vs n_x={acc['hires_nx']} reference",
    ]
    return "\n".join(lines) + "\n"


def cmd_reference(cfg: ExperimentConfig) -> int:
    problem = load_problem(cfg)
    grid = _grid(cfg, problem)
    ref, seconds = _reference(cfg, problem, grid)
    out = _out_dir(cfg)
    write_field_csv(out / "reference.csv", ref)
    _write_json(out / "reference.json", {
        "schema_version": SCHEMA_VERSION, "problem": problem.name, "epsilon": problem.epsilon,
        "n_x": cfg.ref_nx, "rtol": cfg.ref_rtol, "grid": [grid.n_x, grid.n_t], "reference_seconds": seconds,
    })
    print(f"reference {problem.name or 'problem'} on {grid.n_x}x{grid.n_t}: {seconds:.3f}s")
    return 0


COMMANDS = {
    "train": cmd_train,
    "solve": cmd_solve,
    "sweep-p": cmd_sweep_p,
    "sweep-eps": cmd_sweep_eps,
    "compare": cmd_compare,
    "reference": cmd_reference,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pertpinn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--preset", help=f"built-in problem: {', '.join(sorted(PRESETS))}")
        sp.add_argument("--problem", help="problem JSON file")
        sp.add_argument("--out", help="output directory (default .)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epsilon", type=float, help="override the problem's epsilon")
        sp.add_argument("--forcing", help="override the forcing expression")
        sp.add_argument("--grid-nx", type=int)
        sp.add_argument("--grid-nt", type=int)
        sp.add_argument("--ref-nx", type=int, help="reference solver nodes (default 201)")
        sp.add_argument("--ref-rtol", type=float)
        if checkpoint:
            sp.add_argument("--checkpoint")
            sp.add_argument("--cache-dir", help="latent-system cache (default $PERTPINN_CACHE_DIR)")
            sp.add_argument("--no-cache", action="store_true")

    sp = sub.add_parser("train", help="train a multi-head body")
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--layers", type=int)

    sp = sub.add_parser("solve", help="one-shot perturbative solve plus error report")
    common(sp)
    sp.add_argument("--p", type=int)

    sp = sub.add_parser("sweep-p", help="error versus perturbation order")
    common(sp)
    sp.add_argument("--p-range", help="e.g. 0:10, 3 or 0,2,5")
    sp.add_argument("--workers", type=int)

    sp = sub.add_parser("sweep-eps", help="error versus epsilon")
    common(sp)
    sp.add_argument("--p", type=int)
    sp.add_argument("--eps", help="comma-separated epsilon values")
    sp.add_argument("--cases", help="comma-separated presets (default eps-f0,eps-f1)")
    sp.add_argument("--workers", type=int)

    sp = sub.add_parser("compare", help="timing and accuracy against the classical solver")
    common(sp)
    sp.add_argument("--p", type=int)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--hires-nx", type=int)

    sp = sub.add_parser("reference", help="classical reference solution")
    common(sp, checkpoint=False)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"pertpinn: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, StiffnessError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"pertpinn: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"pertpinn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
