"""Command-line interface: ``ccdesign optimize|reach|ik|fk|voxelize|config``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import optimizer as opt
from .ik import IkConfigError, solve_min_torque_ik, solve_position_ik
from .kinematics import Configuration, InvalidFrameError, forward_kinematics, static_torques
from .problems import BUILTINS, SCALES, ConfigError, ProblemSpec, builtin_problem, load_spec
from .workspace import MeshError, StlError, read_stl, voxelize_mesh, write_points_csv

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


def resolve_problem(ref: str) -> ProblemSpec:
    """A YAML config path, or the name of a builtin problem."""
    path = Path(ref)
    if path.is_file():
        return load_spec(path)
    if ref in BUILTINS:
        return builtin_problem(ref)
    raise ConfigError(f"no config file {ref!r} and not a builtin ({', '.join(BUILTINS)})")


def _design_vector(spec: ProblemSpec, values) -> np.ndarray:
    if values is None:
        raise UsageError("--design is required")
    x = np.array(values, dtype=float)
    if x.size != len(spec.robot.variables):
        raise UsageError(f"--design needs {len(spec.robot.variables)} values ({', '.join(spec.robot.names)})")
    if np.any(x < spec.robot.lower) or np.any(x > spec.robot.upper):
        raise UsageError("--design outside the variable bounds")
    return x


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _clean(v):
    """NaN/inf are not JSON; write them as null."""
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(w) for k, w in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(w) for w in v]
    return v


def dump_json(obj) -> str:
    return json.dumps(_clean(json.loads(json.dumps(obj, default=_json_default))), indent=2, sort_keys=False)


def write_log(path: Path, rows: list[dict]) -> None:
    fields = list(opt.LOG_FIELDS)
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _apply_overrides(spec: ProblemSpec, args) -> ProblemSpec:
    if args.scale:
        spec = spec.with_scale(args.scale)
    p = spec.optimizer
    if args.iterations is not None:
        p.max_iterations = args.iterations
    if args.population is not None:
        p.population_size = args.population
    if args.select_generation:
        p.select_generation = True
    opt.OptimizerParams(**p.to_dict())  # re-validate
    return spec


def cmd_optimize(args) -> int:
    spec = _apply_overrides(resolve_problem(args.problem), args)
    if spec.optimizer.select_generation and spec.objective != "total_length":
        raise UsageError("select generation is only defined for problems with a cheap objective "
                         "(total_length); it is not available for the torque problem")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = args.algorithm + ("_select" if spec.optimizer.select_generation else "")
    results = []
    for k in range(args.repeats):
        seed = args.seed + k
        params = opt.OptimizerParams(**{**spec.optimizer.to_dict(), "seed": seed})
        problem = spec.design_problem(seed)
        t0 = time.perf_counter()
        progress = None
        if args.verbose:
            def progress(row, seed=seed):
                print(f"[{tag} seed {seed}] iter {row['iteration']:3d} best {row['best_feasible_objective']:.4f} "
                      f"mean theta {row['mean_theta']:.3f}", file=sys.stderr, flush=True)
        state = opt.run(problem, params, args.algorithm, workers=args.workers, progress=progress)
        wall = time.perf_counter() - t0
        stem = f"{spec.name}_{tag}_seed{seed}"
        log_path = out_dir / f"{stem}.csv"
        write_log(log_path, state.log)
        best = state.best_feasible
        result = {
            "problem": spec.name,
            "algorithm": args.algorithm,
            "seed": seed,
            "feasible": best is not None,
            "x": None if best is None else dict(zip(spec.robot.names, (float(v) for v in best.x))),
            "objective": None if best is None else best.objective,
            "theta": None if best is None else best.theta,
            "evaluations": state.evaluations,
            "log": str(log_path),
            "params": params.to_dict(),
            "fk_samples": spec.sampling.fk_samples,
            "scale": args.scale,
            "wall_time_s": wall,
        }
        (out_dir / f"{stem}.json").write_text(dump_json(result) + "\n")
        results.append(result)
        obj = "infeasible" if best is None else f"{best.objective:.4f}"
        print(f"{stem}: best feasible objective {obj} ({wall:.1f} s)")
    return EXIT_OK


def cmd_reach(args) -> int:
    spec = resolve_problem(args.problem)
    if args.fk_samples is not None:
        spec.sampling.fk_samples = args.fk_samples
    if args.window is not None:
        spec.sampling.refine_window = list(args.window)
    x = _design_vector(spec, args.design)
    problem = spec.design_problem(args.seed)
    report = problem.report(x)
    out = {"problem": spec.name, "seed": args.seed, "x": dict(zip(spec.robot.names, x.tolist())),
           **report.to_dict()}
    if args.out_dir:
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_points_csv(d / "reached.csv", problem.targets.points[report.reached_mask])
        write_points_csv(d / "unreached.csv", problem.targets.points[~report.reached_mask])
        (d / "report.json").write_text(dump_json(out) + "\n")
    print(dump_json(out))
    return EXIT_OK


def cmd_ik(args) -> int:
    spec = resolve_problem(args.problem)
    x = _design_vector(spec, args.design)
    design = spec.robot.design(x)
    opts = spec.ik_options(args.seed)
    load = spec.load_model()
    if args.gravity is not None:
        load = type(load)(load.payload_mass, load.joint_masses, tuple(args.gravity))
    if args.min_torque:
        sol = solve_min_torque_ik(design, args.target, load, opts)
    else:
        sol = solve_position_ik(design, args.target, opts, load=load)
    out = sol.to_dict()
    out["torques"] = [t.tolist() for t in static_torques(design, sol.config, load)]
    print(dump_json(out))
    return EXIT_OK


def cmd_fk(args) -> int:
    spec = resolve_problem(args.problem)
    design = spec.robot.design(_design_vector(spec, args.design))
    q = np.array(args.q if args.q is not None else np.zeros(2 * design.n_joints), dtype=float)
    if q.size != 2 * design.n_joints:
        raise UsageError(f"--q needs {2 * design.n_joints} values (kappa, theta per joint)")
    chain = forward_kinematics(design, Configuration.from_vector(q))
    frames = [{"origin": f.origin, "tangent": f.tangent, "normal": f.normal, "binormal": f.binormal}
              for f in chain.joint_frames]
    print(dump_json({"joint_frames": frames, "end_effector": chain.end_effector.origin}))
    return EXIT_OK


def cmd_voxelize(args) -> int:
    if not args.voxel_size > 0:
        raise UsageError(f"--voxel-size must be > 0, got {args.voxel_size}")
    grid = voxelize_mesh(read_stl(args.stl), args.voxel_size, surface=args.surface)
    if args.out:
        write_points_csv(args.out, grid.centers())
    print(f"{grid.count} occupied (dims {grid.dims[0]}x{grid.dims[1]}x{grid.dims[2]}, "
          f"origin {tuple(float(v) for v in grid.origin)}, components {grid.components()})")
    return EXIT_OK


def cmd_config(args) -> int:
    spec = builtin_problem(args.name)
    if args.scale:
        spec = spec.with_scale(args.scale)
    sys.stdout.write(spec.dump())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccdesign", description="Continuum-robot dimension optimization.")
    sub = ap.add_subparsers(dest="command", required=True)

    def problem_arg(p):
        p.add_argument("problem", help="YAML config path or builtin name")

    def design_arg(p):
        p.add_argument("--design", type=float, nargs="+", help="design variable values, config order")

    p = sub.add_parser("optimize", help="run the EDA or GA")
    problem_arg(p)
    p.add_argument("--algorithm", choices=("eda", "ga"), default="eda")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int)
    p.add_argument("--population", type=int)
    p.add_argument("--select-generation", action="store_true")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--scale", choices=sorted(SCALES))
    p.add_argument("--workers", type=int, default=None,
                   help=f"evaluation processes (default ${opt.WORKERS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("reach", help="hybrid reachability of one design")
    problem_arg(p)
    design_arg(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--fk-samples", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_reach)

    p = sub.add_parser("ik", help="solve IK for one target")
    problem_arg(p)
    design_arg(p)
    p.add_argument("--target", type=float, nargs=3, required=True)
    p.add_argument("--min-torque", action="store_true")
    p.add_argument("--gravity", type=float, nargs=3, help="override the load's gravity vector")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ik)

    p = sub.add_parser("fk", help="forward kinematics of one configuration")
    problem_arg(p)
    design_arg(p)
    p.add_argument("--q", type=float, nargs="+", help="kappa_1 theta_1 kappa_2 theta_2 ...")
    p.set_defaults(func=cmd_fk)

    p = sub.add_parser("voxelize", help="voxelize a closed STL mesh")
    p.add_argument("stl")
    p.add_argument("--voxel-size", type=float, default=3.0)
    p.add_argument("--surface", choices=("center", "overlap"), default="center")
    p.add_argument("--out", help="CSV of occupied voxel centers")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("config", help="print a builtin problem as YAML")
    p.add_argument("name", choices=BUILTINS)
    p.add_argument("--scale", choices=sorted(SCALES))
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, StlError, MeshError, IkConfigError, InvalidFrameError,
            opt.OptimizerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
