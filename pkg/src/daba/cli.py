"""Command-line driver.

Exit codes: 0 clean finish, 1 usage or input error, 2 the solver degraded
(a device could not factorize its system and kept its previous iterate).
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import asdict, dataclass, fields


from .errors import DabaError, SchemaVersionMismatch
from .geometry import LossFunction, mean_pixel_reprojection_error
from .io import export_ply, from_problem, read_bal, read_metrics, synthesize_problem, to_problem, write_bal, write_metrics
from .partition import partition_problem
from .profiles import performance_profile, target_objective
from .runtime import RunConfig, run
from .runtime.engine import account_memory, make_devices

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEGRADED = 2

logger = logging.getLogger("daba")
_SYNTHETIC = re.compile(r"^synthetic:(\d+)x(\d+)(?::([0-9.eE+-]+))?$")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class SolveConfig:
    input: str = ""
    devices: int = 1
    loss: str = "trivial"
    huber_scale: float = 1.0
    iterations: int = 1000
    xi: float = 1e-4
    eta: float = 0.1
    seed: int = 0
    mode: str = "sequential"
    accelerate: bool = True
    metrics: str | None = None
    export_ply: str | None = None
    strict_geometry: bool = False

    def validate(self):
        if self.devices < 1:
            raise UsageError("--devices must be at least 1")
        if self.iterations < 0:
            raise UsageError("--iterations must be nonnegative")
        if not self.xi > 0:
            raise UsageError("--xi must be positive")
        if not 0 < self.eta <= 1:
            raise UsageError("--eta must lie in (0, 1]")
        if not self.huber_scale > 0:
            raise UsageError("--huber-scale must be positive")

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)


def load_problem(spec, loss=LossFunction(), seed=0):
    """Read a BAL file (optionally ``.bz2`` or ``.gz``) or build ``synthetic:MxN[:noise]``."""
    m = _SYNTHETIC.match(spec)
    if m:
        noise = float(m.group(3)) if m.group(3) else 0.0
        problem, _ = synthesize_problem(num_cameras=int(m.group(1)), num_points=int(m.group(2)), pixel_noise=noise, seed=seed, loss=loss)
        return problem
    try:
        bal = read_bal(spec)
    except OSError as err:
        raise UsageError(f"cannot read {spec}: {err.strerror or err}") from None
    return to_problem(bal, loss)


def cmd_solve(cfg):
    cfg.validate()
    loss = LossFunction(cfg.loss, cfg.huber_scale)
    problem = load_problem(cfg.input, loss, cfg.seed)
    if cfg.devices > problem.num_cameras:
        raise UsageError(f"--devices {cfg.devices} exceeds the camera count {problem.num_cameras}")
    run_cfg = RunConfig(
        devices=cfg.devices,
        iterations=cfg.iterations,
        xi=cfg.xi,
        eta=cfg.eta,
        accelerate=cfg.accelerate,
        mode=cfg.mode,
        strict_geometry=cfg.strict_geometry,
    )
    trace = run(problem, run_cfg)
    if cfg.metrics:
        write_metrics(trace.records, cfg.metrics, config=asdict(cfg))
    if cfg.export_ply:
        export_ply(trace.final_state, cfg.export_ply)
    print(
        f"iterations {len(trace.records)}  objective {trace.final_objective:.6g}  "
        f"mean pixel error {trace.final_mean_pixel_error:.4f}  criticality {trace.final_criticality:.3e}"
    )
    if trace.degraded:
        print("warning: at least one device kept its iterate after a failed linear solve", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def cmd_eval(args):
    problem = load_problem(args.input, seed=args.seed)
    print(f"{mean_pixel_reprojection_error(problem, problem.initial, lenient=args.lenient):.3f}")
    return EXIT_OK


def cmd_profile(args):
    series = []
    for path in args.traces:
        try:
            _, records = read_metrics(path)
        except OSError as err:
            raise UsageError(f"cannot read {path}: {err.strerror or err}") from None
        series.append([r.objective for r in records])
    refs = args.f_ref if len(args.f_ref) == len(series) else args.f_ref * len(series)
    if len(refs) != len(series):
        raise UsageError("--f-ref takes one value or one per trace")
    prof = performance_profile(series, refs, args.delta)
    for s, ref in zip(series, refs):
        if s:
            print(f"# target {target_objective(ref, s[0], args.delta):.10g}")
    print("iteration\tsolved_fraction")
    previous = None
    for k, frac in enumerate(prof):
        if args.all or frac != previous:
            print(f"{k}\t{frac:.4f}")
        previous = frac
    return EXIT_OK


def cmd_partition_inspect(args):
    problem = load_problem(args.input, seed=args.seed)
    if not 1 <= args.devices <= problem.num_cameras:
        raise UsageError("--devices must lie between 1 and the camera count")
    part = partition_problem(problem, args.devices, args.strategy)
    memory = account_memory(make_devices(problem, part, RunConfig(devices=args.devices)))
    print("device\tcameras\tpoints\tintra\tcamera_side\tpoint_side\tneighbors\tmemory_floats")
    for d, mem in zip(part.devices, memory):
        print(
            f"{d.device}\t{len(d.cameras)}\t{len(d.points)}\t{len(d.intra)}\t{len(d.camera_side)}\t"
            f"{len(d.point_side)}\t{','.join(map(str, d.neighbors)) or '-'}\t{mem}"
        )
    print(f"crossing pairs {part.crossing_count()}  floats per exchange {part.floats_per_exchange()}")
    return EXIT_OK


def cmd_generate(args):
    problem, _ = synthesize_problem(
        num_cameras=args.cameras, num_points=args.points, pixel_noise=args.noise, seed=args.seed
    )
    write_bal(from_problem(problem), args.output)
    print(f"wrote {args.output}: {problem.num_cameras} cameras, {problem.num_points} points, {problem.num_observations} observations")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="daba", description="Decentralized bundle adjustment.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="run the decentralized solver")
    s.add_argument("--config", help="JSON file with solve settings; flags override it")
    s.add_argument("--input")
    s.add_argument("--devices", type=int)
    s.add_argument("--loss", choices=["trivial", "huber"])
    s.add_argument("--huber-scale", type=float)
    s.add_argument("--iterations", type=int)
    s.add_argument("--xi", type=float)
    s.add_argument("--eta", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--mode", choices=["sequential", "parallel"])
    s.add_argument("--no-accelerate", dest="accelerate", action="store_false", default=None)
    s.add_argument("--metrics")
    s.add_argument("--export-ply")
    s.add_argument("--strict-geometry", action="store_true", default=None)

    e = sub.add_parser("eval", help="mean pixel reprojection error of the initial state")
    e.add_argument("--input", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--lenient", action="store_true", help="skip points behind their camera")

    p = sub.add_parser("profile", help="performance profile from metrics files")
    p.add_argument("traces", nargs="+")
    p.add_argument("--f-ref", type=float, nargs="+", required=True)
    p.add_argument("--delta", type=float, default=1e-4)
    p.add_argument("--all", action="store_true", help="print every iteration, not only changes")

    i = sub.add_parser("partition-inspect", help="summarize a device partition")
    i.add_argument("--input", required=True)
    i.add_argument("--devices", type=int, required=True)
    i.add_argument("--strategy", choices=["observations", "cameras"], default="observations")
    i.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("generate", help="write a synthetic problem in BAL format")
    g.add_argument("--output", required=True)
    g.add_argument("--cameras", type=int, default=20)
    g.add_argument("--points", type=int, default=500)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    return parser


def _solve_config(args):
    cfg = SolveConfig.from_file(args.config) if args.config else SolveConfig()
    for f in fields(SolveConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    if not cfg.input:
        raise UsageError("--input is required")
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "solve":
            return cmd_solve(_solve_config(args))
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "profile":
            return cmd_profile(args)
        if args.command == "partition-inspect":
            return cmd_partition_inspect(args)
        return cmd_generate(args)
    except UsageError as err:
        print(f"daba: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaVersionMismatch, DabaError, ValueError) as err:
        print(f"daba: error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
