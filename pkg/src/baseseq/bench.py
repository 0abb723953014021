"""Benchmark harness, scene corpus management and the command-line entry point."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .policy_base import BasePosePolicy, eval_scenes, evaluate_base_policy, write_log_csv
from .policy_seq import GraspSequencePolicy, plan_learned, write_seq_log
from .reach import DEFAULT_MODEL, build_irms
from .solvers import FeasibilityMode, Plan, execute_plan, save_plan, solve_dp, solve_mbp, solve_pbg
from .world import BENCH_ANNULUS, load_scene, sample_scene, save_scene

METHODS = ("PBG", "PBG-GC", "MBP", "MBP-GC", "DP", "LEARNED")
CLOCKS = ("wall", "virtual")
PER_SCENE_FIELDS = ("task", "method", "scene_seed", "n_grasped", "planning_s", "nav_s", "grasp_s")
SUMMARY_FIELDS = ("method", "task", "pct_grasped", "planning_mean", "planning_std_pop", "nav_mean",
                  "nav_std_pop", "grasp_mean", "grasp_std_pop", "total_exec", "total_all")


@dataclass
class Task:
    n_objects: int
    n_scenes: int = 50

    @property
    def name(self) -> str:
        return f"{self.n_objects}-objs"


@dataclass
class BenchConfig:
    tasks: list[Task] = field(default_factory=lambda: [Task(5), Task(10)])
    methods: tuple[str, ...] = METHODS
    seed: int = 0
    latency: float = 0.0
    base_ckpt: str | None = None
    seq_ckpt: str | None = None
    dp_top_k: int | None = 20
    clock: str = "wall"

    def __post_init__(self):
        self.tasks = [t if isinstance(t, Task) else Task(**t) for t in self.tasks]
        self.methods = tuple(self.methods)
        if not self.methods:
            raise ValueError("at least one method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if "LEARNED" in self.methods and not (self.base_ckpt and self.seq_ckpt):
            raise ValueError("LEARNED needs both base_ckpt and seq_ckpt")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")
        if self.clock not in CLOCKS:
            raise ValueError(f"clock must be one of {CLOCKS}")
        if any(t.n_objects < 1 or t.n_scenes < 1 for t in self.tasks):
            raise ValueError("task sizes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> BenchConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d


def load_config(path) -> BenchConfig:
    with open(path) as f:
        return BenchConfig.from_dict(json.load(f))


def corpus_seeds(seed: int, n_objects: int, n_scenes: int) -> list[int]:
    return [seed * 1_000_000 + n_objects * 10_000 + i for i in range(n_scenes)]


def scene_corpus(seed: int, n_objects: int, n_scenes: int):
    return [sample_scene(s, n_objects, BENCH_ANNULUS) for s in corpus_seeds(seed, n_objects, n_scenes)]


@dataclass
class ResultRow:
    method: str
    task: str
    pct_grasped: float
    planning_mean: float
    planning_std_pop: float
    nav_mean: float
    nav_std_pop: float
    grasp_mean: float
    grasp_std_pop: float
    total_exec: float
    total_all: float


class LearnedCheckpoints:
    """Base pose and sequence policies loaded for the LEARNED planner."""

    def __init__(self, base_ckpt, seq_ckpt):
        self.base = BasePosePolicy.load(base_ckpt)
        self.seq = GraspSequencePolicy.load(seq_ckpt, self.base)


def plan_scene(method: str, scene, latency: float = 0.0, dp_top_k: int | None = 20,
               learned: LearnedCheckpoints | None = None, clock: str = "wall", model=DEFAULT_MODEL) -> Plan:
    """Plan one scene; the reported time covers candidate generation and search.

    With ``clock="virtual"`` the measured part is dropped and only the
    latency charged for feasibility checks remains, which is reproducible.
    """
    t0 = time.perf_counter()
    if method == "LEARNED":
        if learned is None:
            raise ValueError("LEARNED needs loaded checkpoints")
        plan = plan_learned(learned.seq.params_, learned.base.actor_, scene, learned.seq.attention,
                            learned.base.frame_mode, model, latency)
    else:
        irms = build_irms(model, scene)
        if method == "DP":
            plan = solve_dp(scene, irms, dp_top_k, latency, model)
        else:
            mode = FeasibilityMode.GRASP_CHECKED if method.endswith("-GC") else FeasibilityMode.IK_ONLY
            solver = solve_pbg if method.startswith("PBG") else solve_mbp
            plan = solver(scene, irms, mode, latency, model)
    plan.planner_name = method
    virtual = latency * plan.feasibility_checks
    if clock == "virtual":
        plan.planning_wall_time = virtual
    else:
        plan.planning_wall_time = time.perf_counter() - t0 + virtual
    return plan


def run_benchmark(config: BenchConfig, model=DEFAULT_MODEL, progress=None):
    """Plan and execute every (task, method, scene); returns summary rows and per-scene records."""
    learned = LearnedCheckpoints(config.base_ckpt, config.seq_ckpt) if "LEARNED" in config.methods else None
    records, rows = [], []
    for task in config.tasks:
        scenes = scene_corpus(config.seed, task.n_objects, task.n_scenes)
        for method in config.methods:
            cell = []
            for scene in scenes:
                plan = plan_scene(method, scene, config.latency, config.dp_top_k, learned, config.clock, model)
                report = execute_plan(scene, plan, model)
                rec = {"task": task.name, "method": method, "scene_seed": scene.seed,
                       "n_grasped": report.objects_grasped, "planning_s": plan.planning_wall_time,
                       "nav_s": report.cost.nav_time, "grasp_s": report.cost.grasp_time}
                cell.append(rec)
            records.extend(cell)
            row = summarize(cell, task.n_objects)
            rows.append(row)
            if progress:
                progress(row)
    return rows, records


def summarize(cell: list[dict], n_objects: int) -> ResultRow:
    plan_t = np.array([r["planning_s"] for r in cell])
    nav = np.array([r["nav_s"] for r in cell])
    grasp = np.array([r["grasp_s"] for r in cell])
    grasped = sum(r["n_grasped"] for r in cell)
    total_exec = float(nav.mean() + grasp.mean())
    return ResultRow(
        method=cell[0]["method"], task=cell[0]["task"],
        pct_grasped=100.0 * grasped / (len(cell) * n_objects),
        planning_mean=float(plan_t.mean()), planning_std_pop=float(plan_t.std()),
        nav_mean=float(nav.mean()), nav_std_pop=float(nav.std()),
        grasp_mean=float(grasp.mean()), grasp_std_pop=float(grasp.std()),
        total_exec=total_exec, total_all=float(plan_t.mean()) + total_exec,
    )


def _write_csv(path, fields, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def write_per_scene_csv(records, path) -> None:
    _write_csv(path, PER_SCENE_FIELDS, records)


def write_summary_csv(rows: list[ResultRow], path) -> None:
    _write_csv(path, SUMMARY_FIELDS, [asdict(r) for r in rows])


def format_table(rows: list[ResultRow]) -> str:
    head = f"{'task':<8} {'method':<8} {'grasped%':>8} {'planning':>16} {'nav':>16} {'grasp':>16} {'exec':>8} {'total':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.task:<8} {r.method:<8} {r.pct_grasped:>8.1f} "
            f"{r.planning_mean:>8.3f}±{r.planning_std_pop:<7.3f} {r.nav_mean:>8.1f}±{r.nav_std_pop:<7.1f} "
            f"{r.grasp_mean:>8.1f}±{r.grasp_std_pop:<7.1f} {r.total_exec:>8.1f} {r.total_all:>9.2f}"
        )
    return "\n".join(lines)


# command line -------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _dump_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file supplying option defaults")
    common.add_argument("--out", default="out", help="output directory (checkpoint path for train-*)")

    p = _Parser(prog="baseseq", description="Base-pose sequence planning for mobile picking.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-scenes", parents=[common], help="write a seeded scene corpus")
    g.add_argument("--n", type=int, default=5, help="objects per scene")
    g.add_argument("--count", type=int, default=50)

    pl = sub.add_parser("plan", parents=[common], help="plan one scene")
    pl.add_argument("--method", type=str.upper, choices=METHODS, required=False)
    pl.add_argument("--scene", required=False)
    pl.add_argument("--latency", type=float, default=0.0)
    pl.add_argument("--top-k", type=int, default=20)
    pl.add_argument("--base-ckpt")
    pl.add_argument("--seq-ckpt")
    pl.add_argument("--clock", choices=CLOCKS, default="wall")

    tb = sub.add_parser("train-base", parents=[common], help="train the base pose policy")
    tb.add_argument("--frame", choices=("object", "table"), default="object")
    tb.add_argument("--steps", type=int, default=150_000)
    tb.add_argument("--hidden", type=int, nargs="+", default=[256, 256, 256])
    tb.add_argument("--eval-every", type=int, default=1_000)
    tb.add_argument("--eval-episodes", type=int, default=1_000)

    ts = sub.add_parser("train-seq", parents=[common], help="train the grasp sequence policy")
    ts.add_argument("--base-ckpt", required=False)
    ts.add_argument("--attention", choices=("learned", "uniform"), default="learned")
    ts.add_argument("--baseline", choices=("greedy", "none"), default="greedy")
    ts.add_argument("--epochs", type=int, default=10)
    ts.add_argument("--batches-per-epoch", type=int, default=10)
    ts.add_argument("--batch-episodes", type=int, default=64)
    ts.add_argument("--eval-scenes", type=int, default=128)
    ts.add_argument("--n-objects", type=int, default=5)

    b = sub.add_parser("bench", parents=[common], help="run the planner benchmark")
    b.add_argument("--methods", nargs="+", type=str.upper, choices=METHODS)
    b.add_argument("--tasks", type=int, nargs="+", help="object counts per task")
    b.add_argument("--n-scenes", type=int)
    b.add_argument("--latency", type=float)
    b.add_argument("--base-ckpt")
    b.add_argument("--seq-ckpt")
    b.add_argument("--clock", choices=CLOCKS)

    e = sub.add_parser("eval", parents=[common], help="evaluate a base pose checkpoint")
    e.add_argument("--base-ckpt", required=False)
    e.add_argument("--episodes", type=int, default=1_000)
    return p


def _apply_config(parser, args, argv):
    """Re-parse with the config file as defaults so explicit flags still win."""
    if not args.config or args.command == "bench":
        return args
    with open(args.config) as f:
        cfg = json.load(f)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    subparser.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def _require(args, *names):
    for n in names:
        if getattr(args, n.replace("-", "_")) is None:
            raise UsageError(f"{args.command}: --{n} is required")


def _cmd_gen_scenes(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = corpus_seeds(args.seed, args.n, args.count)
    for i, s in enumerate(seeds):
        save_scene(sample_scene(s, args.n, BENCH_ANNULUS), out / f"scene_{args.n}obj_{i:03d}.json")
    _dump_json({"seed": args.seed, "n_objects": args.n, "scene_seeds": seeds}, out / "corpus.json")
    print(f"wrote {len(seeds)} scenes with {args.n} objects to {out}")


def _cmd_plan(args):
    _require(args, "method", "scene")
    scene = load_scene(args.scene)
    learned = None
    if args.method == "LEARNED":
        _require(args, "base-ckpt", "seq-ckpt")
        learned = LearnedCheckpoints(args.base_ckpt, args.seq_ckpt)
    plan = plan_scene(args.method, scene, args.latency, args.top_k, learned, args.clock)
    report = execute_plan(scene, plan)
    out = Path(args.out)
    save_plan(plan, out / "plan.json")
    c = plan.predicted_cost
    print(f"{'method':<8} {'stops':>5} {'nav':>8} {'grasp':>8} {'total':>8} {'executed':>8} {'planning':>9}")
    print(f"{args.method:<8} {len(plan.stops):>5} {c.nav_time:>8.2f} {c.grasp_time:>8.2f} {c.total:>8.2f} "
          f"{report.objects_grasped:>4}/{scene.n_objects:<3} {plan.planning_wall_time:>9.4f}")


def _checkpoint_paths(out: str) -> tuple[Path, Path]:
    path = Path(out)
    if path.suffix != ".json":
        path = path / "checkpoint.json"
    return path, path.with_name(path.stem + "_log.csv")


def _cmd_train_base(args):
    ckpt, log_path = _checkpoint_paths(args.out)
    est = BasePosePolicy(frame_mode=args.frame, seed=args.seed, total_steps=args.steps,
                         hidden=tuple(args.hidden), eval_every=args.eval_every,
                         eval_episodes=args.eval_episodes)
    est.fit(progress=lambda r: print(f"step {r['step']:>7}  reward {r['mean_reward']:>12.1f}  "
                                     f"success {r['success_rate']:.3f}", flush=True))
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    est.save(ckpt)
    write_log_csv(est.log_, log_path, ("step", "mean_reward", "success_rate"))
    print(f"checkpoint {ckpt}  log {log_path}")


def _cmd_train_seq(args):
    _require(args, "base-ckpt")
    ckpt, log_path = _checkpoint_paths(args.out)
    base = BasePosePolicy.load(args.base_ckpt)
    est = GraspSequencePolicy(base_policy=base, attention=args.attention,
                              baseline="greedy_rollout" if args.baseline == "greedy" else "none",
                              epochs=args.epochs, batches_per_epoch=args.batches_per_epoch,
                              batch_episodes=args.batch_episodes, eval_scenes=args.eval_scenes,
                              n_objects=args.n_objects, frame_mode=base.frame_mode, seed=args.seed)
    est.fit(progress=lambda r: print(f"epoch {r['epoch']:>4}  return {r['mean_return']:>12.1f}  "
                                     f"baseline {r['baseline_return']:>12.1f}  replaced {r['replaced_flag']}",
                                     flush=True))
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    est.save(ckpt)
    write_seq_log(est.log_, log_path)
    print(f"checkpoint {ckpt}  log {log_path}")


def _cmd_bench(args):
    if args.config:
        with open(args.config) as f:
            cfg = json.load(f)
    else:
        cfg = {}
    cfg.setdefault("seed", args.seed)
    overrides = {"methods": args.methods, "latency": args.latency, "base_ckpt": args.base_ckpt,
                 "seq_ckpt": args.seq_ckpt, "clock": args.clock}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.tasks:
        cfg["tasks"] = [{"n_objects": n, "n_scenes": args.n_scenes or 50} for n in args.tasks]
    elif args.n_scenes:
        cfg["tasks"] = [{"n_objects": t["n_objects"] if isinstance(t, dict) else t, "n_scenes": args.n_scenes}
                        for t in cfg.get("tasks", [{"n_objects": 5}, {"n_objects": 10}])]
    try:
        config = BenchConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bench: invalid configuration: {exc}") from exc
    rows, records = run_benchmark(config)
    out = Path(args.out)
    write_per_scene_csv(records, out / "per_scene.csv")
    write_summary_csv(rows, out / "summary.csv")
    print(format_table(rows))


def _cmd_eval(args):
    _require(args, "base-ckpt")
    base = BasePosePolicy.load(args.base_ckpt)
    scenes = eval_scenes(args.seed, args.episodes)
    success, reward = evaluate_base_policy(base.actor_, scenes, base.frame_mode)
    _dump_json({"checkpoint": str(args.base_ckpt), "episodes": args.episodes, "seed": args.seed,
                "success_rate": success, "mean_reward": reward}, Path(args.out) / "eval.json")
    print(f"{'frame':<8} {'episodes':>8} {'success':>8} {'reward':>12}")
    print(f"{base.frame_mode:<8} {args.episodes:>8} {success:>8.3f} {reward:>12.1f}")


COMMANDS = {"gen-scenes": _cmd_gen_scenes, "plan": _cmd_plan, "train-base": _cmd_train_base,
            "train-seq": _cmd_train_seq, "bench": _cmd_bench, "eval": _cmd_eval}


def cli_main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    try:
        args = _apply_config(parser, args, argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"baseseq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(cli_main())
