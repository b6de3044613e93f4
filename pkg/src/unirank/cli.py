"""Command-line entry point: world generation, training, evaluation, comparison, theorem suite, benchmark."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from .bench import run_benchmark
from .cascade import CascadeState, init_cascade, run_cascade
from .checkpoint import DimensionMismatch, atomic_write, dumps_json
from .config import ConfigError, RunConfig
from .listwise import LTConfig
from .metrics import (
    OracleSystem,
    RankingSystem,
    WorldMismatch,
    compare,
    evaluate_system,
    paired_summary,
    world_signature,
)
from .theorems import run_suite
from .trainer import NonFiniteLossError, init_state, run
from .world import World, grade_histogram, load_world, world_from_json

LOG_FORMAT_VERSION = 1

EXIT_CONFIG, EXIT_NONFINITE, EXIT_DIMS, EXIT_WORLDS, EXIT_THEOREM = 2, 3, 4, 5, 6

log = logging.getLogger("unirank")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _say(args, *parts) -> None:
    if not args.quiet:
        print(*parts)


def _write_json(path: Path, obj) -> None:
    try:
        atomic_write(path, dumps_json(obj))
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot write {path}: {exc}") from exc


def _write_text(path: Path, text: str) -> None:
    try:
        atomic_write(path, text)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot write {path}: {exc}") from exc


def _world(args, cfg: RunConfig) -> World:
    if getattr(args, "world", None):
        try:
            return load_world(args.world)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot load world {args.world}: {exc}") from exc
    return cfg.make_world()


# ---------------------------------------------------------------------------
# gen-world


def cmd_gen_world(args, cfg: RunConfig) -> int:
    world = cfg.make_world()
    out = Path(args.out) / "world.json"
    _write_json(out, world.to_json())
    hist = grade_histogram(world)
    _say(args, f"world: N={world.n_items} queries={world.n_queries} vocab={world.vocab_size} latent_dim={world.latent_dim}")
    _say(args, "grade histogram: " + " ".join(f"{g}:{int(c)}" for g, c in enumerate(hist)))
    _say(args, f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# train


class _LogWriter:
    """Streams one JSON line per step; on resume keeps the lines before the resume step."""

    def __init__(self, path: Path, system: str, start_step: int):
        self.path = path
        self.system = system
        path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if start_step > 0 and path.exists():
            for line in path.read_text().splitlines():
                if line and json.loads(line)["step"] < start_step:
                    kept.append(line + "\n")
        self.f = open(path, "w")
        self.f.writelines(kept)

    def write(self, rec, phase: int | None = None) -> None:
        row = dict(format_version=LOG_FORMAT_VERSION, system=self.system, **rec.to_dict())
        if phase is not None:
            row["phase"] = phase
        self.f.write(json.dumps(row, sort_keys=True) + "\n")
        self.f.flush()

    def close(self) -> None:
        self.f.close()


def _train_one(args, cfg: RunConfig, world: World, system: str, resume: ckpt.Checkpoint | None) -> Path:
    out = Path(args.out)
    ck_path = out / f"{system}.ckpt"
    log_path = Path(args.log) if args.log and len(cfg.systems()) == 1 else out / f"{system}.log.jsonl"
    if resume is not None:
        state = ckpt.to_state(resume, world, cfg.training)
    elif system == "cascade":
        state = init_cascade(world, cfg.training)
    else:
        state = init_state(world, cfg.training)
    writer = _LogWriter(log_path, system, state.step)
    snapshot = cfg.to_json()

    def snap(st) -> ckpt.Checkpoint:
        ck = ckpt.from_state(st, snapshot)
        ck.meta["world"] = world.to_json()
        return ck

    def on_step(st, rec):
        phase = (1 if rec.step < st.phase1_steps else 2) if isinstance(st, CascadeState) else None
        writer.write(rec, phase)
        if st.step % cfg.checkpoint_every == 0:
            ckpt.save(ck_path, snap(st))

    if resume is None:
        ckpt.save(ck_path, snap(state))
    try:
        if system == "cascade":
            run_cascade(world, cfg.training, state, on_step=on_step)
        else:
            run(world, cfg.training, state, on_step=on_step)
    except NonFiniteLossError as exc:
        raise CliError(EXIT_NONFINITE, f"{system}: {exc}; last periodic checkpoint kept at {ck_path}") from exc
    finally:
        writer.close()
    ckpt.save(ck_path, snap(state))
    _say(args, f"{system}: {state.step} steps, checkpoint {ck_path}, log {log_path}")
    return ck_path


def cmd_train(args, cfg: RunConfig) -> int:
    world = _world(args, cfg)
    resume = None
    if args.resume:
        resume = _load_checkpoint(args.resume)
        if cfg.systems() != [resume.system]:
            cfg = cfgmod.build({**cfg.raw, "system": resume.system})
    try:
        for system in cfg.systems():
            _train_one(args, cfg, world, system, resume)
    except DimensionMismatch as exc:
        raise CliError(EXIT_DIMS, str(exc)) from exc
    return 0


# ---------------------------------------------------------------------------
# eval / compare


def _load_checkpoint(path: str) -> ckpt.Checkpoint:
    try:
        return ckpt.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot read checkpoint {path}: {exc}") from exc


def _system_from_checkpoint(path: str, world: World | None):
    """Load a checkpoint and the world it was trained on, checking it against ``world`` if given."""
    ck = _load_checkpoint(path)
    run_cfg = cfgmod.build(ck.config)
    own = world_from_json(ck.meta["world"]) if "world" in ck.meta else run_cfg.make_world()
    if world is not None:
        if world_signature(world) != world_signature(own):
            try:
                ckpt.check_world(ck, world)
            except DimensionMismatch as exc:
                raise CliError(EXIT_DIMS, f"{path}: {exc}") from exc
            raise CliError(EXIT_WORLDS, f"checkpoint {path} was trained on a different world")
    try:
        tte, lt = ckpt.models(ck, own, run_cfg.training)
    except DimensionMismatch as exc:
        raise CliError(EXIT_DIMS, f"{path}: {exc}") from exc
    return RankingSystem(ck.system, tte, lt, run_cfg.training.pe_on), run_cfg, own


def _write_report(out: Path, name: str, report) -> None:
    _write_json(out / f"{name}.json", report.to_dict())
    _write_text(out / f"{name}.csv", report.to_csv())


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    world = _world(args, cfg) if (args.world or args.oracle) else None
    if args.oracle:
        system, run_cfg = OracleSystem(), cfg
    else:
        if not args.checkpoint:
            raise CliError(EXIT_CONFIG, "eval needs --checkpoint or --oracle")
        system, run_cfg, world = _system_from_checkpoint(args.checkpoint, world)
    queries = run_cfg.held_out(world)
    lt_cfg = run_cfg.training.lt_config()
    report = evaluate_system(system, world, queries, run_cfg.cutoffs, run_cfg.training.k, lt_cfg)
    _write_report(out, f"{system.tag}.report", report)
    m = report.mean
    _say(args, f"{system.tag}: " + " ".join(f"{k}={m[k]:.4f}" for k in m if isinstance(m[k], float)))
    return 0


def cmd_compare(args, cfg: RunConfig) -> int:
    if len(args.unified) != len(args.cascade):
        raise CliError(EXIT_CONFIG, "--unified and --cascade need the same number of checkpoints")
    out = Path(args.out)
    given = _world(args, cfg) if args.world else None
    comparisons = []
    for i, (u_path, c_path) in enumerate(zip(args.unified, args.cascade)):
        c_sys, c_cfg, world = _system_from_checkpoint(c_path, given)
        if u_path == "oracle":
            u_sys, u_cfg = OracleSystem(), c_cfg
        else:
            u_sys, u_cfg, u_world = _system_from_checkpoint(u_path, world)
            if world_signature(u_world) != world_signature(world):
                raise CliError(EXIT_WORLDS, f"{u_path} and {c_path} come from different worlds")
        queries = c_cfg.held_out(world)
        k = c_cfg.training.k
        if u_cfg.training.k != k:
            raise CliError(EXIT_DIMS, f"slate sizes differ: unified k={u_cfg.training.k} vs cascade k={k}")
        ur = evaluate_system(u_sys, world, queries, c_cfg.cutoffs, k, c_cfg.training.lt_config())
        cr = evaluate_system(c_sys, world, queries, c_cfg.cutoffs, k, c_cfg.training.lt_config())
        try:
            comp = compare(ur, cr, cfg.upqe)
        except WorldMismatch as exc:
            raise CliError(EXIT_WORLDS, str(exc)) from exc
        suffix = "" if len(args.unified) == 1 else f".{i}"
        _write_report(out, f"comparison{suffix}", comp)
        comparisons.append(comp)
        _say(args, f"pair {i}: mean UPQE {comp.mean_upqe:.4f}, dNDCG@{k} {comp.delta_ndcg[f'ndcg@{k}']:+.4f}, "
                   f"dE_prop {comp.delta_e_prop:+.3f}, cost ratio {comp.cost_ratio:.3f}, excluded {comp.excluded}")
    if len(comparisons) > 1:
        summary = paired_summary(comparisons)
        _write_json(out / "comparison.summary.json", summary)
        _say(args, f"paired: {summary}")
    return 0


# ---------------------------------------------------------------------------
# theorems / benchmark


def cmd_theorems(args, cfg: RunConfig) -> int:
    th = cfg.theorems
    suite = run_suite(int(th["instances"]), tuple(int(s) for s in th["seeds"]), with_training=not args.skip_training)
    _write_json(Path(args.out) / "theorems.json", suite.to_dict())
    for r in suite.results:
        tag = "PASS" if r.passed else ("XFAIL" if r.expected_failure else "FAIL")
        _say(args, f"{tag:5s} {r.name}: {r.detail}")
    if not suite.passed:
        raise CliError(EXIT_THEOREM, "failed properties: " + ", ".join(suite.failing()))
    return 0


def cmd_benchmark(args, cfg: RunConfig) -> int:
    b = cfg.benchmark
    lt_cfg = cfg.training.lt_config()
    rep = run_benchmark(b["ks"], b["ns"], lt_cfg, seed=cfg.seed, repeats=int(b["repeats"]))
    _write_json(Path(args.out) / "benchmark.json", rep.to_dict())
    _say(args, f"LT exponent {rep.lt_exponent:.3f} (two-term R^2 {rep.lt_two_term_r2:.4f}); "
               f"retrieval exponent {rep.retrieval_exponent:.3f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the verb; SUPPRESS keeps the
    # subparser from overwriting a value given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config merged over the defaults")
    common.add_argument("--seed", type=int, help="overrides the config seed (world and training)")
    common.add_argument("--out", help="output directory (default .)")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="unirank", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-world", parents=[common], help="write world.json")

    t = sub.add_parser("train", parents=[common], help="train lt-ttd and/or cascade")
    t.add_argument("--world")
    t.add_argument("--log", help="convergence log path (single-system runs)")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out queries")
    e.add_argument("--checkpoint")
    e.add_argument("--world")
    e.add_argument("--oracle", action="store_true", help="evaluate the true-grade oracle instead")

    c = sub.add_parser("compare", parents=[common], help="UPQE of unified vs cascade checkpoints")
    c.add_argument("--unified", nargs="+", required=True, help="checkpoints, or 'oracle'")
    c.add_argument("--cascade", nargs="+", required=True)
    c.add_argument("--world")

    th = sub.add_parser("theorems", parents=[common], help="run the theorem-consequence suite")
    th.add_argument("--skip-training", action="store_true", help="omit the training-based check")
    sub.add_parser("benchmark", parents=[common], help="wall-time scaling in k and N")
    return p


GLOBAL_DEFAULTS = dict(config=None, seed=None, out=".", quiet=False)

COMMANDS = {
    "gen-world": cmd_gen_world,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "theorems": cmd_theorems,
    "benchmark": cmd_benchmark,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DimensionMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIMS


if __name__ == "__main__":
    sys.exit(main())
