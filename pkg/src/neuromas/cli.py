"""Command-line entry point: ``neuromas <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from neuromas.config import RunConfig, config_from_dict, load_config, topology_from_text
from neuromas.errors import NeuroMASError
from neuromas.growth import compare_schedule, grow, growth_schedule_run
from neuromas.messaging import FOOTER_KINDS, NONE, Footer, footer_for_task
from neuromas.policy import GREEDY, SAMPLE, PolicySet
from neuromas.runtime import forward, write_traces
from neuromas.tasks import exact_match_reward, load_task_file
from neuromas.topology import growth_map
from neuromas.trainer import BaselineState, train_loop, write_metrics

log = logging.getLogger("neuromas")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else config_from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.trainer = replace(cfg.trainer, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        cfg.trainer = replace(cfg.trainer, steps=args.steps)
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    return cfg


def _endpoint(cfg: RunConfig):
    from neuromas.llmclient import EndpointConfig

    if not cfg.endpoint:
        raise UsageError("--remote needs an 'endpoint' section in the config")
    try:
        return EndpointConfig.from_dict(cfg.endpoint)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _toy_policies(cfg: RunConfig, checkpoint: str | None, topology) -> PolicySet:
    if checkpoint:
        return PolicySet.load(checkpoint)
    if cfg.task is None:
        # no task to size the model: a plain decimal-digit toy model
        from neuromas.config import TaskSpec, build_model

        model = build_model(TaskSpec(("identity",), 4, 10), cfg.model, depth=topology.depth, width=topology.max_width)
    else:
        model = cfg.build_model()
    return model.init(topology, cfg.seed)


# -- subcommands ----------------------------------------------------------------------


def cmd_forward(args) -> int:
    cfg = _config(args)
    topology = topology_from_text(args.topology) if args.topology else cfg.topology
    footer = Footer(args.footer, args.function_prompt or "")
    task_kind = "verbatim" if args.footer == NONE else args.footer
    if args.remote:
        from neuromas.llmclient import remote_forward

        trace = remote_forward(_endpoint(cfg), topology, args.input, footer=footer, task_kind=task_kind)
    else:
        pol = _toy_policies(cfg, args.checkpoint, topology)
        if pol.topology != topology:
            topology = pol.topology
        trace = forward(pol, topology, args.input, seed=cfg.seed, episode=args.episode, mode=args.mode,
                        footer=footer, task_kind=task_kind, max_tokens=args.max_tokens or cfg.trainer.max_tokens)
    print(trace.answer_raw if trace.answer_raw is not None else "")
    line = json.dumps(trace.to_dict(), sort_keys=True)
    if args.trace_out:
        write_traces([trace], args.trace_out)
    else:
        print(line)
    if trace.error:
        log.error("episode failed: %s", trace.error)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.topology:
        cfg.topology = topology_from_text(args.topology)
    train, dev = cfg.splits()
    model = cfg.build_model()
    out = Path(cfg.output_dir)
    pol = model.init(cfg.topology, cfg.seed)
    res = train_loop(pol, cfg.topology, train, dev, cfg.trainer,
                     checkpoint_dir=out / "checkpoints" if args.save_checkpoints else None)
    write_metrics(res.history, out / "metrics.csv")
    res.best.save(out / "best.json")
    (out / "baselines.json").write_text(json.dumps(res.baselines.to_dict()) + "\n")
    _emit({"topology": cfg.topology.dashed(), "initial_dev": res.initial_dev, "best_dev": res.best_dev,
           "best_step": res.best_step, "metrics": str(out / "metrics.csv"), "checkpoint": str(out / "best.json")})
    return EXIT_OK


def cmd_grow(args) -> int:
    cfg = _config(args)
    src = PolicySet.load(args.from_checkpoint)
    target = topology_from_text(args.target_topology)
    mapping = growth_map(src.topology, target)
    grown = grow(src, target)
    baselines = None
    bl_path = Path(args.from_checkpoint).with_name("baselines.json")
    if bl_path.exists():
        from neuromas.growth import grow_baselines

        baselines = grow_baselines(BaselineState.from_dict(json.loads(bl_path.read_text())), mapping)
    out = Path(cfg.output_dir)
    result = {"source": str(src.topology), "target": target.dashed(), "fresh": [str(a) for a in mapping.fresh]}
    if cfg.task is not None and cfg.trainer.steps > 0:
        train, dev = cfg.splits()
        res = train_loop(grown, target, train, dev, cfg.trainer, baselines=baselines)
        write_metrics(res.history, out / "metrics.csv")
        grown = res.best
        result.update(initial_dev=res.initial_dev, best_dev=res.best_dev, metrics=str(out / "metrics.csv"))
    grown.save(out / "best.json")
    result["checkpoint"] = str(out / "best.json")
    _emit(result)
    return EXIT_OK


def _stage_configs(cfg: RunConfig, n: int):
    overrides = cfg.schedule.get("stages") or [{}] * n
    if len(overrides) != n:
        raise UsageError(f"schedule: {n} topologies but {len(overrides)} stage entries")
    return [replace(cfg.trainer, **o) for o in overrides]


def cmd_schedule(args) -> int:
    cfg = _config(args)
    sched = cfg.schedule
    allowed = {"topologies", "seeds", "stages", "control_steps"}
    if set(sched) - allowed:
        raise UsageError(f"schedule: unknown keys {sorted(set(sched) - allowed)}")
    if not sched.get("topologies"):
        raise UsageError("config has no schedule.topologies")
    topologies = [topology_from_text(t) for t in sched["topologies"]]
    configs = _stage_configs(cfg, len(topologies))
    train, dev = cfg.splits()
    model = cfg.build_model()
    out = Path(cfg.output_dir)
    seeds = [int(s) for s in sched.get("seeds", [cfg.seed])]
    if args.no_controls:
        run = growth_schedule_run(topologies, configs, train, dev, model.init(topologies[0], seeds[0]), out_dir=out)
        _emit({"stages": [s.to_dict() for s in run.stages]})
        return EXIT_OK
    rows = compare_schedule(topologies, configs, train, dev, lambda t, s: model.init(t, s), seeds,
                            control_steps=sched.get("control_steps", "stage"), out_dir=out)
    for r in rows:
        print(f"seed={r.seed} stage={r.stage} topology={r.topology.dashed()} "
              f"from_scratch={r.from_scratch_best_dev:.4f} progressive={r.progressive_best_dev:.4f}")
    _emit({"comparison": str(out / "comparison.csv")})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    tasks = load_task_file(args.tasks)
    max_tokens = args.max_tokens or cfg.trainer.max_tokens
    hits = 0.0
    traces = []
    if args.remote:
        from neuromas.llmclient import remote_forward

        ep = _endpoint(cfg)
        topology = topology_from_text(args.topology) if args.topology else cfg.topology
        for i, t in enumerate(tasks):
            tr = remote_forward(ep, topology, t.input, footer=footer_for_task(t.task_kind), task_kind=t.task_kind, episode=i)
            tr.reward = exact_match_reward(t.gold, tr.answer)
            hits += tr.reward
            traces.append(tr)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --remote)")
        pol = PolicySet.load(args.checkpoint)
        for i, t in enumerate(tasks):
            tr = forward(pol, pol.topology, t.input, seed=cfg.seed, episode=i, mode=GREEDY,
                         footer=footer_for_task(t.task_kind), task_kind=t.task_kind, max_tokens=max_tokens)
            tr.reward = exact_match_reward(t.gold, tr.answer)
            hits += tr.reward
            traces.append(tr)
    if args.trace_out:
        write_traces(traces, args.trace_out, append=False)
    acc = hits / len(tasks) if tasks else 0.0
    _emit({"accuracy": acc, "n": len(tasks)})
    return EXIT_OK


def cmd_sweep(args) -> int:
    from neuromas.theorylab import SweepSpec, check_ordering, run_sweep, write_sweep

    cfg = _config(args)
    if not cfg.sweep:
        raise UsageError("config has no 'sweep' section")
    spec = SweepSpec.from_config(cfg.sweep, cfg.require_task(), cfg.trainer, cfg.model, cfg.seed)
    result = run_sweep(spec)
    cells, summary = write_sweep(result, cfg.output_dir)
    report = check_ordering(result)
    for row in report.per_budget:
        print(f"q={row['q']} multi={row['multi_error']:.4f} single={row['single_error']:.4f} sign={row['sign']:+d}")
    print(f"crossover q0: {report.q0_text}")
    _emit({"cells": str(cells), "summary": str(summary)})
    return EXIT_OK


def cmd_verify(args) -> int:
    from neuromas.verify import run_all

    checks = run_all(args.seed or 0)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} properties passed")
    return EXIT_VERIFY if failed else EXIT_OK


# -- parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuromas", description="Layered multi-node text systems trained from a terminal reward.")
    p.add_argument("--json", action="store_true", help="report failures as a JSON object on stderr")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")

    sp = sub.add_parser("forward", help="run one forward pass and print the answer")
    common(sp)
    sp.add_argument("--topology")
    sp.add_argument("--input", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--remote", action="store_true")
    sp.add_argument("--mode", choices=(SAMPLE, GREEDY), default=SAMPLE)
    sp.add_argument("--footer", choices=FOOTER_KINDS, default=NONE)
    sp.add_argument("--function-prompt")
    sp.add_argument("--episode", type=int, default=0)
    sp.add_argument("--max-tokens", type=int)
    sp.add_argument("--trace-out")
    sp.set_defaults(fn=cmd_forward)

    sp = sub.add_parser("train", help="train a topology from scratch")
    common(sp, True)
    sp.add_argument("--topology")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--save-checkpoints", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("grow", help="grow a checkpoint into a larger topology and keep training")
    common(sp)
    sp.add_argument("--from-checkpoint", required=True)
    sp.add_argument("--target-topology", required=True)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(fn=cmd_grow)

    sp = sub.add_parser("schedule", help="progressive schedule vs. from-scratch controls")
    common(sp, True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--no-controls", action="store_true")
    sp.set_defaults(fn=cmd_schedule)

    sp = sub.add_parser("eval", help="greedy exact-match accuracy on a task file")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--tasks", required=True)
    sp.add_argument("--topology")
    sp.add_argument("--remote", action="store_true")
    sp.add_argument("--max-tokens", type=int)
    sp.add_argument("--trace-out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sweep", help="parameter-budget sweep, single vs. multi")
    common(sp, True)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("verify", help="run the brute-force oracle suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_verify)
    return p


def _fail(args_json: bool, code: int, kind: str, message: str) -> int:
    if args_json:
        sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"error: {message}\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    want_json = "--json" in argv
    argv = [a for a in argv if a != "--json"]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand (forward, train, grow, schedule, eval, sweep, verify)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except UsageError as exc:
        return _fail(want_json, EXIT_USAGE, "usage", str(exc))
    except NeuroMASError as exc:
        return _fail(want_json, EXIT_RUNTIME, type(exc).__name__, str(exc))
    except (OSError, ValueError, KeyError) as exc:
        return _fail(want_json, EXIT_RUNTIME, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
