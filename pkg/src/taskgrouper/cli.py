"""Command-line entry point over the experiment harness.

Subcommands: pretrain, group, finetune, sweep, ablate-epsilon, capacity,
oracle, report. Exit codes: 0 success, 1 any failed run, 2 config error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentSpec,
    brute_force_oracle,
    report,
    run_capacity_experiment,
    run_epsilon_ablation,
    run_pipeline,
    run_sweep,
)
from .routing import hard_assignment
from .trainer import (
    RecognitionHead,
    TrainingDivergedError,
    finetune_heads,
    pretrain_universal,
    read_head,
    read_logits,
    write_checkpoint,
)


def _add_global_flags(parser: argparse.ArgumentParser, suppress: bool):
    # global flags are accepted both before and after the subcommand; the
    # subparser copies use SUPPRESS so they never clobber values parsed early
    d = (lambda _v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", type=Path, default=d(None), help="JSON experiment spec")
    parser.add_argument("--seed", type=int, default=d(None), help="override: single run seed")
    parser.add_argument("--out", type=Path, default=d(None), help="output directory")
    parser.add_argument("--workers", type=int, default=d(1), help="parallel runs within a sweep")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskgrouper",
        description="Train and analyze learned task-to-head groupings on synthetic scripts.",
    )
    _add_global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_global_flags(p, suppress=True)
        return p

    command("pretrain", "stage 1: universal head(s) over all tasks")
    p_group = command("group", "stages 1+2: joint grouping training for one seed")
    p_group.add_argument("--m", type=int, default=None, help="head count (default: first in spec)")
    p_fine = command("finetune", "stage 3 on an existing group checkpoint")
    p_fine.add_argument("--run-dir", type=Path, required=True, help="checkpoint from `group`")
    command("sweep", "full pipeline over all (head count, seed) pairs")
    p_abl = command("ablate-epsilon", "assignment-change counts per epsilon")
    p_abl.add_argument("--epsilons", default="0.0,0.1,0.2,0.3,0.4",
                       help="comma-separated epsilon values")
    command("capacity", "heterogeneous-head assignment experiment")
    p_oracle = command("oracle", "brute-force ranking of all hard groupings")
    p_oracle.add_argument("--m", type=int, default=None, help="head count (default: first in spec)")
    p_rep = command("report", "summarize artifacts in a directory")
    p_rep.add_argument("dir", nargs="?", type=Path, default=None,
                       help="artifact directory (default: --out or spec out_dir)")
    return parser


def _load_spec(args) -> ExperimentSpec:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    spec = ExperimentSpec.from_json_file(args.config, out_dir=args.out)
    if args.seed is not None:
        spec.seeds = [args.seed]
    return spec


def _cmd_pretrain(args) -> int:
    spec = _load_spec(args)
    world = spec.build_world()
    m = max(spec.head_counts)
    cfg = spec.template.pretrain_config(m)
    result = pretrain_universal(cfg, world)
    out = spec.out_dir / "pretrain"
    heads = {}
    for idx, (config, state) in enumerate(sorted(result.states.items())):
        heads[idx] = RecognitionHead.from_arrays(
            idx, world.feature_dim, config[0], config[1], result.charset, state
        )
    write_checkpoint(out, cfg, None, None, heads)
    for config, history in result.loss_history.items():
        first = history[0] if history else float("nan")
        last = history[-1] if history else float("nan")
        print(f"pretrained (embed={config[0]}, hidden={config[1]}): "
              f"loss {first:.4f} -> {last:.4f}")
    print(f"saved universal weights to {out}")
    return 0


def _cmd_group(args) -> int:
    spec = _load_spec(args)
    m = args.m or spec.head_counts[0]
    seed = spec.seeds[0]
    world = spec.build_world()
    pretrained = pretrain_universal(spec.template.pretrain_config(m), world)
    run_dir = spec.out_dir / f"run_m{m}_seed{seed}"
    result, _ = run_pipeline(spec, m, seed, pretrained, out_dir=run_dir, finetune=False)
    print(f"final grouping: {result.final_grouping().to_string()}")
    print(f"checkpoint written to {run_dir}")
    return 0


def _cmd_finetune(args) -> int:
    spec = _load_spec(args)
    run_dir = args.run_dir
    if not (run_dir / "logits.json").exists():
        raise ConfigError(f"{run_dir} does not look like a group checkpoint")
    logits = read_logits(run_dir)
    grouping = hard_assignment(logits)
    world = spec.build_world()
    m = logits.num_models
    heads = [read_head(run_dir, j) for j in range(m)]
    cfg = spec.template.finetune_config(spec.seeds[0], m)
    final = finetune_heads(cfg, grouping, heads, world)
    write_checkpoint(run_dir / "final", cfg, None, None, final)
    kept = ",".join(str(j) for j in sorted(final))
    print(f"grouping {grouping.to_string()}; fine-tuned heads [{kept}] -> {run_dir / 'final'}")
    return 0


def _cmd_sweep(args) -> int:
    spec = _load_spec(args)
    result = run_sweep(spec, workers=args.workers)
    ok = sum(r.ok for r in result.records)
    print(f"sweep finished: {ok}/{len(result.records)} runs ok; "
          f"artifacts in {result.out_dir}")
    for row in result.table.rows:
        print(f"  {'+'.join(f'T{t}' for t in row.group)}: "
              f"{row.occurrences} occurrence(s), first at m={row.heads_at_first}")
    return 1 if result.any_failed else 0


def _cmd_ablate(args) -> int:
    spec = _load_spec(args)
    epsilons = [float(e) for e in args.epsilons.split(",") if e.strip()]
    result = run_epsilon_ablation(spec, epsilons, workers=args.workers)
    print(f"assignment changes within the first {result.horizon} iterations:")
    for row in result.rows:
        print(f"  epsilon={row.epsilon}: mean {row.mean_changes:.2f} {row.changes}")
    return 0


def _cmd_capacity(args) -> int:
    spec = _load_spec(args)
    result = run_capacity_experiment(spec, workers=args.workers)
    world = spec.build_world()
    hits = result.largest_to_largest_count(world)
    print(f"largest head took the largest-charset task in {hits}/{len(result.seeds())} seeds")
    print(f"capacity table written to {result.out_dir / 'capacity.csv'}")
    return 0


def _cmd_oracle(args) -> int:
    spec = _load_spec(args)
    world = spec.build_world()
    m = args.m or spec.head_counts[0]
    result = brute_force_oracle(world, m, spec.template, seed=spec.seeds[0],
                                workers=args.workers)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    result.to_csv(spec.out_dir / "oracle.csv", world.num_tasks)
    print(f"metric: {result.metric}")
    for entry in result.entries[:5]:
        print(f"  {entry.grouping.to_string()}: mean accuracy {entry.mean_accuracy:.4f}")
    print(f"full ranking written to {spec.out_dir / 'oracle.csv'}")
    return 0


def _cmd_report(args) -> int:
    target = args.dir or args.out
    if target is None:
        spec = _load_spec(args)
        target = spec.out_dir
    print(report(target))
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "group": _cmd_group,
    "finetune": _cmd_finetune,
    "sweep": _cmd_sweep,
    "ablate-epsilon": _cmd_ablate,
    "capacity": _cmd_capacity,
    "oracle": _cmd_oracle,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValueError as exc:  # ConfigError, bad world specs, bad train settings
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
