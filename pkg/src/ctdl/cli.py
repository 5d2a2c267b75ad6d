"""ctdl command line: train, explain, provide, compare, render, inspect.

Exit status is 0 on success, 1 when the configuration or an input file is
invalid (nothing has been computed yet), and 2 when a run fails. Diagnostics
go to stderr; results go to files under the output root, which defaults to
``$CTDL_OUTPUT_ROOT`` or ``./runs``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import env as envs
from . import harness, render
from .agent import load_agent, run_test_trial
from .config import DEFAULT_GRID, GROUPS, PRESETS, ExperimentConfig, apply_overrides, config_from_dict, load_config, save_config
from .errors import ConfigurationError, ExplanationFormatError
from .explain import generate_online, load_environment, load_explanation, prune, save_explanation, trace_rows

log = logging.getLogger("ctdl")

OUTPUT_ROOT_VAR = "CTDL_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; here that is a validation error (1)
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_VAR, "runs"))


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON (default: built-in grid world preset)")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seed", type=int)
    p.add_argument("--population", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--test-episodes", type=int)
    p.add_argument("--stochastic-test", action="store_true", default=None)
    p.add_argument("--n-jobs", type=int)
    p.add_argument("--variant", choices=("ctdl-discrete", "ctdl-continuous", "a2c-baseline"))
    p.add_argument("--tau", type=float)
    p.add_argument("--out", help="output root (default $%s or ./runs)" % OUTPUT_ROOT_VAR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctdl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a population and checkpoint explanations")
    _config_flags(p)
    p.add_argument("--save-agents", action="store_true")

    p = sub.add_parser("explain", help="explanation(s) from a saved agent")
    p.add_argument("--agent", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-episodes", type=int, default=1)
    p.add_argument("--stochastic-test", action="store_true")
    p.add_argument("--online", action="store_true", help="prune while the test episode runs")
    p.add_argument("--out", required=True, help="explanation file (suffixed per test episode when several)")

    p = sub.add_parser("provide", help="train agents that receive explanation file(s)")
    _config_flags(p)
    p.add_argument("--explanation", nargs="+", help="explanation file(s); each agent picks one")
    p.add_argument("--group", choices=GROUPS[1:], help="label for the receiving group")

    p = sub.add_parser("compare", help="source population, then seed-matched receiver groups")
    _config_flags(p)
    p.add_argument("--groups", default="none,explanation,shuffled",
                   help="comma list from none, explanation, explanation-<episode>, shuffled")
    p.add_argument("--a2c", action="store_true", help="add A2C groups with and without the explanation")

    p = sub.add_parser("render", help="SVG/ASCII grid figure or mountain-car CSV for an explanation")
    p.add_argument("--explanation", required=True)
    p.add_argument("--config", help="environment source when the file carries none")
    p.add_argument("--agent", help="agent checkpoint whose test trial is overlaid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("svg", "ascii", "csv"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect", help="print an explanation file")
    p.add_argument("file")
    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({"env": DEFAULT_GRID})
    return apply_overrides(
        cfg,
        preset=args.preset,
        seed=args.seed,
        population=args.population,
        episodes=args.episodes,
        checkpoint_every=args.checkpoint_every,
        threshold=args.threshold,
        test_episodes=args.test_episodes,
        test_stochastic=args.stochastic_test,
        n_jobs=args.n_jobs,
        variant=args.variant,
        tau=args.tau,
    )


def _run_dir(args, cfg: ExperimentConfig) -> Path:
    root = Path(args.out) if args.out else output_root()
    run_dir = harness.make_run_dir(root, cfg)
    save_config(cfg, run_dir / "config.json")
    return run_dir


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    run_dir = _run_dir(args, cfg)
    records = harness.train_population(cfg, keep_agents=args.save_agents)
    harness.write_records(records, cfg, run_dir, save_agents=args.save_agents)
    failed = [r.agent_id for r in records if r.failed]
    if len(failed) == len(records):
        log.error("every agent failed; see %s", run_dir / "records.json")
        return 2
    if any(r.checkpoints for r in records):
        harness.write_source(harness.explanations_from_source(records, cfg), cfg, run_dir)
    report = harness.run_group_comparison(cfg, [harness.GroupSpec("none")], cached={"none": records})
    harness.write_report(report, run_dir)
    if failed:
        log.warning("failed agents: %s", failed)
    print(run_dir, file=sys.stderr)
    return 0


def cmd_explain(args) -> int:
    if not 0 < args.threshold < 1:
        raise ConfigurationError(f"--threshold must lie in (0, 1), got {args.threshold}")
    if args.test_episodes < 1:
        raise ConfigurationError("--test-episodes must be positive")
    if not Path(args.agent).exists():
        raise ConfigurationError(f"agent checkpoint not found: {args.agent}")
    agent = load_agent(args.agent)
    env = envs.make_env(agent.env_spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for k in range(args.test_episodes):
        rng = harness.derive_rng(args.seed, harness.TEST, 0, k)
        prov = {"agent_file": str(args.agent), "test_episode": k, "environment": agent.env_spec.kind,
                "seed": args.seed}
        if args.online:
            expl = generate_online(agent, env, args.threshold, rng, args.stochastic_test, prov)
        else:
            trace = run_test_trial(agent, env, rng, stochastic=args.stochastic_test)
            prov["test_reward"] = trace.total_reward
            expl = prune(trace_rows(trace), args.threshold, prov)
        path = out if args.test_episodes == 1 else out.with_name(f"{out.stem}_test{k:02d}{out.suffix}")
        save_explanation(expl, path, agent.env_spec)
        log.info("%s: %d entries", path, len(expl))
    return 0


def cmd_provide(args) -> int:
    cfg = _load_cfg(args)
    files = args.explanation or cfg.explanation_files
    if not files:
        raise ConfigurationError("provide needs --explanation or explanation_files in the config")
    group = args.group or (cfg.group if cfg.group != "none" else "explanation")
    spec = harness.GroupSpec.from_files(group, files)
    cfg = cfg.replace(group=group, explanation_files=[str(f) for f in files])
    run_dir = _run_dir(args, cfg)
    report = harness.run_group_comparison(cfg, [spec])
    harness.write_records(report.groups[group].records, cfg, run_dir)
    harness.write_report(report, run_dir)
    print(run_dir, file=sys.stderr)
    return 0


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    groups = [g.strip() for g in args.groups.split(",") if g.strip()]
    for g in groups:
        if g not in GROUPS and not (g.startswith("explanation-") and g.split("-", 1)[1].isdigit()):
            raise ConfigurationError(f"unknown group {g!r}")
        if g.startswith("explanation-") and int(g.split("-", 1)[1]) not in cfg.checkpoints:
            raise ConfigurationError(f"group {g!r}: no checkpoint at that episode (checkpoints {cfg.checkpoints})")
    run_dir = _run_dir(args, cfg)
    source, report = harness.run_protocol(cfg, groups, a2c=args.a2c)
    harness.write_records(source.records, cfg, run_dir)
    harness.write_source(source, cfg, run_dir)
    harness.write_report(report, run_dir)
    print(run_dir, file=sys.stderr)
    return 0


def cmd_render(args) -> int:
    if not Path(args.explanation).exists():
        raise ConfigurationError(f"explanation file not found: {args.explanation}")
    expl = load_explanation(args.explanation)
    spec = load_environment(args.explanation)
    if spec is None:
        if not args.config:
            raise ConfigurationError("explanation carries no environment; pass --config")
        spec = load_config(args.config).env
    trace = None
    if args.agent:
        agent = load_agent(args.agent)
        trace = run_test_trial(agent, envs.make_env(spec), harness.derive_rng(args.seed, harness.TEST))
    grid = isinstance(spec, envs.GridWorldSpec)
    fmt = args.format or ("svg" if grid else "csv")
    if grid and fmt == "csv" or not grid and fmt != "csv":
        raise ConfigurationError(f"format {fmt!r} does not apply to {spec.kind}")
    if grid:
        r = render.render_gridworld(spec, expl, trace)
        text = r.svg if fmt == "svg" else r.ascii + "\n"
    else:
        text = render.export_mc_plot_data(trace, expl, spec)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    render.write_text(text, args.out)
    return 0


def format_listing(expl, spec=None) -> str:
    lines = [f"threshold {expl.threshold_used:.3f}  provenance {json.dumps(expl.provenance, sort_keys=True)}"]
    lines.append(f"{'#':>3}  {'t':>5}  {'state':<28}  {'action':>8}  {'value':>10}  {'beta':>6}")
    for i, e in enumerate(expl.entries):
        state = envs.denormalize(spec, e.memory) if spec is not None else np.asarray(e.memory)
        state_s = "(" + ", ".join(f"{v:.4g}" for v in state) + ")"
        if isinstance(e.action, int):
            action_s = envs.ACTION_NAMES[e.action] if spec is not None and spec.kind == "gridworld" else str(e.action)
        else:
            action_s = f"{float(np.ravel(e.action)[0]):+.4f}"
        lines.append(f"{i:>3}  {e.source_t:>5}  {state_s:<28}  {action_s:>8}  {e.value:>10.4f}  {e.beta:>6.3f}")
    lines.append(f"{len(expl)} entries")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    if not Path(args.file).exists():
        raise ConfigurationError(f"explanation file not found: {args.file}")
    expl = load_explanation(args.file)
    print(format_listing(expl, load_environment(args.file)))
    return 0


COMMANDS = {
    "train": cmd_train,
    "explain": cmd_explain,
    "provide": cmd_provide,
    "compare": cmd_compare,
    "render": cmd_render,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ExplanationFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any failure during compute is a runtime error
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
