"""Command line front end.

Subcommands: smooth, fold, gen-goals, gen-demos, ablate, report, replay.
Options come from an optional ``key = value`` config file plus flag
overrides; flags win. All randomness derives from one root seed: a command
running N rollouts uses seeds root, root+1, ..., root+N-1.

Config file schema (one ``key = value`` per line, ``#`` comments; values are
parsed as JSON scalars where possible):

  kind, backend, max_actions, seed, size_index, rotation_deg, trials,
  ablations (comma separated), proximity_threshold, direction_tolerance,
  max_queries                      -> rollout fields
  archive_dir, cache_dir, workers, seeds, format
                                   -> run options
  model, base_url, max_tokens, timeout_s, max_attempts, api_key_env,
  record_path, replay_path         -> chat options (the API key itself is
                                      read from the environment, never from
                                      the file)

Exit codes: 0 success, 2 configuration error, 3 acceptance-threshold
failure.
"""

import argparse
import dataclasses
import json
import logging
import pathlib
import sys

from . import harness, llm, tasks
from .harness import ConfigError, RolloutConfig
from .metrics import EmptyInput
from .sim import SimError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_THRESHOLD = 3

REPLAY_TOLERANCE_MM = 5.0

_ROLLOUT_KEYS = (
    "kind",
    "backend",
    "max_actions",
    "seed",
    "size_index",
    "rotation_deg",
    "trials",
    "ablations",
    "proximity_threshold",
    "direction_tolerance",
    "max_queries",
)
_RUN_KEYS = ("archive_dir", "cache_dir", "workers", "seeds", "format")
_CHAT_KEYS = (
    "model",
    "base_url",
    "max_tokens",
    "timeout_s",
    "max_attempts",
    "api_key_env",
    "record_path",
    "replay_path",
)


def parse_config_file(path) -> dict:
    """Read the ``key = value`` config file into a dict."""
    values: dict = {}
    text = pathlib.Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _ROLLOUT_KEYS + _RUN_KEYS + _CHAT_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    if isinstance(values.get("ablations"), str):
        values["ablations"] = [
            a.strip() for a in values["ablations"].split(",") if a.strip()
        ]
    return values


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--backend", help="proposer backend")
    sub.add_argument("--seed", type=int, help="root seed (default 0)")
    sub.add_argument("--seeds", type=int, help="number of seeded rollouts (default 1)")
    sub.add_argument("--archive-dir", help="write per-rollout archives here")
    sub.add_argument("--cache-dir", help="subgoal/demo cache directory")
    sub.add_argument("--workers", type=int, help="parallel rollout workers")
    sub.add_argument("--model", help="chat model name")
    sub.add_argument("--base-url", help="chat API base URL")
    sub.add_argument("--record-path", help="record live chat traffic to this JSONL")
    sub.add_argument("--replay-path", help="serve chat responses from this JSONL")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fabriclab",
        description="Fabric smoothing and folding rollouts, goal generation, and reports.",
    )
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("smooth", help="run smoothing rollouts")
    _add_common(sp)
    sp.add_argument("--budget", type=int, choices=harness.SMOOTHING_BUDGETS,
                    help="max actions per rollout")
    sp.add_argument("--ablation", action="append", default=None,
                    help="smoothing ablation flag (repeatable)")

    fp = sub.add_parser("fold", help="run folding rollouts")
    _add_common(fp)
    fp.add_argument("--task", choices=tasks.TASKS, required=True)
    fp.add_argument("--size-index", type=int, help="sweep size index 0..9")
    fp.add_argument("--rotation", type=float, help="sweep rotation in degrees")
    fp.add_argument("--trials", type=int, help="trials to average per rollout")
    fp.add_argument("--sweep", action="store_true",
                    help="run every size/rotation combination")
    fp.add_argument("--ablation", action="append", default=None,
                    help="folding prompt ablation flag (repeatable)")

    gp = sub.add_parser("gen-goals", help="generate cached subgoal sequences")
    gp.add_argument("--task", choices=tasks.TASKS + ("all",), default="all")
    gp.add_argument("--cache-dir", help="cache directory (default goals)")
    gp.add_argument("--check", action="store_true",
                    help="verify replay self-consistency under "
                         f"{REPLAY_TOLERANCE_MM:g} mm; exit 3 on failure")

    dp = sub.add_parser("gen-demos", help="build the in-context demo store")
    dp.add_argument("--task", choices=tasks.TASKS, required=True)
    dp.add_argument("--cache-dir", help="cache directory (default goals)")

    ap = sub.add_parser("ablate", help="run the ablation suite as a smoke sweep")
    _add_common(ap)
    ap.add_argument("--task", choices=tasks.TASKS,
                    help="folding task; omit for the smoothing suite")
    ap.add_argument("--budget", type=int, choices=harness.SMOOTHING_BUDGETS)

    rp = sub.add_parser("report", help="aggregate archived records into tables")
    rp.add_argument("--glob", required=True, help="pattern matching record.json files")
    rp.add_argument("--format", choices=("text", "csv", "jsonl"), default=None)

    yp = sub.add_parser("replay", help="re-run archived configs and compare metrics")
    yp.add_argument("--glob", required=True, help="pattern matching record.json files")
    yp.add_argument("--cache-dir", help="subgoal cache for folding configs")
    yp.add_argument("--replay-path", help="chat transcript for llm configs")

    return p


def _merge(args: argparse.Namespace, file_values: dict, key: str, default=None):
    cli_value = getattr(args, key, None)
    if cli_value is not None:
        return cli_value
    if key in file_values:
        return file_values[key]
    return default


def _build_chat_fn(args, file_values, backend: str):
    if not backend.startswith("llm"):
        return None
    overrides = {}
    for key in ("model", "base_url", "max_tokens", "timeout_s", "max_attempts", "api_key_env"):
        value = _merge(args, file_values, key)
        if value is not None:
            overrides[key] = value
    config = dataclasses.replace(llm.ChatConfig(), **overrides)
    replay_path = _merge(args, file_values, "replay_path")
    record_path = _merge(args, file_values, "record_path")
    if replay_path:
        transport = llm.ReplayTransport(replay_path)
    else:
        transport = llm.HttpTransport(config)
    if record_path:
        transport = llm.RecordingTransport(transport, record_path)
    client = llm.ChatClient(config=config, transport=transport)
    return harness.chat_fn_from_client(client)


def _rollout_overrides(args, file_values) -> dict:
    out = {}
    for key in ("proximity_threshold", "direction_tolerance", "max_queries"):
        value = _merge(args, file_values, key)
        if value is not None:
            out[key] = value
    return out


def _print_report(records, fmt: str) -> None:
    rep = harness.report(records)
    if fmt == "csv":
        print(rep.to_csv())
    elif fmt == "jsonl":
        print(rep.to_jsonl())
    else:
        print(rep.to_text())


def _cmd_smooth(args, file_values) -> int:
    backend = _merge(args, file_values, "backend", "heuristic")
    root_seed = _merge(args, file_values, "seed", 0)
    n = _merge(args, file_values, "seeds", 1)
    budget = args.budget if args.budget is not None else file_values.get("max_actions")
    ablations = tuple(args.ablation or file_values.get("ablations", ()))
    configs = [
        RolloutConfig(
            kind=harness.SMOOTH,
            backend=backend,
            max_actions=budget,
            seed=root_seed + i,
            ablations=ablations,
            **_rollout_overrides(args, file_values),
        )
        for i in range(n)
    ]
    chat_fn = _build_chat_fn(args, file_values, backend)
    records = harness.run_many(
        configs,
        workers=_merge(args, file_values, "workers", 1),
        chat_fn=chat_fn,
        archive_dir=_merge(args, file_values, "archive_dir"),
    )
    _print_report(records, _merge(args, file_values, "format", "text"))
    return EXIT_OK


def _cmd_fold(args, file_values) -> int:
    backend = _merge(args, file_values, "backend", "oracle")
    root_seed = _merge(args, file_values, "seed", 0)
    n = _merge(args, file_values, "seeds", 1)
    trials = _merge(args, file_values, "trials", 1)
    ablations = tuple(args.ablation or file_values.get("ablations", ()))
    if args.sweep:
        combos = [
            (i, rot)
            for i in range(len(tasks.SQUARE_SIDES))
            for rot in tasks.ROTATIONS_DEG
        ]
    else:
        combos = [
            (
                _merge(args, file_values, "size_index", 0),
                _merge(args, file_values, "rotation_deg", 0.0)
                if args.rotation is None
                else args.rotation,
            )
        ]
    configs = [
        RolloutConfig(
            kind=harness.FOLD_PREFIX + args.task,
            backend=backend,
            seed=root_seed + i,
            size_index=size,
            rotation_deg=float(rot),
            trials=trials,
            ablations=ablations,
        )
        for i in range(n)
        for size, rot in combos
    ]
    chat_fn = _build_chat_fn(args, file_values, backend)
    records = harness.run_many(
        configs,
        workers=_merge(args, file_values, "workers", 1),
        chat_fn=chat_fn,
        archive_dir=_merge(args, file_values, "archive_dir"),
        cache_dir=_merge(args, file_values, "cache_dir"),
    )
    _print_report(records, _merge(args, file_values, "format", "text"))
    return EXIT_OK


def _cmd_gen_goals(args, file_values) -> int:
    cache_dir = _merge(args, file_values, "cache_dir", "goals")
    names = tasks.TASKS if args.task == "all" else (args.task,)
    worst = 0.0
    for task in names:
        for spec in tasks.sweep_specs(task):
            seq = tasks.make_subgoal_sequence(task, spec, cache_dir=cache_dir)
            if args.check:
                err = tasks.replay_error_mm(seq)
                worst = max(worst, err)
                if err >= REPLAY_TOLERANCE_MM:
                    print(
                        f"FAIL {task} size {spec.side_x:.4f}x{spec.side_y:.4f} "
                        f"rot {spec.rotation:.3f}: replay error {err:.2f} mm"
                    )
                    return EXIT_THRESHOLD
        print(f"{task}: {len(tasks.sweep_specs(task))} sequences cached")
    if args.check:
        print(f"replay self-consistency OK (worst {worst:.2f} mm)")
    return EXIT_OK


def _cmd_gen_demos(args, file_values) -> int:
    cache_dir = _merge(args, file_values, "cache_dir", "goals")
    per_step = tasks.build_demonstrations(args.task, cache_dir=cache_dir)
    total = sum(len(step) for step in per_step)
    expected = tasks.DEMOS_PER_ACTION * tasks.TASK_HORIZON[args.task]
    print(f"{args.task}: {total} demonstrations ({len(per_step)} steps x "
          f"{tasks.DEMOS_PER_ACTION})")
    if total != expected:
        print(f"FAIL expected {expected} demonstrations")
        return EXIT_THRESHOLD
    return EXIT_OK


def _cmd_ablate(args, file_values) -> int:
    root_seed = _merge(args, file_values, "seed", 0)
    n = _merge(args, file_values, "seeds", 2)
    if args.task:
        kind = harness.FOLD_PREFIX + args.task
        backend = _merge(args, file_values, "backend", "oracle")
        flags = harness.FOLDING_ABLATIONS
        extra = {}
    else:
        kind = harness.SMOOTH
        backend = _merge(args, file_values, "backend", "heuristic")
        flags = harness.SMOOTHING_ABLATIONS
        extra = {"max_actions": args.budget or file_values.get("max_actions")}
    suites = [()] + [(flag,) for flag in flags]
    configs = [
        RolloutConfig(kind=kind, backend=backend, seed=root_seed + i,
                      ablations=ablation, **extra)
        for ablation in suites
        for i in range(n)
    ]
    chat_fn = _build_chat_fn(args, file_values, backend)
    records = harness.run_many(
        configs,
        workers=_merge(args, file_values, "workers", 1),
        chat_fn=chat_fn,
        archive_dir=_merge(args, file_values, "archive_dir"),
        cache_dir=_merge(args, file_values, "cache_dir"),
    )
    _print_report(records, _merge(args, file_values, "format", "text"))
    return EXIT_OK


def _cmd_report(args, file_values) -> int:
    records = harness.load_records(args.glob)
    _print_report(records, args.format or file_values.get("format", "text"))
    return EXIT_OK


def _cmd_replay(args, file_values) -> int:
    records = harness.load_records(args.glob)
    if not records:
        raise ConfigError(f"no records match {args.glob!r}")
    failures = 0
    for rec in records:
        config = RolloutConfig.from_dict(rec["config"])
        chat_fn = None
        if config.backend.startswith("llm"):
            replay_path = _merge(args, file_values, "replay_path")
            if not replay_path:
                raise ConfigError(
                    f"{config.rollout_id()}: llm config needs --replay-path"
                )
            client = llm.ChatClient(transport=llm.ReplayTransport(replay_path))
            chat_fn = harness.chat_fn_from_client(client)
        fresh = harness.rerun(
            rec, chat_fn=chat_fn, cache_dir=_merge(args, file_values, "cache_dir")
        )
        if fresh.final.to_record() == rec["final"]:
            print(f"OK   {config.rollout_id()}")
        else:
            failures += 1
            print(f"FAIL {config.rollout_id()}: metrics changed")
            print(f"  archived: {rec['final']}")
            print(f"  re-run:   {fresh.final.to_record()}")
    return EXIT_THRESHOLD if failures else EXIT_OK


_COMMANDS = {
    "smooth": _cmd_smooth,
    "fold": _cmd_fold,
    "gen-goals": _cmd_gen_goals,
    "gen-demos": _cmd_gen_demos,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
    "replay": _cmd_replay,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        return _COMMANDS[args.command](args, file_values)
    except (ConfigError, tasks.TaskError, SimError, EmptyInput, llm.AuthError,
            llm.MissingRecording, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
