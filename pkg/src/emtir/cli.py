"""Command-line entry point wiring environment generation, curation,
training, evaluation, analysis, and export.

Every run writes into its own run directory containing a manifest with the
command, the config snapshot, the seed, and the artifacts produced. In
simulation mode the same config and seed reproduce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import subprocess
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import analysis, curation, env, llm_bridge, optim, policy as policy_mod, rollout
from .core import (
    Config,
    SchemaError,
    config_hash,
    config_to_dict,
    load_config,
    read_jsonl,
    trajectory_from_record,
    trajectory_to_record,
    write_jsonl,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_INPUT = 4
EXIT_RUNTIME = 5


class CliError(RuntimeError):
    def __init__(self, message: str, exit_code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.exit_code = exit_code


def _git_revision() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() or None
    except Exception:
        return None


class RunDir:
    """Timestamped output directory with a manifest; append-only."""

    def __init__(self, root: Path, command: str, cfg: Config, force: bool = False, explicit: Path | None = None):
        if explicit is not None:
            self.path = explicit
            if self.path.exists() and any(self.path.iterdir()) and not force:
                raise CliError(f"refusing to write into non-empty {self.path} (use --force)", EXIT_USAGE)
        else:
            stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%f")
            self.path = root / f"{stamp}-{command}"
            if self.path.exists() and not force:
                raise CliError(f"run directory {self.path} already exists (use --force)", EXIT_USAGE)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.started = time.time()
        self.artifacts: list[str] = []

    def record(self, *paths: Path) -> None:
        for p in paths:
            if p.exists():
                self.artifacts.append(str(p.relative_to(self.path)) if p.is_relative_to(self.path) else str(p))

    def finish(self, extra: dict[str, Any] | None = None) -> None:
        for p in sorted(self.path.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                rel = str(p.relative_to(self.path))
                if rel not in self.artifacts:
                    self.artifacts.append(rel)
        manifest = {
            "command": self.command,
            "config": config_to_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "seed": self.cfg.seed,
            "revision": _git_revision(),
            "started_unix": self.started,
            "ended_unix": time.time(),
            "artifacts": sorted(self.artifacts),
        }
        if extra:
            manifest.update(extra)
        (self.path / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def _load_cfg(args: argparse.Namespace) -> Config:
    overrides: dict[str, Any] = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}", EXIT_USAGE)
        key, _, raw = item.partition("=")
        from .core import _parse_toml_scalar  # reuse scalar syntax

        overrides[key.strip()] = _parse_toml_scalar(raw.strip())
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    try:
        if args.config:
            return load_config(args.config, overrides)
        from .core import config_from_dict

        return config_from_dict(overrides)
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {exc}", EXIT_MISSING_INPUT)
    except (SchemaError, ValueError) as exc:
        raise CliError(f"bad config: {exc}", EXIT_CONFIG)


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", EXIT_MISSING_INPUT)
    return p


def _sim_backend(suite_path: Path, cfg: Config):
    specs = env.read_suite(suite_path)
    queries = env.suite_queries(specs)
    return rollout.SimulationBackend(specs, queries, code_bias=cfg.code_bias), specs, queries


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_env(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    run = RunDir(Path(args.out_root), "gen-env", cfg, args.force, Path(args.out) if args.out else None)
    specs = env.generate_suite(args.seed if args.seed is not None else cfg.seed, args.n, args.profile)
    suite_path = run.path / "suite.jsonl"
    env.write_suite(specs, suite_path)
    from .core import query_to_record

    write_jsonl((query_to_record(q) for q in env.suite_queries(specs)), run.path / "queries.jsonl")
    run.finish({"n_queries": args.n, "profile": args.profile})
    print(f"wrote {suite_path}")
    return EXIT_OK


def cmd_curate(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    suite_path = _require(args.suite, "suite file")
    run = RunDir(Path(args.out_root), "curate", cfg, args.force, Path(args.out) if args.out else None)
    backend, specs, queries = _sim_backend(suite_path, cfg)
    pol = _load_policy(args.checkpoint, specs)
    rng = np.random.default_rng(cfg.seed)
    result = curation.curate(queries, pol, cfg, backend, rng, out_dir=run.path)
    write_jsonl((trajectory_to_record(t) for t in result.rollouts), run.path / "rollouts.jsonl")
    run.finish({"n_examples": len(result.dataset.examples), "flagged": list(result.dataset.flagged)})
    print(f"curated {len(result.dataset.examples)} examples -> {run.path}")
    return EXIT_OK


def _load_policy(checkpoint: str | None, specs) -> policy_mod.PolicyParams:
    if checkpoint:
        params, _ = policy_mod.load_checkpoint(_require(checkpoint, "checkpoint"))
        return params
    return policy_mod.init_params({s.query_id: s.T for s in specs})


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    suite_path = _require(args.suite, "suite file")
    run = RunDir(Path(args.out_root), f"train-{args.paradigm}", cfg, args.force, Path(args.out) if args.out else None)
    backend, specs, queries = _sim_backend(suite_path, cfg)
    init = policy_mod.load_checkpoint(_require(args.init, "init checkpoint"))[0] if args.init else None

    sink = None
    sink_rows: list[dict] = []
    if cfg.log_rollouts:
        sink = lambda t: sink_rows.append(trajectory_to_record(t))

    if args.paradigm == "em":
        state = optim.em_train(cfg, queries, backend, out_dir=run.path, init_policy=init, rollout_sink=sink)
    elif args.paradigm == "ppo":
        state = optim.baseline_train(
            optim.KIND_ONPOLICY, cfg, queries, backend, out_dir=run.path, init_policy=init, rollout_sink=sink
        )
    elif args.paradigm == "sft":
        rng = np.random.default_rng(cfg.seed)
        demos = optim.style_pure_demos(specs, rng)
        state = optim.baseline_train(
            optim.KIND_IMITATION, cfg, queries, backend, out_dir=run.path, init_policy=init, demos=demos
        )
    elif args.paradigm == "base-rl":
        state = optim.baseline_train(
            optim.KIND_BASE_RL, cfg, queries, backend, out_dir=run.path, init_policy=init, rollout_sink=sink
        )
    else:
        raise CliError(f"unknown training paradigm {args.paradigm!r}", EXIT_USAGE)
    if sink_rows:
        write_jsonl(sink_rows, run.path / "rollouts.jsonl")
    final_ckpt = run.path / "checkpoint-final.jsonl"
    policy_mod.save_checkpoint(state.policy, final_ckpt, config_hash(cfg))
    run.finish({"iterations": state.iteration + 1, "interactions": state.interactions})
    print(f"trained {args.paradigm}: {state.interactions} interactions -> {run.path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    suite_path = _require(args.suite, "suite file")
    ckpt = _require(args.checkpoint, "checkpoint")
    run = RunDir(Path(args.out_root), "eval", cfg, args.force, Path(args.out) if args.out else None)
    backend, specs, queries = _sim_backend(suite_path, cfg)
    pol, _ = policy_mod.load_checkpoint(ckpt)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    unknown = set(arms) - set(analysis.ARMS)
    if unknown:
        raise CliError(f"unknown arms: {sorted(unknown)}", EXIT_USAGE)
    rng = np.random.default_rng(cfg.seed)
    ev = analysis.evaluate_arms(pol, backend, queries, cfg.eval_samples, rng)
    rows = []
    for qid in sorted(ev.entries):
        e = ev.entries[qid]
        rows.append(
            {
                "query_id": qid,
                "auto": list(e.auto),
                "cot": list(e.cot),
                "code": list(e.code),
                "auto_c": list(e.auto_c),
            }
        )
    write_jsonl(rows, run.path / "eval.jsonl")
    report = analysis.selection_report(ev)
    analysis.write_selection_report_csv(report, run.path / "selection_report.csv")
    run.finish({"pass_at_1": analysis.pass_at_1(ev)})
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    run = RunDir(Path(args.out_root), f"analyze-{args.figure}", cfg, args.force, Path(args.out) if args.out else None)
    if args.figure == "fig5":
        traces = []
        for spec_str in args.traces:
            parts = spec_str.split(":")
            if len(parts) != 3:
                raise CliError("fig5 traces look like method:seed:metrics.csv", EXIT_USAGE)
            method, seed, path = parts
            rows = optim.read_metrics_csv(_require(path, "metrics trace"))
            traces.append(analysis.Trace(method, int(seed), tuple(rows)))
        analysis.efficiency_curves(traces, run.path / "efficiency.csv", run.path / "efficiency.svg")
    elif args.figure == "fig6":
        trajs = [trajectory_from_record(r) for r in read_jsonl(_require(args.rollouts, "rollout log"))]
        buckets = analysis.invocation_histogram(
            trajs, low=cfg.extremity_low, high=cfg.extremity_high
        )
        analysis.write_invocation_hist_csv(buckets, run.path / "invocation_phase_hist.csv")
        analysis.svg_phase_histogram(buckets, run.path / "invocation_phase_hist.svg")
    elif args.figure == "fig7":
        rows = read_jsonl(_require(args.eval, "eval file"))
        entries = {
            r["query_id"]: analysis.ArmOutcomes(
                tuple(r["auto"]), tuple(r["cot"]), tuple(r["code"]), tuple(r["auto_c"])
            )
            for r in rows
        }
        n = len(rows[0]["auto"]) if rows else 1
        report = analysis.selection_report(analysis.EvalResult(entries, n))
        analysis.write_selection_report_csv(report, run.path / "selection_report.csv")
        print(json.dumps(report, indent=2))
    elif args.figure == "rounds":
        trajs = [trajectory_from_record(r) for r in read_jsonl(_require(args.rollouts, "rollout log"))]
        dist = analysis.round_distribution(trajs)
        analysis.write_csv(
            [{"rounds": k, "count": v} for k, v in dist.items()], ("rounds", "count"), run.path / "rounds.csv"
        )
        print(json.dumps(dist, indent=2))
    else:
        raise CliError(f"unknown figure {args.figure!r}", EXIT_USAGE)
    run.finish()
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    dataset_path = _require(args.dataset, "curated dataset")
    suite_path = _require(args.suite, "suite file")
    run = RunDir(Path(args.out_root), "export", cfg, args.force, Path(args.out) if args.out else None)
    dataset = curation.read_curated(dataset_path)
    specs = env.read_suite(suite_path)
    queries = {q.id: q for q in env.suite_queries(specs)}
    out_path = run.path / "training_data.jsonl"
    llm_bridge.export_training_data(dataset, queries, out_path)
    n = llm_bridge.validate_export_file(out_path)
    run.finish({"n_records": n})
    print(f"exported {n} records -> {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emtir",
        description="EM-guided training of code-integration policies (simulation-first).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="TOML config file (flat key = value subset)")
        p.add_argument("--set", action="append", metavar="KEY=VAL", help="config override (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out-root", default="runs", help="root for timestamped run directories")
        p.add_argument("--out", default=None, help="explicit run directory")
        p.add_argument("--force", action="store_true", help="allow writing into an existing directory")

    p = sub.add_parser("gen-env", help="generate a synthetic query suite")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--profile", default="balanced", choices=env.PROFILES)
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("curate", help="run one E-step over a suite")
    common(p)
    p.add_argument("--suite", required=True)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="train a policy")
    common(p)
    p.add_argument("paradigm", choices=("em", "ppo", "sft", "base-rl"))
    p.add_argument("--suite", required=True)
    p.add_argument("--init", default=None, help="initial checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under auto/cot/code arms")
    common(p)
    p.add_argument("--suite", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arms", default="auto,cot,code")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="produce report CSVs and SVG charts")
    common(p)
    p.add_argument("figure", choices=("fig5", "fig6", "fig7", "rounds"))
    p.add_argument("--traces", nargs="*", default=[], help="fig5: method:seed:metrics.csv")
    p.add_argument("--rollouts", default=None, help="fig6/rounds: rollout log JSONL")
    p.add_argument("--eval", default=None, help="fig7: eval JSONL from the eval command")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export", help="export a curated dataset for external trainers")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--suite", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
