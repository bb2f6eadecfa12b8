"""Command-line entry point: gen, train, finetune, eval, report.

All randomness flows from --seed through a documented splitting rule
(sha256 of "<component>:<seed>"), so repeating a command reproduces its
output files byte for byte. Outputs land under --out (default from config).
"""

import argparse
import math
import sys
from pathlib import Path
from typing import Optional, Union

import numpy as np

from besteffort import evalkit
from besteffort.config import AppConfig, ConfigError, component_seed, parse_config
from besteffort.evalkit import (
    THRESHOLDS,
    EvalRun,
    make_trace,
    read_metrics_csv,
    riemann_usage,
    run_eval,
    scenario_names,
    selection_distribution,
    threshold_counts,
    windowed,
    write_metrics_csv,
)
from besteffort.policy import QNetwork, load_checkpoint, save_checkpoint
from besteffort.trainer import fine_tune, run_training
from besteffort.workload import read_trace, write_trace


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="besteffort",
        description="Best-effort serving simulator with a learned request router.")
    sub = parser.add_subparsers(dest="command")

    def common(p, scenario_required=False):
        p.add_argument("--config", default=None, help="JSON config file (default: built-in)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
        p.add_argument("--scenario", required=scenario_required,
                       help="one of: " + ", ".join(scenario_names()))

    p = sub.add_parser("gen", help="generate a workload trace file")
    common(p, scenario_required=True)

    p = sub.add_parser("train", help="train a router policy")
    common(p)
    p.add_argument("--iterations", type=int, default=None,
                   help="override training.total_iterations")

    p = sub.add_parser("finetune", help="continue training a checkpoint (soft rewards)")
    common(p)
    p.add_argument("--policy", required=True, help="checkpoint to start from")
    p.add_argument("--iterations", type=int, default=None,
                   help="override training.fine_tune_iterations")

    p = sub.add_parser("eval", help="evaluate a policy or static baseline")
    common(p, scenario_required=True)
    p.add_argument("--policy", required=True,
                   help="checkpoint path or static:<tier> for a fixed tier")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--trace", default=None, help="replay this trace file instead of generating")

    p = sub.add_parser("report", help="summarize metrics CSV files")
    common(p)
    p.add_argument("metrics", nargs="+", help="metrics CSV files to summarize")
    return parser


def _resolve_policy(spec: str, cfg: AppConfig) -> Union[QNetwork, int]:
    if spec.startswith("static:"):
        tier = int(spec.split(":", 1)[1])
        if not 0 <= tier < cfg.n_tiers:
            raise ValueError(f"static tier {tier} out of range [0, {cfg.n_tiers})")
        return tier
    return load_checkpoint(spec, n_tasks=cfg.n_tasks, n_tiers=cfg.n_tiers)


def _policy_tag(spec: str) -> str:
    if spec.startswith("static:"):
        return "static-" + spec.split(":", 1)[1]
    return Path(spec).stem


def cmd_gen(args, cfg: AppConfig, out: Path) -> int:
    scenario = cfg.scenario(args.scenario)
    seed = component_seed(args.seed, f"gen:{scenario.name}")
    trace = make_trace(scenario, cfg.n_tasks, seed)
    path = out / f"trace_{scenario.name}_seed{args.seed}.csv"
    write_trace(trace, str(path))
    print(path)
    return 0


def _write_train_log(log, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,loss,mean_recent_reward,epsilon\n")
        for row in log:
            f.write(f"{row.step},{row.loss!r},{row.mean_recent_reward!r},{row.epsilon!r}\n")


def cmd_train(args, cfg: AppConfig, out: Path) -> int:
    scenario = cfg.scenario(args.scenario) if args.scenario else None
    reward = cfg.reward_spec()
    if scenario is not None:
        reward = scenario.adjust_rewards(reward)
    tcfg = cfg.train_config(seed=component_seed(args.seed, "train"),
                            total_iterations=args.iterations)
    result = run_training(cfg.tiers(), reward, tcfg, cfg.encoding())
    tag = scenario.name if scenario else "base"
    ckpt = out / f"policy_{tag}_seed{args.seed}.bqn"
    save_checkpoint(result.net, str(ckpt))
    _write_train_log(result.log, out / f"train_log_{tag}_seed{args.seed}.csv")
    print(ckpt)
    return 0


def cmd_finetune(args, cfg: AppConfig, out: Path) -> int:
    net = load_checkpoint(args.policy, n_tasks=cfg.n_tasks, n_tiers=cfg.n_tiers)
    scenario = cfg.scenario(args.scenario) if args.scenario else None
    if scenario is not None:
        reward = scenario.adjust_rewards(cfg.reward_spec())
    else:
        reward = cfg.reward_spec().with_kind("soft")
    iterations = args.iterations if args.iterations is not None else cfg.fine_tune_iterations
    tcfg = cfg.train_config(seed=component_seed(args.seed, "finetune"),
                            total_iterations=iterations)
    # a warm start should not restart at full exploration
    tcfg.epsilon_start = max(cfg.fine_tune_epsilon_start, tcfg.epsilon_end)
    result = fine_tune(net, reward, tcfg, cfg.tiers(), cfg.encoding())
    tag = (scenario.name if scenario else "soft") + "_finetuned"
    ckpt = out / f"policy_{tag}_seed{args.seed}.bqn"
    save_checkpoint(result.net, str(ckpt))
    _write_train_log(result.log, out / f"train_log_{tag}_seed{args.seed}.csv")
    print(ckpt)
    return 0


def _summary_rows(run: EvalRun, reward_spec) -> dict:
    rewards = run.rewards()
    counts = threshold_counts(windowed(rewards), THRESHOLDS)
    total_miss = float(np.mean([
        1.0 if r.realized_ms_per_token > reward_spec.tasks[r.task_id].deadline_ms_per_token
        else 0.0 for r in run.records])) if run.records else math.nan
    row = {
        "n_requests": len(run.records),
        "mean_reward": float(rewards.mean()) if run.records else math.nan,
        "miss_fraction": total_miss,
        "mean_utility_per_gpu": float(rewards.mean() / run.gpu_count) if run.records else math.nan,
    }
    for theta in THRESHOLDS:
        key = "windows_eq_%.2f" % theta if theta == 1.0 else "windows_ge_%.2f" % theta
        row[key] = counts[theta]
    return row


def cmd_eval(args, cfg: AppConfig, out: Path) -> int:
    scenario = cfg.scenario(args.scenario)
    reward = scenario.adjust_rewards(cfg.reward_spec())
    policy = _resolve_policy(args.policy, cfg)
    tiers = scenario.adjust_tiers(cfg.tiers(baseline=isinstance(policy, int)))
    gpu_count = scenario.gpu_count if scenario.gpu_count else cfg.gpu_count
    tag = _policy_tag(args.policy)

    runs = []
    for k in range(args.trials):
        if args.trace is not None:
            trace = read_trace(args.trace, n_tasks=cfg.n_tasks)
            trace_seed = trace.seed
        else:
            trace_seed = component_seed(args.seed, f"gen:{scenario.name}:{k}")
            trace = make_trace(scenario, cfg.n_tasks, trace_seed)
        run = run_eval(policy, trace, tiers, reward, cfg.encoding(), seed=trace_seed,
                       gpu_count=gpu_count, estimator_mode=scenario.estimator_mode,
                       reset_between_segments=scenario.reset_between_segments,
                       policy_id=args.policy)
        path = out / f"metrics_{scenario.name}_{tag}_seed{args.seed}_trial{k}.csv"
        write_metrics_csv(run, str(path))
        print(path)
        runs.append(run)

    summary_path = out / f"summary_{scenario.name}_{tag}_seed{args.seed}.csv"
    rows = [_summary_rows(run, reward) for run in runs]
    keys = list(rows[0].keys())
    with open(summary_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("trial," + ",".join(keys) + "\n")
        for k, row in enumerate(rows):
            f.write(f"{k}," + ",".join(repr(row[key]) if isinstance(row[key], float)
                                       else str(row[key]) for key in keys) + "\n")
    if scenario.workload == "stable":
        _write_per_rate(runs, reward,
                        out / f"per_rate_{scenario.name}_{tag}_seed{args.seed}.csv")
    print(summary_path)
    return 0


def _write_per_rate(runs, reward_spec, path: Path) -> None:
    by_rate: dict[float, list] = {}
    miss_by_rate: dict[float, list] = {}
    for run in runs:
        for rec in run.records:
            by_rate.setdefault(rec.segment_rate, []).append(rec.reward)
            deadline = reward_spec.tasks[rec.task_id].deadline_ms_per_token
            miss_by_rate.setdefault(rec.segment_rate, []).append(
                1.0 if rec.realized_ms_per_token > deadline else 0.0)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("rate,mean_reward,miss_fraction,n_requests\n")
        for rate in sorted(by_rate):
            f.write(f"{rate!r},{float(np.mean(by_rate[rate]))!r},"
                    f"{float(np.mean(miss_by_rate[rate]))!r},{len(by_rate[rate])}\n")


def cmd_report(args, cfg: AppConfig, out: Path) -> int:
    scenario = cfg.scenario(args.scenario) if args.scenario else None
    reward = scenario.adjust_rewards(cfg.reward_spec()) if scenario else cfg.reward_spec()
    report_path = out / "report.csv"
    runs = []
    with open(report_path, "w", encoding="utf-8", newline="\n") as f:
        header_written = False
        for path in args.metrics:
            records = read_metrics_csv(path)
            run = EvalRun(records=records, policy_id=path, gpu_count=cfg.gpu_count, seed=0)
            runs.append(run)
            row = _summary_rows(run, reward)
            if not header_written:
                f.write("file," + ",".join(row.keys()) + "\n")
                header_written = True
            f.write(path + "," + ",".join(repr(v) if isinstance(v, float) else str(v)
                                          for v in row.values()) + "\n")
    rates = tuple(float(r) for r in cfg.data["scenario"]["stable_rates"])
    freq = selection_distribution(runs, rates, cfg.n_tasks, cfg.n_tiers)
    selection_path = out / "report_selection.csv"
    with open(selection_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("task_id,tier_id,riemann_usage\n")
        for t in range(cfg.n_tasks):
            for m in range(cfg.n_tiers):
                f.write(f"{t},{m},{riemann_usage(freq, rates, t, m)!r}\n")
    print(report_path)
    print(selection_path)
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = parse_config(args.config)
        for warning in cfg.warnings:
            print(f"warning: {warning}", file=sys.stderr)
        out = Path(args.out) if args.out else Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](args, cfg, out)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures (I/O and the like)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
