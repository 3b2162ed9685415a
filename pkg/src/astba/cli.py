"""Command line interface.

Subcommands: run-drl (stress-test one simulator), make-demo (adapt a saved
failure trajectory into a demonstration), run-ba (backward run from a
demonstration), case-study (full pipeline for a named preset), report
(re-render a saved report). Outputs land under --out.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import backward as bwd, harness, policy as pol
from .core import init_rng, read_trajectory_jsonl, write_trajectory_jsonl
from .crosswalk import CrosswalkBatchEnv


def _load_experiment(arg: str) -> harness.ExperimentConfig:
    """--config accepts a preset name or a path to an experiment JSON."""
    if os.path.exists(arg):
        with open(arg) as fh:
            return harness.config_from_dict(json.load(fh))
    return harness.preset(arg)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def cmd_run_drl(args) -> int:
    cfg = _load_experiment(args.config)
    os.makedirs(args.out, exist_ok=True)
    scenario, fidelity = ((cfg.lofi_scenario, cfg.lofi_fidelity)
                          if args.fidelity == "lofi"
                          else (cfg.hifi_scenario, cfg.hifi_fidelity))
    budget = cfg.max_lofi_steps if args.fidelity == "lofi" else cfg.max_hifi_steps
    stage = harness.STAGE_LOFI if args.fidelity == "lofi" else harness.STAGE_HIFI_BASELINE
    metrics = harness.MetricsWriter(os.path.join(args.out, "metrics.jsonl"))
    res = harness.run_drl(scenario, fidelity, cfg.lidar, cfg.solver, cfg.reward,
                          budget, args.seed, stage, metrics)
    metrics.close()
    pol.save_checkpoint(res.params, os.path.join(args.out, "checkpoint.json"),
                        extra={"stage": args.fidelity, "seed": args.seed})
    if res.found:
        write_trajectory_jsonl(res.failure_trajectory,
                               os.path.join(args.out, "trajectory.jsonl"))
    summary = {"found": res.found, "steps_to_failure": res.steps_to_failure,
               "total_steps": res.total_steps, "final_reward": res.final_reward}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_make_demo(args) -> int:
    cfg = _load_experiment(args.config)
    os.makedirs(args.out, exist_ok=True)
    traj = read_trajectory_jsonl(args.trajectory)
    demo = harness.adapt_demo(cfg, traj, lofi_steps_spent=-1)
    bwd.write_demo_jsonl(demo, os.path.join(args.out, "demo.jsonl"),
                         os.path.join(args.out, "demo_meta.json"))
    print(json.dumps({"length": len(demo),
                      "ends_in_failure": demo.ends_in_failure}, sort_keys=True))
    return 0


def cmd_run_ba(args) -> int:
    cfg = _load_experiment(args.config)
    os.makedirs(args.out, exist_ok=True)
    demo = bwd.read_demo_jsonl(args.demo,
                               args.demo_meta if args.demo_meta else None)
    env = CrosswalkBatchEnv(cfg.hifi_scenario, cfg.hifi_fidelity, cfg.lidar)
    if args.warm_start:
        if not args.checkpoint:
            print("error: --warm-start true needs --checkpoint", file=sys.stderr)
            return 2
        loaded = bwd.warm_start(args.checkpoint, env.obs_dim, env.action_dim)
        if isinstance(loaded, bwd.IncompatibilityReport):
            print(json.dumps({"outcome": "incompatible_checkpoint",
                              "reason": loaded.reason,
                              "expected": loaded.expected,
                              "found": loaded.found}, sort_keys=True))
            return 1
        params = loaded
        stage = harness.STAGE_BA_WARM
    else:
        params = pol.init_policy_params(env.obs_dim, env.action_dim,
                                        cfg.solver.hidden_dim,
                                        init_rng(args.seed, harness.STAGE_BA))
        stage = harness.STAGE_BA
    metrics = harness.MetricsWriter(os.path.join(args.out, "metrics.jsonl"))
    res = bwd.run_backward(demo, env, params, cfg.solver, cfg.ba,
                           reward_cfg=cfg.reward, max_steps=cfg.max_hifi_steps,
                           seed=args.seed, stage=stage, metrics=metrics)
    for entry in res.trace:
        metrics({"trace": entry})
    metrics.close()
    pol.save_checkpoint(res.params, os.path.join(args.out, "checkpoint.json"),
                        extra={"stage": "ba", "seed": args.seed})
    if res.failure_trajectory is not None:
        write_trajectory_jsonl(res.failure_trajectory,
                               os.path.join(args.out, "trajectory.jsonl"))
    print(json.dumps({"outcome": res.outcome,
                      "hifi_steps_used": res.hifi_steps_used,
                      "steps_to_failure": res.steps_to_failure,
                      "final_reward": res.final_reward}, sort_keys=True))
    return 0


def cmd_case_study(args) -> int:
    cfg = _load_experiment(args.config if args.config else args.case)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    if args.warm_start is not None:
        cfg = dataclasses.replace(cfg, warm_start=args.warm_start)
    report = harness.run_case_study(cfg, args.out)
    print(harness.report_render(report))
    return 0


def cmd_report(args) -> int:
    with open(os.path.join(args.out, "report.json")) as fh:
        report = json.load(fh)
    text = harness.report_render(report)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="astba",
                                description="most-likely-failure search with "
                                            "low-to-high fidelity transfer")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("run-drl", help="stress-test one simulator until failure")
    d.add_argument("--config", required=True, help="preset name or experiment JSON path")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--fidelity", choices=("lofi", "hifi"), default="lofi")
    d.set_defaults(func=cmd_run_drl)

    md = sub.add_parser("make-demo", help="adapt a failure trajectory into a demonstration")
    md.add_argument("--config", required=True)
    md.add_argument("--trajectory", required=True, help="trajectory.jsonl from run-drl")
    md.add_argument("--seed", type=int, default=0)
    md.add_argument("--out", required=True)
    md.set_defaults(func=cmd_make_demo)

    rb = sub.add_parser("run-ba", help="backward run from a demonstration")
    rb.add_argument("--config", required=True)
    rb.add_argument("--demo", required=True, help="demo.jsonl path")
    rb.add_argument("--demo-meta", default=None)
    rb.add_argument("--seed", type=int, default=0)
    rb.add_argument("--out", required=True)
    rb.add_argument("--warm-start", type=_bool, default=False)
    rb.add_argument("--checkpoint", default=None)
    rb.set_defaults(func=cmd_run_ba)

    cs = sub.add_parser("case-study", help="full pipeline for a named preset")
    cs.add_argument("case", choices=("time", "dynamics", "tracker", "perception"))
    cs.add_argument("--config", default=None, help="experiment JSON overriding the preset")
    cs.add_argument("--seed", type=int, default=None, help="run a single seed")
    cs.add_argument("--out", required=True)
    cs.add_argument("--warm-start", type=_bool, default=None)
    cs.set_defaults(func=cmd_case_study)

    rp = sub.add_parser("report", help="re-render report.txt from report.json")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
