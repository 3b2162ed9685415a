"""Experiment orchestration: case-study presets, per-seed pipelines, metrics
persistence, and report rendering.

A case study runs, per seed: (1) the solver in the low-fidelity simulator
until it finds a failure, (2) adaptation of that failure into a
high-fidelity demonstration, (3) the backward run from scratch, (4) the
backward run warm-started from the low-fidelity policy when the network
shapes allow it, and (5) the plain high-fidelity solver as the baseline.
Reports carry per-seed numbers and medians.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import backward as bwd, policy as pol, ppo
from .core import RewardConfig, Trajectory, init_rng, write_trajectory_jsonl
from .crosswalk import (CrosswalkBatchEnv, CrosswalkSimulator, FidelityConfig,
                        LidarConfig, ScenarioConfig, IdmParams)

STAGE_LOFI = 1
STAGE_HIFI_BASELINE = 2
STAGE_BA = 3
STAGE_BA_WARM = 4

REPORT_NOTE = ("medians over the configured seeds; single-run numbers are "
               "reported per seed")


@dataclass(frozen=True)
class AdaptationSpec:
    method: str = "replay"            # repeat | replay | remap
    k: int = 1
    channel_map: Optional[tuple] = None
    fill_value: float = 0.0

    def __post_init__(self):
        if self.method not in ("repeat", "replay", "remap"):
            raise ValueError(f"unknown adaptation method {self.method!r}")
        if self.method == "repeat" and self.k < 1:
            raise ValueError("repeat factor must be >= 1")
        if self.method == "remap" and self.channel_map is None:
            raise ValueError("remap adaptation needs a channel_map")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seeds: tuple = (0, 1, 2)
    lofi_scenario: ScenarioConfig = ScenarioConfig()
    lofi_fidelity: FidelityConfig = FidelityConfig()
    hifi_scenario: ScenarioConfig = ScenarioConfig()
    hifi_fidelity: FidelityConfig = FidelityConfig()
    lidar: LidarConfig = LidarConfig()
    adaptation: AdaptationSpec = AdaptationSpec()
    solver: ppo.PPOConfig = ppo.PPOConfig()
    ba: bwd.BAConfig = bwd.BAConfig()
    reward: RewardConfig = RewardConfig()
    max_lofi_steps: int = 500_000
    max_hifi_steps: int = 500_000
    warm_start: bool = True

    def __post_init__(self):
        if self.max_lofi_steps <= 0 or self.max_hifi_steps <= 0:
            raise ValueError("step budgets must be positive")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "name": cfg.name,
        "seeds": list(cfg.seeds),
        "lofi": {"scenario": dataclasses.asdict(cfg.lofi_scenario),
                 "fidelity": dataclasses.asdict(cfg.lofi_fidelity)},
        "hifi": {"scenario": dataclasses.asdict(cfg.hifi_scenario),
                 "fidelity": dataclasses.asdict(cfg.hifi_fidelity)},
        "lidar": dataclasses.asdict(cfg.lidar),
        "adaptation": dataclasses.asdict(cfg.adaptation),
        "solver": dataclasses.asdict(cfg.solver),
        "ba": dataclasses.asdict(cfg.ba),
        "reward": dataclasses.asdict(cfg.reward),
        "budgets": {"max_lofi_steps": cfg.max_lofi_steps,
                    "max_hifi_steps": cfg.max_hifi_steps},
        "warm_start": cfg.warm_start,
    }


def _scenario_from_dict(d: dict) -> ScenarioConfig:
    d = dict(d)
    d["idm"] = IdmParams(**d["idm"])
    for key in ("ped_p0", "ped_v0", "action_sigma"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    return ScenarioConfig(**d)


def config_from_dict(doc: dict) -> ExperimentConfig:
    adapt = dict(doc.get("adaptation", {}))
    if adapt.get("channel_map") is not None:
        adapt["channel_map"] = tuple(adapt["channel_map"])
    budgets = doc.get("budgets", {})
    return ExperimentConfig(
        name=doc["name"],
        seeds=tuple(doc.get("seeds", (0, 1, 2))),
        lofi_scenario=_scenario_from_dict(doc["lofi"]["scenario"]),
        lofi_fidelity=FidelityConfig(**doc["lofi"]["fidelity"]),
        hifi_scenario=_scenario_from_dict(doc["hifi"]["scenario"]),
        hifi_fidelity=FidelityConfig(**doc["hifi"]["fidelity"]),
        lidar=LidarConfig(**doc.get("lidar", {})),
        adaptation=AdaptationSpec(**adapt),
        solver=ppo.PPOConfig(**doc.get("solver", {})),
        ba=bwd.BAConfig(**doc.get("ba", {})),
        reward=RewardConfig(**doc.get("reward", {})),
        max_lofi_steps=budgets.get("max_lofi_steps", 500_000),
        max_hifi_steps=budgets.get("max_hifi_steps", 500_000),
        warm_start=doc.get("warm_start", True),
    )


# --- presets -------------------------------------------------------------------


def preset(name: str) -> ExperimentConfig:
    """Built-in case studies mirroring the four fidelity-gap experiments."""
    base_scenario = ScenarioConfig()
    hifi_fid = FidelityConfig(dt=0.1, horizon=50, tracker_enabled=True,
                              sensor_model="direct")
    solver = ppo.PPOConfig()
    if name == "time":
        return ExperimentConfig(
            name="time", adaptation=AdaptationSpec(method="repeat", k=5),
            lofi_scenario=base_scenario,
            lofi_fidelity=FidelityConfig(dt=0.5, horizon=10),
            hifi_scenario=base_scenario, hifi_fidelity=hifi_fid, solver=solver)
    if name == "dynamics":
        return ExperimentConfig(
            name="dynamics", adaptation=AdaptationSpec(method="replay"),
            lofi_scenario=base_scenario,
            lofi_fidelity=replace(hifi_fid, quantize_decimals=1),
            hifi_scenario=base_scenario, hifi_fidelity=hifi_fid, solver=solver)
    if name == "tracker":
        return ExperimentConfig(
            name="tracker", adaptation=AdaptationSpec(method="replay"),
            lofi_scenario=base_scenario,
            lofi_fidelity=replace(hifi_fid, tracker_enabled=False),
            hifi_scenario=base_scenario, hifi_fidelity=hifi_fid, solver=solver)
    if name == "perception":
        scen = replace(base_scenario, ped_p0=(0.0, -2.0), car_x0=-45.0)
        return ExperimentConfig(
            name="perception",
            adaptation=AdaptationSpec(method="remap", channel_map=(0, 1, None),
                                      fill_value=0.0),
            lofi_scenario=scen, lofi_fidelity=hifi_fid,
            hifi_scenario=scen,
            hifi_fidelity=replace(hifi_fid, sensor_model="lidar"),
            solver=solver)
    raise ValueError(f"unknown preset {name!r}; choose from "
                     "time, dynamics, tracker, perception")


# --- pipeline stages --------------------------------------------------------------


class MetricsWriter:
    """Append JSON lines; silently does nothing when path is None."""

    def __init__(self, path=None):
        self._fh = open(path, "w") if path is not None else None

    def __call__(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


@dataclass
class DRLResult:
    found: bool
    steps_to_failure: Optional[int]
    total_steps: int
    final_reward: Optional[float]
    failure_trajectory: Optional[Trajectory]
    params: pol.PolicyParams
    epochs: int


def run_drl(scenario: ScenarioConfig, fidelity: FidelityConfig,
            lidar: LidarConfig, solver: ppo.PPOConfig, reward: RewardConfig,
            budget: int, seed: int, stage: int, metrics=None) -> DRLResult:
    """Stress-test from the initial state until the first failure or until
    the step budget is spent."""
    env = CrosswalkBatchEnv(scenario, fidelity, lidar)
    params = pol.init_policy_params(env.obs_dim, env.action_dim,
                                    solver.hidden_dim, init_rng(seed, stage))
    adam = None
    total = 0
    rollout_index = 0
    epoch = 0
    while True:
        res = ppo.train_epoch(env, params, solver, starts=None,
                              reward_cfg=reward, adam=adam, seed=seed,
                              stage=stage, epoch=epoch,
                              first_rollout_index=rollout_index,
                              env_steps_before=total)
        params, adam = res.params, res.adam
        rollout_index = res.next_rollout_index
        if metrics is not None:
            metrics(res.stats)
        if res.failure_found:
            steps_to_failure = total + res.prefix_steps_to_first_failure
            total += res.steps
            traj = ppo.episode_to_trajectory(res.best_failure, env)
            return DRLResult(found=True, steps_to_failure=steps_to_failure,
                             total_steps=total,
                             final_reward=res.best_failure.episode_return,
                             failure_trajectory=traj, params=params,
                             epochs=epoch + 1)
        total += res.steps
        if total >= budget:
            return DRLResult(found=False, steps_to_failure=None,
                             total_steps=total, final_reward=None,
                             failure_trajectory=None, params=params,
                             epochs=epoch + 1)
        epoch += 1


def adapt_demo(cfg: ExperimentConfig, lofi_traj: Trajectory,
               lofi_steps_spent: int) -> bwd.ExpertDemonstration:
    hifi_sim = CrosswalkSimulator(cfg.hifi_scenario, cfg.hifi_fidelity, cfg.lidar)
    meta = {"lofi_fidelity": dataclasses.asdict(cfg.lofi_fidelity),
            "lofi_steps_spent": lofi_steps_spent}
    spec = cfg.adaptation
    if spec.method == "repeat":
        demo = bwd.adapt_repeat(lofi_traj, spec.k, hifi_sim,
                                lofi_horizon=cfg.lofi_fidelity.horizon, meta=meta)
    elif spec.method == "replay":
        demo = bwd.adapt_replay(lofi_traj, hifi_sim, meta=meta)
    else:
        demo = bwd.adapt_remap(lofi_traj, list(spec.channel_map),
                               spec.fill_value, hifi_sim, meta=meta)
    return demo


# --- the full per-seed pipeline + report -------------------------------------------


def run_case_study(cfg: ExperimentConfig, out_dir) -> dict:
    """Run every stage for every seed and write metrics, artifacts, and the
    report under out_dir. Returns the report dictionary."""
    os.makedirs(out_dir, exist_ok=True)
    seeds_doc = {}
    for seed in cfg.seeds:
        seeds_doc[str(seed)] = _run_seed(cfg, seed, os.path.join(out_dir, f"seed_{seed}"))
    report = assemble_report(cfg, seeds_doc)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(report_render(report))
    return report


def _run_seed(cfg: ExperimentConfig, seed: int, seed_dir) -> dict:
    os.makedirs(seed_dir, exist_ok=True)
    doc = {}

    # 1. find a failure in low fidelity
    m = MetricsWriter(os.path.join(seed_dir, "lofi_metrics.jsonl"))
    lofi = run_drl(cfg.lofi_scenario, cfg.lofi_fidelity, cfg.lidar, cfg.solver,
                   cfg.reward, cfg.max_lofi_steps, seed, STAGE_LOFI, m)
    m.close()
    pol.save_checkpoint(lofi.params, os.path.join(seed_dir, "checkpoint.json"),
                        extra={"stage": "lofi", "seed": seed})
    doc["lofi"] = {"found": lofi.found, "steps_to_failure": lofi.steps_to_failure,
                   "total_steps": lofi.total_steps, "final_reward": lofi.final_reward}
    if lofi.found:
        write_trajectory_jsonl(lofi.failure_trajectory,
                               os.path.join(seed_dir, "trajectory.jsonl"))

    # 5. high-fidelity baseline (independent of the transfer stages)
    m = MetricsWriter(os.path.join(seed_dir, "baseline_metrics.jsonl"))
    base = run_drl(cfg.hifi_scenario, cfg.hifi_fidelity, cfg.lidar, cfg.solver,
                   cfg.reward, cfg.max_hifi_steps, seed, STAGE_HIFI_BASELINE, m)
    m.close()
    doc["methods"] = {"drl_baseline": {
        "found": base.found, "steps_to_failure": base.steps_to_failure,
        "total_steps": base.total_steps, "final_reward": base.final_reward,
        "budget": cfg.max_hifi_steps}}

    if not lofi.found:
        doc["demo"] = None
        doc["methods"]["ba_scratch"] = {"skipped": "no low-fidelity failure found"}
        doc["methods"]["ba_warm"] = {"skipped": "no low-fidelity failure found"}
        return doc

    # 2. adapt the low-fidelity failure into a demonstration
    demo = adapt_demo(cfg, lofi.failure_trajectory, lofi.total_steps)
    bwd.write_demo_jsonl(demo, os.path.join(seed_dir, "demo.jsonl"),
                         os.path.join(seed_dir, "demo_meta.json"))
    replay_steps = len(demo)
    doc["demo"] = {"length": len(demo), "replay_steps": replay_steps,
                   "ends_in_failure": demo.ends_in_failure}

    hifi_env = CrosswalkBatchEnv(cfg.hifi_scenario, cfg.hifi_fidelity, cfg.lidar)

    # 3. backward run from scratch
    m = MetricsWriter(os.path.join(seed_dir, "ba_scratch_metrics.jsonl"))
    params0 = pol.init_policy_params(hifi_env.obs_dim, hifi_env.action_dim,
                                     cfg.solver.hidden_dim, init_rng(seed, STAGE_BA))
    doc["methods"]["ba_scratch"] = _run_ba(cfg, demo, hifi_env, params0, seed,
                                           STAGE_BA, replay_steps, m,
                                           os.path.join(seed_dir, "ba_scratch"))
    m.close()

    # 4. backward run warm-started from the low-fidelity policy
    if not cfg.warm_start:
        doc["methods"]["ba_warm"] = {"skipped": "warm start disabled"}
    else:
        loaded = bwd.warm_start(os.path.join(seed_dir, "checkpoint.json"),
                                hifi_env.obs_dim, hifi_env.action_dim)
        if isinstance(loaded, bwd.IncompatibilityReport):
            doc["methods"]["ba_warm"] = {
                "skipped": loaded.reason,
                "incompatibility": {"reason": loaded.reason,
                                    "expected": loaded.expected,
                                    "found": loaded.found}}
        else:
            if cfg.ba.warm_start_reinit_logstd:
                loaded = pol.reinit_logstd_head(loaded, init_rng(seed, STAGE_BA_WARM))
            hifi_env_w = CrosswalkBatchEnv(cfg.hifi_scenario, cfg.hifi_fidelity,
                                           cfg.lidar)
            m = MetricsWriter(os.path.join(seed_dir, "ba_warm_metrics.jsonl"))
            doc["methods"]["ba_warm"] = _run_ba(cfg, demo, hifi_env_w, loaded,
                                                seed, STAGE_BA_WARM,
                                                replay_steps, m,
                                                os.path.join(seed_dir, "ba_warm"))
            m.close()
    return doc


def _run_ba(cfg, demo, env, params, seed, stage, replay_steps, metrics,
            artifact_prefix) -> dict:
    res = bwd.run_backward(demo, env, params, cfg.solver, cfg.ba,
                           reward_cfg=cfg.reward, max_steps=cfg.max_hifi_steps,
                           seed=seed, stage=stage, metrics=metrics)
    for entry in res.trace:
        metrics({"trace": entry})
    out = {"outcome": res.outcome,
           "ba_steps": res.hifi_steps_used,
           "replay_steps": replay_steps,
           "total_steps": res.hifi_steps_used + replay_steps,
           "found": res.outcome == "failure_found",
           "steps_to_failure": (None if res.steps_to_failure is None
                                else res.steps_to_failure + replay_steps),
           "final_reward": res.final_reward,
           "budget": cfg.max_hifi_steps}
    if res.failure_trajectory is not None:
        write_trajectory_jsonl(res.failure_trajectory,
                               artifact_prefix + "_trajectory.jsonl")
    return out


def _censored_steps(rec: dict) -> float:
    if rec.get("skipped"):
        return float("nan")
    if rec.get("found") and rec.get("steps_to_failure") is not None:
        return float(rec["steps_to_failure"])
    return float(rec["budget"])


def _median(values) -> Optional[float]:
    vals = [v for v in values if v == v]  # drop NaNs
    return float(np.median(vals)) if vals else None


def assemble_report(cfg: ExperimentConfig, seeds_doc: dict) -> dict:
    methods = {}
    for method in ("drl_baseline", "ba_scratch", "ba_warm"):
        recs = [doc["methods"].get(method, {"skipped": "missing"})
                for doc in seeds_doc.values()]
        found = [r for r in recs if r.get("found")]
        skipped = [r.get("skipped") for r in recs if r.get("skipped")]
        methods[method] = {
            "n_seeds": len(recs),
            "n_found": len(found),
            "n_skipped": len(skipped),
            "skip_reasons": sorted(set(skipped)),
            "median_steps_to_failure": _median(
                [r["steps_to_failure"] for r in found]) if found else None,
            "median_steps_censored": _median([_censored_steps(r) for r in recs]),
            "median_final_reward": _median(
                [r["final_reward"] for r in found
                 if r.get("final_reward") is not None]) if found else None,
        }
    base = methods["drl_baseline"]["median_steps_censored"]
    for method in ("ba_scratch", "ba_warm"):
        med = methods[method]["median_steps_censored"]
        methods[method]["percent_of_hifi_steps"] = (
            None if med is None or not base else 100.0 * med / base)
    lofi_meds = _median([doc["lofi"]["total_steps"] for doc in seeds_doc.values()])
    return {"name": cfg.name, "note": REPORT_NOTE,
            "config": config_to_dict(cfg), "seeds": seeds_doc,
            "aggregate": {"methods": methods, "median_lofi_steps": lofi_meds}}


def report_render(report: dict) -> str:
    """Fixed-width table alongside the JSON report."""
    header = (f"case study: {report['name']}\n{report['note']}\n\n")
    cols = ["Algorithm", "Steps to Failure", "Final Reward",
            "Load Lofi Policy?", "Lofi Steps", "Percent of Hifi Steps"]
    rows = []
    agg = report["aggregate"]["methods"]
    lofi_steps = report["aggregate"]["median_lofi_steps"]

    def fmt(x, nd=1):
        if x is None:
            return "--"
        return f"{x:.{nd}f}" if isinstance(x, float) else str(x)

    for method, label, loads in (("ba_scratch", "BA", "No"),
                                 ("ba_warm", "BA", "Yes"),
                                 ("drl_baseline", "Hifi", "--")):
        rec = agg.get(method)
        if rec is None:
            continue
        if rec["n_skipped"] == rec["n_seeds"]:
            reasons = "; ".join(rec["skip_reasons"]) or "skipped"
            rows.append([f"{label} (omitted)", "--", "--", loads, "--",
                         f"[{reasons}]"])
            continue
        pct = rec.get("percent_of_hifi_steps")
        rows.append([
            label, fmt(rec["median_steps_censored"], 0),
            fmt(rec["median_final_reward"], 4), loads,
            fmt(lofi_steps, 0) if method != "drl_baseline" else "--",
            fmt(pct, 1) if method != "drl_baseline" else "--"])
    widths = [max(len(c), max((len(r[i]) for r in rows), default=0))
              for i, c in enumerate(cols)]
    lines = [header]
    lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"
