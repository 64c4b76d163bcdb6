"""Command-line surface: config resolution, run directories, workflows.

Configuration is resolved as defaults, then the YAML config file, then
explicit flags, rightmost wins. Every command that produces artifacts gets a
fresh run directory under the run root (--run-root, else $WOVR_RUN_ROOT,
else ./runs) named by the resolved-config hash plus a timestamp, and the
resolved config is written there verbatim before any work starts. Exit codes:
0 success, 2 configuration error, 3 runtime error, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import nn
from .core import (InvariantViolation, RunConfig, TaskSpec, config_hash,
                   derive_rng, derive_seed, params_hash, read_frames,
                   write_frames)
from .envs import CountingEnv, get_env, replay_frames, scripted_demo
from .evalx import EvalReport, hallucination_rate, horizon_error, success_rate
from .grpo import ChunkPolicy
from .pace import (PaceStagePlan, StageFailure, _rl_stage, clone_base_policy,
                   run_pipeline)
from .reward import (RewardNet, label_episode_frames, predict_success,
                     sparse_reward, train_classifier)
from .rollout import KeyframeBuffer, read_batch, rollout_real, write_batch
from .sched import ResidencyLedger, write_event_log
from .worldmodel import LearnedWorldModel, WmNet, train_wm

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INVARIANT = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "env": "pickplace2d",
    "workers": 1,
    "run": {"gamma": 1.0, "group_size": 8, "clip_eps": 0.2, "chunk": 8,
            "context": 4, "max_episode_len": 64, "kir_fraction": 0.5,
            "diffusion_steps": 5, "n_base": 150, "n_evo": 100},
    "plan": {"refinements": 1, "rl_updates_per_stage": 20,
             "groups_per_update": 4, "reset_kir_between_stages": True,
             "refine_mix_new": 0.7},
    "policy": {"hidden": [64, 64], "init_log_std": -1.5},
    "demo": {"n": 16, "noise": 0.0},
    "clone": {"epochs": 60, "batch_size": 64, "lr": 1e-3},
    "wm": {"width": 128, "act_emb_dim": 32, "anchor_mode": "first",
           "epochs": 40, "batch_size": 64, "lr": 1e-3, "p_noisy": 0.5},
    "refine": {"epochs": 10, "batch_size": 64, "lr": 3e-4},
    "reward": {"hidden": [64, 64], "epochs": 300, "batch_size": 64,
               "lr": 3e-3, "neg_ratio": 30.0, "pos_weight": "sqrt",
               "threshold": 0.5},
    "rl": {"inner_epochs": 2, "lr": 3e-4, "keyframe_k": 2,
           "reward_threshold": 0.9, "explore_log_std": None},
    # collect.n 0 means "use run.n_base"
    "collect": {"n": 0},
    "eval": {"n": 20, "metric": "sr", "horizons": [8, 16, 32, 64], "task": 0},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config resolution


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    """Merge override into base in place; keys absent from base are rejected."""
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} must be a section")
            deep_merge(base[key], value, here)
        else:
            base[key] = value
    return base


def set_by_path(tree: dict, dotted: str, value):
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def resolve_config(args: argparse.Namespace, flag_paths: dict) -> dict:
    resolved = copy.deepcopy(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path) as fh:
                loaded = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config file: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must be a mapping")
        deep_merge(resolved, loaded)
    for dest, dotted in flag_paths.items():
        value = getattr(args, dest, None)
        if value is not None:
            set_by_path(resolved, dotted, value)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        set_by_path(resolved, dotted, yaml.safe_load(raw))
    return resolved


def run_config_from(cfg: dict) -> RunConfig:
    try:
        return RunConfig(seed=cfg["seed"], **cfg["run"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def plan_from(cfg: dict, run_cfg: RunConfig) -> PaceStagePlan:
    try:
        return PaceStagePlan.from_config(run_cfg, **cfg["plan"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# run directories


def run_root(args) -> Path:
    explicit = getattr(args, "run_root", None)
    return Path(explicit or os.environ.get("WOVR_RUN_ROOT", "runs"))


def make_run_dir(root: Path, command: str, resolved: dict) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    prefix = f"{command}-{config_hash(resolved)[:10]}-{stamp}"
    for attempt in range(1000):
        candidate = root / (prefix if attempt == 0 else f"{prefix}-{attempt}")
        try:
            candidate.mkdir(parents=True, exist_ok=False)
        except FileExistsError:
            continue
        return candidate
    raise RuntimeError("could not allocate a fresh run directory")


def write_resolved(run_dir: Path, resolved: dict):
    with open(run_dir / "resolved.json", "w") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# shared construction


def build_policy(env, cfg) -> ChunkPolicy:
    p = cfg["policy"]
    return ChunkPolicy(env.state_dim, env.n_tasks, cfg["run"]["chunk"],
                       env.action_dim, hidden=tuple(p["hidden"]),
                       action_low=env.action_low, action_high=env.action_high,
                       init_log_std=p["init_log_std"])


def build_wm_net(env, cfg) -> WmNet:
    w = cfg["wm"]
    return WmNet(env.state_dim, env.action_dim, env.n_tasks,
                 horizon=cfg["run"]["chunk"], context=cfg["run"]["context"],
                 width=w["width"], act_emb_dim=w["act_emb_dim"],
                 anchor_mode=w["anchor_mode"])


def build_reward_net(env, cfg) -> RewardNet:
    return RewardNet(env.state_dim, env.n_tasks,
                     hidden=tuple(cfg["reward"]["hidden"]))


def require(args, cfg_err: str, *names):
    values = []
    for name in names:
        value = getattr(args, name, None)
        if value is None:
            raise ConfigError(cfg_err.format(flag=name.replace("_", "-")))
        values.append(value)
    return values if len(values) > 1 else values[0]


def collect_episodes(policy, params, env, n: int, T: int, H: int, seed: int,
                     tag: int):
    """Round-robin over tasks, one fresh-start episode per index."""
    trajectories, frames = [], []
    for i in range(n):
        task = TaskSpec(i % env.n_tasks)
        t, f = rollout_real(policy, params, env, task, 1, T, H,
                            derive_seed(seed, tag, i), record_frames=True)
        trajectories += t
        frames += f
    return trajectories, frames


# ---------------------------------------------------------------------------
# commands


def cmd_demo_gen(cfg, run_dir, args):
    env = get_env(cfg["env"])
    n, noise = cfg["demo"]["n"], cfg["demo"]["noise"]
    chunk, max_len = cfg["run"]["chunk"], cfg["run"]["max_episode_len"]
    demos = [scripted_demo(env, TaskSpec(i % env.n_tasks),
                           derive_seed(cfg["seed"], 71, i), noise,
                           chunk=chunk, max_len=max_len) for i in range(n)]
    manifest = {"env": cfg["env"], "noise": noise, "n": n,
                "config": config_hash(cfg)}
    write_batch(run_dir / "demos.wovs", demos, manifest)
    rate = float(np.mean([d.success for d in demos]))
    print(f"wrote {n} demos (success rate {rate:.2f}) to {run_dir}")
    return EXIT_OK


def cmd_clone(cfg, run_dir, args):
    demos_path = require(args, "clone needs --{flag}", "demos")
    demos, manifest = read_batch(demos_path)
    env = get_env(manifest.get("env", cfg["env"]))
    policy = build_policy(env, cfg)
    c = cfg["clone"]
    params, losses = clone_base_policy(demos, policy, derive_rng(cfg["seed"], 72),
                                       epochs=c["epochs"],
                                       batch_size=c["batch_size"], lr=c["lr"])
    nn.save_params(run_dir / "policy.wovc", params)
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump({"params": params_hash(params), "demos": str(demos_path),
                   "env": env.name, "config": config_hash(cfg)},
                  fh, indent=1, sort_keys=True)
    with open(run_dir / "bc_losses.json", "w") as fh:
        json.dump(losses, fh)
    print(f"cloned policy from {len(demos)} demos "
          f"(final loss {losses[-1]:.3f}) to {run_dir}" if losses
          else f"cloned policy (zero epochs) to {run_dir}")
    return EXIT_OK


def cmd_collect(cfg, run_dir, args):
    policy_path = require(args, "collect needs --{flag}", "policy")
    params = nn.load_params(policy_path)
    env = CountingEnv(get_env(cfg["env"]))
    policy = build_policy(env, cfg)
    run_cfg = run_config_from(cfg)
    n = cfg["collect"]["n"] or run_cfg.n_base
    trajectories, frames = collect_episodes(
        policy, params, env, n, run_cfg.max_episode_len, run_cfg.chunk,
        cfg["seed"], 73)
    manifest = {"policy": params_hash(params), "env": cfg["env"], "n": n,
                "env_steps": env.steps, "config": config_hash(cfg)}
    write_batch(run_dir / "trajectories.wovs", trajectories, manifest)
    write_frames(run_dir / "frames.wovf", frames, cfg["env"])
    rate = float(np.mean([t.success for t in trajectories]))
    print(f"collected {n} episodes ({env.steps} real steps, "
          f"success rate {rate:.2f}) to {run_dir}")
    return EXIT_OK


def cmd_train_wm(cfg, run_dir, args):
    frames_path = require(args, "train-wm needs --{flag}", "frames")
    episodes, env_name = read_frames(frames_path)
    env = get_env(env_name)
    net = build_wm_net(env, cfg)
    w = cfg["wm"]
    params, losses = train_wm(episodes, net, derive_rng(cfg["seed"], 74),
                              epochs=w["epochs"], batch_size=w["batch_size"],
                              lr=w["lr"], p_noisy=w["p_noisy"])
    nn.save_params(run_dir / "wm.wovc", params)
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump({"params": params_hash(params), "frames": str(frames_path),
                   "env": env_name, "config": config_hash(cfg)},
                  fh, indent=1, sort_keys=True)
    with open(run_dir / "wm_losses.json", "w") as fh:
        json.dump(losses, fh)
    print(f"trained world model on {len(episodes)} episodes "
          f"(loss {losses[0]:.4f} -> {losses[-1]:.4f}) to {run_dir}")
    return EXIT_OK


def cmd_train_reward(cfg, run_dir, args):
    frames_path = require(args, "train-reward needs --{flag}", "frames")
    episodes, env_name = read_frames(frames_path)
    env = get_env(env_name)
    net = build_reward_net(env, cfg)
    r = cfg["reward"]
    if getattr(args, "demos", None):
        demos, _ = read_batch(args.demos)
        episodes = episodes + [replay_frames(env, d) for d in demos]
    examples = label_episode_frames(episodes, env)
    params, losses = train_classifier(examples, net, derive_rng(cfg["seed"], 75),
                                      epochs=r["epochs"],
                                      batch_size=r["batch_size"], lr=r["lr"],
                                      max_neg_ratio=r["neg_ratio"],
                                      pos_weight=r["pos_weight"])
    nn.save_params(run_dir / "reward.wovc", params)
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump({"params": params_hash(params), "frames": str(frames_path),
                   "env": env_name, "n_examples": len(examples),
                   "config": config_hash(cfg)}, fh, indent=1, sort_keys=True)
    print(f"trained reward classifier on {len(examples)} frames to {run_dir}")
    return EXIT_OK


def cmd_rl(cfg, run_dir, args):
    policy_path, wm_path, reward_path = require(
        args, "rl needs --{flag}", "policy", "wm", "reward")
    env = CountingEnv(get_env(cfg["env"]))
    policy = build_policy(env, cfg)
    params = nn.load_params(policy_path)
    wm_params = nn.load_params(wm_path)
    reward_params = nn.load_params(reward_path)
    run_cfg = run_config_from(cfg)
    plan = plan_from(cfg, run_cfg)
    ledger = ResidencyLedger()
    r = cfg["rl"]
    new_params, logs = _rl_stage(
        policy, params, build_wm_net(env, cfg), wm_params,
        build_reward_net(env, cfg), reward_params, env, run_cfg, plan,
        KeyframeBuffer(), ledger, cfg["seed"], tag=76, iteration0=0,
        inner_epochs=r["inner_epochs"], lr=r["lr"],
        keyframe_k=r["keyframe_k"], threshold=r["reward_threshold"])
    if env.steps != 0:
        raise InvariantViolation("imagined RL consumed real env steps")
    nn.save_params(run_dir / "policy.wovc", new_params)
    with open(run_dir / "rl_log.json", "w") as fh:
        json.dump(logs, fh, indent=1, default=float)
    write_event_log(ledger, run_dir / "residency.csv")
    print(f"ran {plan.rl_updates_per_stage} imagined updates "
          f"(0 real steps) to {run_dir}")
    return EXIT_OK


def cmd_pace(cfg, run_dir, args):
    env = get_env(cfg["env"])
    policy = build_policy(env, cfg)
    demos = None
    if getattr(args, "demos", None):
        demos, _ = read_batch(args.demos)
    if getattr(args, "policy", None):
        base_params = nn.load_params(args.policy)
    elif demos:
        c = cfg["clone"]
        base_params, _ = clone_base_policy(demos, policy,
                                           derive_rng(cfg["seed"], 72),
                                           epochs=c["epochs"],
                                           batch_size=c["batch_size"],
                                           lr=c["lr"])
    else:
        raise ConfigError("pace needs --policy or --demos")
    run_cfg = run_config_from(cfg)
    plan = plan_from(cfg, run_cfg)
    w, f, r, rl = cfg["wm"], cfg["refine"], cfg["reward"], cfg["rl"]
    try:
        artifacts = run_pipeline(
            env, policy, base_params, build_wm_net(env, cfg),
            build_reward_net(env, cfg), run_cfg, plan, demos=demos,
            wm_epochs=w["epochs"], wm_batch=w["batch_size"], wm_lr=w["lr"],
            p_noisy=w["p_noisy"], refine_epochs=f["epochs"],
            refine_batch=f["batch_size"], refine_lr=f["lr"],
            reward_epochs=r["epochs"], reward_batch=r["batch_size"],
            reward_lr=r["lr"], reward_neg_ratio=r["neg_ratio"],
            reward_pos_weight=r["pos_weight"],
            rl_inner_epochs=rl["inner_epochs"],
            rl_lr=rl["lr"], keyframe_k=rl["keyframe_k"],
            reward_threshold=rl["reward_threshold"],
            explore_log_std=rl["explore_log_std"])
    except StageFailure as exc:
        exc.artifacts.write(run_dir)
        print(f"pipeline aborted in stage {exc.stage!r}; "
              f"partial artifacts in {run_dir}", file=sys.stderr)
        raise
    artifacts.write(run_dir)
    audit = artifacts.audit
    print(f"pipeline complete: {audit['trajectories_total']} real episodes "
          f"({audit['env_steps_total']} steps) within budget "
          f"{audit['budget']}; artifacts in {run_dir}")
    return EXIT_OK


def cmd_eval(cfg, run_dir, args):
    policy_path = require(args, "eval needs --{flag}", "policy")
    env = get_env(cfg["env"])
    policy = build_policy(env, cfg)
    params = nn.load_params(policy_path)
    run_cfg = run_config_from(cfg)
    T, H = run_cfg.max_episode_len, run_cfg.chunk
    e = cfg["eval"]
    metric, n, task_id = e["metric"], e["n"], e["task"]
    report = EvalReport(seeds=[cfg["seed"]],
                        checkpoint_hashes={"policy": params_hash(params)})

    def learned_wm():
        wm_path = require(args, f"eval --metric {metric} needs --{{flag}}", "wm")
        wm_params = nn.load_params(wm_path)
        report.checkpoint_hashes["wm"] = params_hash(wm_params)
        return LearnedWorldModel(build_wm_net(env, cfg), wm_params,
                                 run_cfg.diffusion_steps)

    if metric == "sr":
        per_task = [success_rate(policy, params, env, TaskSpec(t), n, T, H,
                                 derive_seed(cfg["seed"], 81, t))
                    for t in range(env.n_tasks)]
        report.success_rate = float(np.mean(per_task))
        report.sr_trials = n * env.n_tasks
    elif metric == "halluc":
        wm = learned_wm()
        reward_path = require(args, "eval --metric halluc needs --{flag}",
                              "reward")
        reward_params = nn.load_params(reward_path)
        report.checkpoint_hashes["reward"] = params_hash(reward_params)
        reward_net = build_reward_net(env, cfg)
        threshold = cfg["reward"]["threshold"]

        def reward_fn(frame, task):
            return sparse_reward(
                predict_success(reward_net, reward_params, frame, task),
                threshold)

        report.hallucination = hallucination_rate(
            policy, params, wm, reward_fn, env, TaskSpec(task_id), n, T, H,
            derive_seed(cfg["seed"], 82))
    elif metric == "horizon":
        wm = learned_wm()
        report.horizon_curve = horizon_error(
            wm, policy, params, env, TaskSpec(task_id), e["horizons"], n, T,
            H, derive_seed(cfg["seed"], 83))
    else:
        raise ConfigError(f"unknown eval metric {metric!r}")
    report.validate()
    report.write(run_dir / "eval.json",
                 run_dir / "horizon.csv" if report.horizon_curve else None)
    print(f"eval ({metric}) written to {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report aggregation


def aggregate_reports(reports: list[EvalReport]) -> dict:
    if not reports:
        raise ValueError("no eval reports to aggregate")

    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
        return {"mean": float(arr.mean()), "stderr": stderr, "n": len(arr)}

    out = {"n_reports": len(reports)}
    srs = [r.success_rate for r in reports if r.success_rate is not None]
    if srs:
        out["success_rate"] = stats(srs)
    for key in ("rate", "spurious", "missed"):
        vals = [r.hallucination[key] for r in reports
                if r.hallucination is not None]
        if vals:
            out[f"hallucination_{key}"] = stats(vals)
    by_horizon: dict[int, list[float]] = {}
    for r in reports:
        for horizon, mse in r.horizon_curve or []:
            by_horizon.setdefault(int(horizon), []).append(float(mse))
    if by_horizon:
        out["horizon_mse"] = {h: stats(v) for h, v in sorted(by_horizon.items())}
    return out


def report(run_dir) -> dict:
    """Aggregate every eval.json under run_dir: mean and stderr across seeds."""
    paths = sorted(Path(run_dir).rglob("eval.json"))
    if not paths:
        raise FileNotFoundError(f"no eval reports under {run_dir}")
    reports = [EvalReport.from_json(p.read_text()) for p in paths]
    return aggregate_reports(reports)


def summary_csv(summary: dict) -> str:
    lines = ["metric,mean,stderr,n"]
    for key, value in summary.items():
        if key == "n_reports":
            continue
        if key == "horizon_mse":
            for horizon, s in value.items():
                lines.append(f"horizon_{horizon},{s['mean']!r},{s['stderr']!r},{s['n']}")
        else:
            lines.append(f"{key},{value['mean']!r},{value['stderr']!r},{value['n']}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg, run_dir, args):
    summary = report(args.run_dir)
    out_dir = Path(args.out) if args.out else Path(args.run_dir)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    with open(out_dir / "summary.csv", "w") as fh:
        fh.write(summary_csv(summary))
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


COMMANDS = {
    "demo-gen": cmd_demo_gen,
    "clone": cmd_clone,
    "collect": cmd_collect,
    "train-wm": cmd_train_wm,
    "train-reward": cmd_train_reward,
    "rl": cmd_rl,
    "pace": cmd_pace,
    "eval": cmd_eval,
    "report": cmd_report,
}

# flags shared by every artifact-producing command, mapped to config paths
COMMON_PATHS = {"seed": "seed", "env": "env", "workers": "workers"}


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",")]


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="wovr",
        description="staged world-model RL: collect, train, imagine, refine")
    sub = parser.add_subparsers(dest="command", required=True)
    flag_paths: dict[str, dict] = {}

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--env", choices=("pickplace2d", "reachpoint"))
        p.add_argument("--workers", type=int,
                       help="reserved; all modules currently run in-process")
        p.add_argument("--run-root", dest="run_root",
                       help="run-directory root (default $WOVR_RUN_ROOT or ./runs)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override any config value")

    def register(name, help_, extra=None):
        p = sub.add_parser(name, help=help_)
        common(p)
        flag_paths[name] = dict(COMMON_PATHS)
        for flag, path, kw in extra or []:
            p.add_argument(flag, **kw)
            if path:
                flag_paths[name][flag.lstrip("-").replace("-", "_")] = path
        return p

    register("demo-gen", "generate scripted demonstrations", [
        ("--n", "demo.n", dict(type=int)),
        ("--noise", "demo.noise", dict(type=float)),
    ])
    register("clone", "behavior-clone a policy from demos", [
        ("--demos", None, dict(help="demo store path")),
        ("--epochs", "clone.epochs", dict(type=int)),
        ("--lr", "clone.lr", dict(type=float)),
    ])
    register("collect", "roll out a policy in the real env", [
        ("--policy", None, dict(help="policy checkpoint")),
        ("--n", "collect.n", dict(type=int)),
    ])
    register("train-wm", "train the world model on frames", [
        ("--frames", None, dict(help="frame store path")),
        ("--epochs", "wm.epochs", dict(type=int)),
        ("--lr", "wm.lr", dict(type=float)),
        ("--batch-size", "wm.batch_size", dict(type=int)),
    ])
    register("train-reward", "train the success classifier on frames", [
        ("--frames", None, dict(help="frame store path")),
        ("--demos", None, dict(help="demo store mixed in as extra frames")),
        ("--epochs", "reward.epochs", dict(type=int)),
        ("--lr", "reward.lr", dict(type=float)),
    ])
    register("rl", "imagined GRPO against a fixed world model", [
        ("--policy", None, dict(help="policy checkpoint")),
        ("--wm", None, dict(help="world-model checkpoint")),
        ("--reward", None, dict(help="reward checkpoint")),
        ("--updates", "plan.rl_updates_per_stage", dict(type=int)),
    ])
    register("pace", "full staged pipeline", [
        ("--demos", None, dict(help="demo store (cloned into the base policy)")),
        ("--policy", None, dict(help="pre-cloned base policy checkpoint")),
        ("--n-base", "run.n_base", dict(type=int)),
        ("--n-evo", "run.n_evo", dict(type=int)),
        ("--refinements", "plan.refinements", dict(type=int)),
        ("--rl-updates", "plan.rl_updates_per_stage", dict(type=int)),
    ])
    register("eval", "evaluate a policy checkpoint", [
        ("--policy", None, dict(help="policy checkpoint")),
        ("--wm", None, dict(help="world-model checkpoint (halluc/horizon)")),
        ("--reward", None, dict(help="reward checkpoint (halluc)")),
        ("--metric", "eval.metric", dict(choices=("sr", "halluc", "horizon"))),
        ("--n", "eval.n", dict(type=int)),
        ("--task", "eval.task", dict(type=int)),
        ("--horizons", "eval.horizons", dict(type=_int_list)),
    ])
    rep = sub.add_parser("report", help="aggregate eval reports across seeds")
    rep.add_argument("run_dir", help="directory tree containing eval.json files")
    rep.add_argument("--out", help="where to write summary files (default run_dir)")
    flag_paths["report"] = {}

    return parser, flag_paths


def parse_and_dispatch(argv) -> int:
    parser, flag_paths = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code or 0
        return EXIT_CONFIG if code not in (0, EXIT_CONFIG) else int(code)
    try:
        if args.command == "report":
            return cmd_report(None, None, args)
        resolved = resolve_config(args, flag_paths[args.command])
        run_dir = make_run_dir(run_root(args), args.command, resolved)
        write_resolved(run_dir, resolved)
        return COMMANDS[args.command](resolved, run_dir, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.__cause__
        return (EXIT_INVARIANT if isinstance(cause, InvariantViolation)
                else EXIT_RUNTIME)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    entry()
