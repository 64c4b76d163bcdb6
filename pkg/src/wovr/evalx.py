"""Evaluation: real success rate, hallucination rate, error-vs-horizon curves.

The hallucination metric is the outcome mismatch between an imagined rollout
and an open-loop replay of its actions in the real environment. The horizon
curve replays real action sequences through the model closed-loop and reports
state MSE at increasing depths. Every metric vanishes when the model is the
environment oracle, which pins the plumbing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import TaskSpec, derive_rng, derive_seed
from .rollout import GroupSpec, rollout_imagined, rollout_real
from .worldmodel import build_context


def success_rate(policy, params, env, task: TaskSpec, n: int, T: int, H: int,
                 seed: int) -> float:
    """Fraction of n independent real episodes that reach success."""
    if n < 1:
        raise ValueError("n must be >= 1")
    trajs = rollout_real(policy, params, env, task, n, T, H, seed)
    return sum(t.success for t in trajs) / n


def _replay_actions(env, start: np.ndarray, actions) -> bool:
    """Open-loop replay; true iff any step reaches success."""
    state = np.asarray(start, dtype=np.float64)
    for action in actions:
        state, reward, _ = env.step(state, action)
        if reward == 1:
            return True
    return False


def hallucination_rate(policy, params, wm, reward_fn, env, task: TaskSpec,
                       n: int, T: int, H: int, seed: int) -> dict:
    """Imagined-vs-real outcome mismatch over n paired episodes.

    Episode i: imagined closed-loop rollout from a fresh env start, then its
    recorded actions replayed verbatim in the real env from the same start.
    Returns rate plus the two one-sided fractions: spurious (imagined success,
    real failure — the dangerous direction) and missed (imagined failure,
    real success).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    spurious = missed = 0
    for i in range(n):
        start = env.reset_state(task, derive_rng(seed, i, 0))
        group = GroupSpec(task, start, "initial", 1)
        traj = rollout_imagined(policy, params, wm, reward_fn, group, T, H,
                                seed=derive_seed(seed, i))[0]
        actions = [a for rec in traj.steps for a in rec.chunk]
        real = _replay_actions(env, start, actions)
        if traj.success and not real:
            spurious += 1
        elif real and not traj.success:
            missed += 1
    return {
        "rate": (spurious + missed) / n,
        "spurious": spurious / n,
        "missed": missed / n,
        "n": n,
    }


def horizon_error(wm, policy, params, env, task: TaskSpec, horizons,
                  n: int, T: int, H: int, seed: int) -> list[tuple[int, float]]:
    """Mean squared state error of closed-loop model replay at each horizon.

    Per episode: the policy runs in the real env for max(horizons) frames
    (success does not stop the recording; every horizon needs a state), then
    the same action chunks are replayed through the model closed-loop from
    the same start. The curve pairs each horizon L with the mean over
    episodes of the state MSE at frame L.
    """
    horizons = [int(h) for h in horizons]
    if not horizons:
        raise ValueError("horizons must be non-empty")
    if any(h < 1 or h % H != 0 for h in horizons):
        raise ValueError("every horizon must be a positive multiple of H")
    if sorted(set(horizons)) != horizons:
        raise ValueError("horizons must be strictly increasing")
    if horizons[-1] > T:
        raise ValueError("horizon exceeds the episode cap")
    if n < 1:
        raise ValueError("n must be >= 1")
    depth = horizons[-1]
    sq_err = {h: [] for h in horizons}
    for i in range(n):
        start = env.reset_state(task, derive_rng(seed, i, 0))
        policy_rng = derive_rng(seed, i, 1)
        model_rng = derive_rng(seed, i, 2)
        # real recording, fixed length
        real_states = [start]
        chunks = []
        for _ in range(depth // H):
            chunk, _ = policy.sample(params, real_states[-1], task, policy_rng)
            chunks.append(chunk)
            state = real_states[-1]
            for action in chunk:
                state, _, _ = env.step(state, action)
                real_states.append(state)
        # model replay of the same chunks, closed loop on its own frames
        model_states = [start]
        for chunk in chunks:
            ctx = build_context(model_states, wm.context, task, wm.anchor_mode)
            frames = wm.predict_chunk(ctx, chunk, model_rng)
            model_states.extend(np.asarray(f, dtype=np.float64) for f in frames)
        for h in horizons:
            sq_err[h].append(np.mean((real_states[h] - model_states[h]) ** 2))
    return [(h, float(np.mean(sq_err[h]))) for h in horizons]


@dataclass
class EvalReport:
    """One evaluation bundle; any metric may be absent (None)."""

    seeds: list = field(default_factory=list)
    checkpoint_hashes: dict = field(default_factory=dict)
    success_rate: float | None = None
    sr_trials: int | None = None
    hallucination: dict | None = None
    horizon_curve: list | None = None

    def validate(self):
        for name, rate in (("success_rate", self.success_rate),
                           ("hallucination rate",
                            self.hallucination["rate"] if self.hallucination else None)):
            if rate is not None and not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")
        if self.horizon_curve is not None:
            hs = [h for h, _ in self.horizon_curve]
            if sorted(set(hs)) != hs:
                raise ValueError("horizon list must be strictly increasing")
        return self

    def to_json(self) -> str:
        payload = {
            "seeds": list(self.seeds),
            "checkpoint_hashes": dict(self.checkpoint_hashes),
            "success_rate": self.success_rate,
            "sr_trials": self.sr_trials,
            "hallucination": self.hallucination,
            "horizon_curve": self.horizon_curve,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        curve = raw.get("horizon_curve")
        if curve is not None:
            curve = [(int(h), float(e)) for h, e in curve]
        return cls(
            seeds=raw.get("seeds", []),
            checkpoint_hashes=raw.get("checkpoint_hashes", {}),
            success_rate=raw.get("success_rate"),
            sr_trials=raw.get("sr_trials"),
            hallucination=raw.get("hallucination"),
            horizon_curve=curve,
        ).validate()

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            fh.write(self.to_json())
        if csv_path is not None and self.horizon_curve is not None:
            lines = ["horizon,mse"]
            lines += [f"{h},{e!r}" for h, e in self.horizon_curve]
            with open(csv_path, "w") as fh:
                fh.write("\n".join(lines) + "\n")
