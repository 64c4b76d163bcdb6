"""Closed-loop rollouts: policy against world model (imagined) or env (real).

Both loops share the same chunk-by-chunk skeleton so that swapping the learned
model for the true dynamics (and the learned reward for the true success
predicate) reproduces real rollouts bit for bit under the same seeds. Keyframe
initialized rollouts restart a fraction of groups from stored failure states
instead of the episode start.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import (
    FrameEpisode,
    StepRecord,
    TaskSpec,
    Trajectory,
    derive_rng,
    read_store,
    write_store,
)
from .worldmodel import build_context

log = logging.getLogger(__name__)


class KeyframeBuffer:
    """FIFO ring of (state, task, source_step) harvested from failures."""

    def __init__(self, capacity: int = 512):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._ring = deque(maxlen=capacity)

    def __len__(self):
        return len(self._ring)

    def append(self, state: np.ndarray, task: TaskSpec, source_step: int):
        self._ring.append((np.asarray(state, dtype=np.float64).copy(), task, source_step))

    def entries(self, task: TaskSpec | None = None) -> list:
        if task is None:
            return list(self._ring)
        return [e for e in self._ring if e[1].task_id == task.task_id]

    def clear(self):
        self._ring.clear()


def harvest_keyframes(trajectories, k: int, buffer: KeyframeBuffer) -> KeyframeBuffer:
    """Append the last-k chunk-step observations of every failed trajectory."""
    if k < 1:
        raise ValueError("k must be >= 1")
    for traj in trajectories:
        if traj.success:
            continue
        n = len(traj.steps)
        for i in range(max(0, n - k), n):
            buffer.append(traj.steps[i].obs, traj.task, i)
    return buffer


def sample_start(buffer: KeyframeBuffer, task: TaskSpec, p_kir: float,
                 env_reset, rng: np.random.Generator):
    """Keyframe start with probability p_kir, else a fresh env reset.

    Falls back to env_reset when no buffered keyframe matches the task. The
    p_kir coin is drawn before the fallback check so the keyframe fraction
    among populated tasks is exactly p_kir.
    """
    if not 0.0 <= p_kir <= 1.0:
        raise ValueError("p_kir must lie in [0, 1]")
    use_kir = rng.uniform() < p_kir
    if use_kir:
        matching = buffer.entries(task)
        if matching:
            state, _, _ = matching[rng.integers(len(matching))]
            return state.copy(), "keyframe"
    return env_reset(rng), "initial"


@dataclass(frozen=True)
class GroupSpec:
    """Shared starting point for one advantage group of G rollouts."""

    task: TaskSpec
    start_state: np.ndarray
    start_kind: str
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("group size must be >= 1")
        object.__setattr__(self, "start_state",
                           np.asarray(self.start_state, dtype=np.float64))


def _roll_member(policy, params, dynamics_fn, reward_fn, task, start, start_kind,
                 T, H, policy_rng, model_rng):
    """One closed-loop episode; dynamics_fn(history, chunk, rng) -> H frames.

    Returns (trajectory, frame history). The history holds every executed
    frame, cut at the success frame when the learned or true reward fires
    mid-chunk.
    """
    history = [np.asarray(start, dtype=np.float64)]
    records = []
    success = False
    while len(records) * H < T and not success:
        obs = history[-1]
        chunk, logp = policy.sample(params, obs, task, policy_rng)
        try:
            frames = dynamics_fn(history, chunk, model_rng)
        except FloatingPointError as exc:
            log.warning("rollout member aborted at chunk-step %d: %s", len(records), exc)
            break
        reward = 0
        for frame in frames:
            history.append(np.asarray(frame, dtype=np.float64))
            if reward_fn(history[-1], task):
                reward = 1
                break
        success = reward == 1
        records.append(StepRecord(obs=obs, chunk=chunk, reward=reward,
                                  logp_old=logp, done=success))
    traj = Trajectory.build(task=task, start_kind=start_kind, steps=records)
    return traj, history


def rollout_imagined(policy, params, wm, reward_fn, group: GroupSpec,
                     T: int, H: int, seed: int) -> list[Trajectory]:
    """G imagined trajectories from the group's shared start.

    wm provides predict_chunk/context/anchor_mode; reward_fn(frame, task) is
    the thresholded learned reward (or the true predicate in oracle tests).
    Member i draws from derive_rng(seed, i, 1) for the policy and
    derive_rng(seed, i, 2) for the model, so members are independent and
    reproducible in isolation.
    """
    if T % H != 0:
        raise ValueError("T must be a multiple of the chunk horizon")

    def dynamics(history, chunk, model_rng):
        ctx = build_context(history, wm.context, group.task, wm.anchor_mode)
        frames = wm.predict_chunk(ctx, chunk, model_rng)
        if not np.all(np.isfinite(frames)):
            raise FloatingPointError("non-finite predicted frame")
        return frames

    out = []
    for i in range(group.size):
        traj, _ = _roll_member(
            policy, params, dynamics, reward_fn, group.task, group.start_state,
            group.start_kind, T, H, derive_rng(seed, i, 1), derive_rng(seed, i, 2))
        out.append(traj)
    return out


def _executed_actions(traj: Trajectory, n_frames: int, H: int) -> np.ndarray:
    """Concatenate each step's executed chunk prefix (the last may be cut)."""
    actions = []
    for j, rec in enumerate(traj.steps):
        take = min(H, n_frames - j * H)
        actions.extend(rec.chunk[:take])
    a_dim = traj.steps[0].chunk.shape[1] if traj.steps else 0
    return np.array(actions).reshape(len(actions), a_dim)


def rollout_real(policy, params, env, task: TaskSpec, n: int, T: int, H: int,
                 seed: int, starts=None, record_frames: bool = False):
    """n real-env trajectories; evaluation and data collection only.

    Episode i resets from derive_rng(seed, i, 0) unless explicit starts are
    given; the policy stream is derive_rng(seed, i, 1), mirroring
    rollout_imagined member streams. With record_frames, also returns one
    (states, actions) frame episode per trajectory for model training.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if T % H != 0:
        raise ValueError("T must be a multiple of the chunk horizon")

    def dynamics(history, chunk, _model_rng):
        state = history[-1]
        frames = []
        for action in chunk:
            state, _, _ = env.step(state, action)
            frames.append(state)
        return np.array(frames)

    def true_reward(frame, _task):
        return int(env.is_success(frame))

    trajectories = []
    episodes = []
    for i in range(n):
        if starts is not None:
            start = np.asarray(starts[i], dtype=np.float64)
        else:
            start = env.reset_state(task, derive_rng(seed, i, 0))
        traj, history = _roll_member(policy, params, dynamics, true_reward, task,
                                     start, "initial", T, H,
                                     derive_rng(seed, i, 1), derive_rng(seed, i, 2))
        trajectories.append(traj)
        if record_frames:
            states = np.array(history)
            actions = _executed_actions(traj, len(history) - 1, H)
            episodes.append(FrameEpisode(task, states, actions))
    if record_frames:
        return trajectories, episodes
    return trajectories


def write_batch(path, trajectories, manifest: dict):
    """Persist a rollout batch next to a JSON manifest (sorted keys)."""
    write_store(path, trajectories)
    with open(str(path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def read_batch(path):
    trajectories = read_store(path)
    with open(str(path) + ".manifest.json") as fh:
        manifest = json.load(fh)
    return trajectories, manifest
