"""Toy manipulation environments with exact, pure-function dynamics.

All dynamics are deterministic: step(state, action) is a pure function, the
only randomness lives in reset. PickPlace2D deliberately contains a contact
discontinuity (the grasp) because that is where learned dynamics models go
wrong in interesting ways.
"""
from __future__ import annotations

import numpy as np

from .core import FrameEpisode, StepRecord, TaskSpec, Trajectory, derive_rng

# target positions shared by both environments, one per task id
_TARGETS = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])


def _clip01(xy: np.ndarray) -> np.ndarray:
    return np.clip(xy, 0.0, 1.0)


def _check_action(action, dim: int) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (dim,):
        raise ValueError(f"action has shape {action.shape}, expected ({dim},)")
    if not np.all(np.isfinite(action)):
        raise ValueError("non-finite action")
    return action


class PickPlace2D:
    """Gripper, object, target in the unit square.

    State layout (8,): gripper x, y, grip (0 open / 1 closed), object x, y,
    target x, y, held flag. Action (3,): dx, dy (motion capped per step),
    grip command (> 0 closes). Grasping requires a close command within
    grasp_radius of the object; success is the object resting within
    success_radius of the target with the grip open.
    """

    name = "pickplace2d"
    state_dim = 8
    action_dim = 3
    n_tasks = 4
    # policy emission box; wide enough that saturated travel commands (+-1)
    # plus exploration noise almost never hit the walls
    action_low = -2.0
    action_high = 2.0
    step_cap = 0.05
    grasp_radius = 0.04
    success_radius = 0.05

    def reset_state(self, task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
        if task.task_id >= self.n_tasks:
            raise ValueError(f"task {task.task_id} not registered for {self.name}")
        gripper = 0.5 + rng.uniform(-0.05, 0.05, size=2)
        obj = 0.5 + rng.uniform(-0.12, 0.12, size=2)
        target = _TARGETS[task.task_id]
        return np.array([*gripper, 0.0, *obj, *target, 0.0])

    def step(self, state: np.ndarray, action) -> tuple[np.ndarray, int, bool]:
        action = _check_action(action, self.action_dim)
        gripper = state[0:2].copy()
        obj = state[3:5].copy()
        target = state[5:7]
        held = state[7] > 0.5
        close_cmd = action[2] > 0.0

        gripper = _clip01(gripper + np.clip(action[:2], -self.step_cap, self.step_cap))
        if held:
            obj = gripper.copy()
        if close_cmd:
            if not held and np.linalg.norm(gripper - obj) <= self.grasp_radius:
                held = True
                obj = gripper.copy()
        else:
            held = False  # open releases in place (no-op when nothing is held)

        nxt = np.array([*gripper, 1.0 if close_cmd else 0.0, *obj, *target, 1.0 if held else 0.0])
        reward = 1 if self.is_success(nxt) else 0
        return nxt, reward, reward == 1

    def is_success(self, state: np.ndarray) -> bool:
        grip_open = state[2] < 0.5
        not_held = state[7] < 0.5
        near = np.linalg.norm(state[3:5] - state[5:7]) <= self.success_radius
        return bool(grip_open and not_held and near)

    def expert_action(self, state: np.ndarray) -> np.ndarray:
        """Waypoint controller: approach-and-grasp, carry, release.

        The grip closes during the whole approach, so the grasp fires on the
        first step that lands inside the grasp radius; under action noise
        this retries for free instead of needing a separate fragile close
        step. Succeeds on every task at zero noise.
        """
        gripper = state[0:2]
        obj = state[3:5]
        target = state[5:7]
        held = state[7] > 0.5
        if not held:
            return np.array([*_travel(obj - gripper, self.step_cap), 1.0])
        delta = target - gripper
        if np.linalg.norm(delta) > 0.01:
            return np.array([*_travel(delta, self.step_cap), 1.0])
        return np.array([0.0, 0.0, -1.0])


class ReachPoint:
    """Point agent moving to a target; the no-contact smoke-test environment."""

    name = "reachpoint"
    state_dim = 4
    action_dim = 2
    n_tasks = 4
    action_low = -2.0
    action_high = 2.0
    step_cap = 0.05
    success_radius = 0.05

    def reset_state(self, task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
        if task.task_id >= self.n_tasks:
            raise ValueError(f"task {task.task_id} not registered for {self.name}")
        agent = 0.5 + rng.uniform(-0.12, 0.12, size=2)
        return np.array([*agent, *_TARGETS[task.task_id]])

    def step(self, state: np.ndarray, action) -> tuple[np.ndarray, int, bool]:
        action = _check_action(action, self.action_dim)
        agent = _clip01(state[0:2] + np.clip(action, -self.step_cap, self.step_cap))
        nxt = np.array([*agent, *state[2:4]])
        reward = 1 if self.is_success(nxt) else 0
        return nxt, reward, reward == 1

    def is_success(self, state: np.ndarray) -> bool:
        return bool(np.linalg.norm(state[0:2] - state[2:4]) <= self.success_radius)

    def expert_action(self, state: np.ndarray) -> np.ndarray:
        return _travel(state[2:4] - state[0:2], self.step_cap)


def _travel(delta: np.ndarray, cap: float) -> np.ndarray:
    """Exact delta when within per-step reach, else a saturated unit command."""
    return np.where(np.abs(delta) <= cap, delta, np.sign(delta))


_REGISTRY = {"pickplace2d": PickPlace2D, "reachpoint": ReachPoint}


def get_env(name: str):
    if name not in _REGISTRY:
        raise KeyError(f"unknown environment {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name]()


def reset(env_kind: str, task: TaskSpec, seed: int) -> np.ndarray:
    """Deterministic initial state for (task, seed)."""
    return get_env(env_kind).reset_state(task, derive_rng(seed, task.task_id))


class CountingEnv:
    """Instrumented wrapper: counts real steps and resets, delegates the rest.

    The step counter is the ground truth for rollout-budget audits, so every
    real transition must flow through one of these.
    """

    def __init__(self, env):
        self.env = env
        self.steps = 0
        self.resets = 0

    def __getattr__(self, name):
        return getattr(self.env, name)

    def reset_state(self, task, rng):
        self.resets += 1
        return self.env.reset_state(task, rng)

    def step(self, state, action):
        self.steps += 1
        return self.env.step(state, action)


def scripted_demo(env, task: TaskSpec, seed: int, noise_level: float = 0.0,
                  chunk: int = 8, max_len: int = 64) -> Trajectory:
    """Run the waypoint expert with additive Gaussian action noise.

    Returns a chunk-granular trajectory; logp_old is the exact Gaussian
    log-density of the recorded actions under the noisy controller (0.0 for
    the degenerate noise-free case).
    """
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    if max_len % chunk != 0:
        raise ValueError("max_len must be a multiple of the chunk length")
    rng = derive_rng(seed, task.task_id, 7)
    state = env.reset_state(task, rng)
    steps: list[StepRecord] = []
    done = False
    for _ in range(max_len // chunk):
        obs = state.copy()
        actions = np.zeros((chunk, env.action_dim))
        means = np.zeros_like(actions)
        reward = 0
        taken = 0
        for j in range(chunk):
            mean = env.expert_action(state)
            act = mean + noise_level * rng.normal(size=env.action_dim)
            act = np.clip(act, env.action_low, env.action_high)
            actions[j] = act
            means[j] = mean
            taken = j + 1
            state, r, done = env.step(state, act)
            if r == 1:
                reward = 1
            if done:
                break
        # pad unexecuted slots with repeats of the last command so the chunk
        # keeps its fixed shape; they were never applied
        for j in range(taken, chunk):
            actions[j] = actions[taken - 1]
            means[j] = means[taken - 1]
        if noise_level > 0:
            var = noise_level**2
            logp = float(
                -0.5 * np.sum((actions - means) ** 2) / var
                - actions.size * (0.5 * np.log(2.0 * np.pi * var))
            )
        else:
            logp = 0.0
        steps.append(StepRecord(obs, actions, reward, logp, done))
        if done:
            break
    return Trajectory.build(task, "initial", steps)


def replay_frames(env, traj: Trajectory) -> FrameEpisode:
    """Re-step a trajectory's stored chunks to recover every env frame.

    The dynamics are deterministic, so feeding the recorded actions from the
    recorded start reproduces the original episode exactly. Replay stops at
    the first success frame inside a chunk, matching how rollouts cut their
    frame history; padded slots after a demo's terminal step are never
    reached.
    """
    if not traj.steps:
        raise ValueError("cannot replay an empty trajectory")
    state = np.asarray(traj.steps[0].obs, dtype=np.float64)
    states = [state]
    actions: list[np.ndarray] = []
    for rec in traj.steps:
        hit = False
        for act in rec.chunk:
            state, _, _ = env.step(state, act)
            states.append(state)
            actions.append(np.asarray(act, dtype=np.float64))
            if env.is_success(state):
                hit = True
                break
        if hit:
            break
    return FrameEpisode(traj.task, np.array(states), np.array(actions))
