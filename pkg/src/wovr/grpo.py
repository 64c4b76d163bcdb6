"""Group-relative policy optimization over imagined trajectories.

The policy emits an action chunk (H low-level actions) per call, so there is
exactly one importance ratio per recorded step. Advantages are group returns
minus the group mean, nothing else: no std normalization, no KL penalty, no
value baseline (optional flags exist for the first two but default off).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .core import Trajectory, one_hot
from .nn import Mlp, Tensor, as_tensor, clip, exp, minimum, tsum, value_and_grad

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


class ChunkPolicy:
    """Diagonal-Gaussian policy over flattened action chunks.

    Mean comes from an Mlp on (obs, task one-hot); the log-std vector is a
    free state-independent parameter, clamped to [-5, 2]. Samples are clipped
    to the action box at emission and the stored log-density is evaluated at
    the clipped value, so the behavior density of a stored chunk is exactly
    reproducible later.

    aux_features, when given, is a deterministic map obs -> extra input
    coordinates (of fixed size aux_dim) appended between the observation and
    the task one-hot. It changes only the trunk's input layout, never the
    recorded observations.
    """

    def __init__(self, obs_dim, n_tasks, horizon, a_dim, hidden=(64, 64),
                 action_low=-2.0, action_high=2.0, init_log_std=-1.5, name="pi",
                 aux_features=None, aux_dim: int = 0):
        if (aux_features is None) != (aux_dim == 0):
            raise ValueError("aux_features and aux_dim must be given together")
        self.obs_dim = obs_dim
        self.n_tasks = n_tasks
        self.horizon = horizon
        self.a_dim = a_dim
        self.flat = horizon * a_dim
        self.action_low = action_low
        self.action_high = action_high
        self.init_log_std = init_log_std
        self.name = name
        self.aux_features = aux_features
        self.aux_dim = aux_dim
        self.trunk = Mlp(name, [obs_dim + aux_dim + n_tasks, *hidden, self.flat])

    def init(self, rng: np.random.Generator) -> dict:
        params = self.trunk.init(rng)
        params[f"{self.name}.log_std"] = np.full(self.flat, self.init_log_std)
        return params

    def features(self, obs: np.ndarray, task) -> np.ndarray:
        parts = [obs, one_hot(task.task_id, self.n_tasks)]
        if self.aux_features is not None:
            parts.insert(1, np.asarray(self.aux_features(obs), dtype=np.float64))
        return np.concatenate(parts)

    def mean(self, params: dict, obs, task) -> np.ndarray:
        return self.trunk.apply(params, self.features(obs, task))

    def log_std(self, params: dict) -> np.ndarray:
        return np.clip(params[f"{self.name}.log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, params: dict, obs, task, rng: np.random.Generator):
        """Draw one chunk; returns (H x a_dim chunk, behavior log-density)."""
        mu = self.mean(params, obs, task)
        sigma = np.exp(self.log_std(params))
        raw = mu + sigma * rng.normal(size=self.flat)
        clipped = np.clip(raw, self.action_low, self.action_high)
        logp = self.logprob(params, obs, task, clipped)
        return clipped.reshape(self.horizon, self.a_dim), logp

    def logprob(self, params: dict, obs, task, chunk) -> float:
        """Log-density of a stored chunk; plain numpy, no tape."""
        mu = self.mean(params, obs, task)
        log_sigma = self.log_std(params)
        z = (np.asarray(chunk).reshape(self.flat) - mu) / np.exp(log_sigma)
        return float(-0.5 * np.sum(z * z) - np.sum(log_sigma) - 0.5 * self.flat * LOG_2PI)

    def logprob_batch_t(self, leaves: dict, feats: np.ndarray, chunks: np.ndarray) -> Tensor:
        """Tape version over a batch: feats (N, obs+tasks), chunks (N, H*a_dim)."""
        mu = self.trunk(leaves, feats)
        log_sigma = clip(as_tensor(leaves[f"{self.name}.log_std"]), LOG_STD_MIN, LOG_STD_MAX)
        z = (as_tensor(chunks) - mu) * exp(-log_sigma)
        quad = tsum(z * z, axis=1)
        return -0.5 * quad - tsum(log_sigma) - 0.5 * self.flat * LOG_2PI

    def clamp(self, params: dict) -> dict:
        params[f"{self.name}.log_std"] = np.clip(
            params[f"{self.name}.log_std"], LOG_STD_MIN, LOG_STD_MAX
        )
        return params


def chunk_logprob(policy: ChunkPolicy, params: dict, obs, task, chunk) -> float:
    return policy.logprob(params, obs, task, chunk)


def discounted_return(traj: Trajectory, gamma: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    return float(sum(step.reward * gamma**t for t, step in enumerate(traj.steps)))


def group_advantages(returns, normalize_std: bool = False) -> np.ndarray:
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size < 2:
        raise ValueError("a group needs at least 2 members")
    adv = returns - returns.mean()
    if normalize_std:
        adv = adv / (returns.std() + 1e-8)
    return adv


def clipped_term(rho: float, adv: float, eps: float) -> float:
    return float(min(rho * adv, np.clip(rho, 1.0 - eps, 1.0 + eps) * adv))


@dataclass
class GroupBatch:
    """One rollout group with its returns and mean-subtracted advantages."""

    trajectories: list[Trajectory]
    returns: np.ndarray
    advantages: np.ndarray

    def __post_init__(self):
        g = len(self.trajectories)
        if self.returns.shape != (g,) or self.advantages.shape != (g,):
            raise ValueError("returns/advantages must have one entry per member")
        bound = 1e-12 * g * max(1.0, np.abs(self.returns).max())
        if abs(self.advantages.sum()) > bound:
            raise ValueError("advantages must sum to zero within rounding")


def build_group(trajectories: list[Trajectory], gamma: float,
                normalize_std: bool = False) -> GroupBatch:
    returns = np.array([discounted_return(t, gamma) for t in trajectories])
    return GroupBatch(trajectories, returns,
                      group_advantages(returns, normalize_std))


def _flatten_valid_steps(policy: ChunkPolicy, groups: list[GroupBatch]):
    """Stack every in-mask step of every trajectory into flat arrays.

    Steps beyond valid_len are excluded entirely, which realizes the mask:
    they cannot contribute to the objective or its gradient.
    """
    feats, chunks, logp_old, weights, advs = [], [], [], [], []
    n_traj = sum(len(g.trajectories) for g in groups)
    for group in groups:
        for traj, adv in zip(group.trajectories, group.advantages):
            t_valid = traj.valid_len
            if t_valid == 0:
                continue
            for step in traj.steps[:t_valid]:
                feats.append(policy.features(step.obs, traj.task))
                chunks.append(np.asarray(step.chunk).reshape(policy.flat))
                logp_old.append(step.logp_old)
                weights.append(1.0 / (n_traj * t_valid))
                advs.append(adv)
    if not feats:
        return None
    return (
        np.array(feats),
        np.array(chunks),
        np.array(logp_old),
        np.array(weights),
        np.array(advs),
    )


def grpo_objective(policy: ChunkPolicy, params: dict, groups: list[GroupBatch],
                   clip_eps: float, kl_beta: float = 0.0):
    """Masked, length-normalized clipped surrogate, as a tape scalar.

    (1 / n_traj) * sum_i (1 / T_i_valid) * sum_{t <= T_i_valid}
        min(rho_t * A_i, clip(rho_t, 1-eps, 1+eps) * A_i)

    With kl_beta > 0 each step also pays kl_beta * (rho - 1 - log rho), a
    nonnegative sample estimate of KL(old || new) that vanishes with zero
    gradient at the behavior parameters.
    """
    flat = _flatten_valid_steps(policy, groups)
    if flat is None:
        return as_tensor(0.0)
    feats, chunks, logp_old, weights, advs = flat
    if not np.all(np.isfinite(logp_old)):
        raise ValueError("missing or non-finite behavior log-density")
    logp = policy.logprob_batch_t(params, feats, chunks)
    delta = logp - logp_old
    rho = exp(delta)
    surrogate = minimum(rho * advs, clip(rho, 1.0 - clip_eps, 1.0 + clip_eps) * advs)
    if kl_beta > 0.0:
        surrogate = surrogate - kl_beta * (rho - 1.0 - delta)
    return tsum(surrogate * weights)


def ratio_stats(policy: ChunkPolicy, params: dict, groups: list[GroupBatch],
                clip_eps: float) -> dict:
    flat = _flatten_valid_steps(policy, groups)
    if flat is None:
        return {"mean_ratio": 1.0, "clip_fraction": 0.0, "n_steps": 0}
    feats, chunks, logp_old, _, _ = flat
    with nn.no_grad():
        logp = policy.logprob_batch_t(params, feats, chunks).data
    rho = np.exp(logp - logp_old)
    outside = (rho < 1.0 - clip_eps) | (rho > 1.0 + clip_eps)
    return {
        "mean_ratio": float(rho.mean()),
        "clip_fraction": float(outside.mean()),
        "n_steps": int(rho.size),
    }


def grpo_update(policy: ChunkPolicy, params: dict, groups: list[GroupBatch],
                clip_eps: float, inner_epochs: int, opt_state: dict | None = None,
                lr: float = 3e-4, kl_beta: float = 0.0) -> tuple[dict, dict, list[dict]]:
    """Gradient-ascent epochs on the clipped surrogate.

    Returns (params', opt_state, per-epoch stats). A non-finite objective or
    gradient aborts the whole update and hands back the original parameters.
    """
    if not groups:
        raise ValueError("no groups to update on")
    original = {k: v.copy() for k, v in params.items()}
    if opt_state is None:
        opt_state = nn.adam_init(params)
    logs = []
    for _ in range(inner_epochs):
        value, grads = value_and_grad(
            lambda leaves: -grpo_objective(policy, leaves, groups, clip_eps,
                                           kl_beta), params
        )
        if not np.isfinite(value) or any(not np.all(np.isfinite(g)) for g in grads.values()):
            return original, opt_state, logs + [{"aborted": True}]
        params = policy.clamp(nn.adam_step(params, grads, opt_state, lr=lr))
        stats = ratio_stats(policy, params, groups, clip_eps)
        stats["objective"] = -value
        logs.append(stats)
    return params, opt_state, logs
