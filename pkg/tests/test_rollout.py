import numpy as np
import pytest

from wovr.core import StepRecord, TaskSpec, Trajectory, derive_rng
from wovr.envs import CountingEnv, PickPlace2D, ReachPoint
from wovr.grpo import ChunkPolicy
from wovr.rollout import (
    GroupSpec,
    KeyframeBuffer,
    harvest_keyframes,
    read_batch,
    rollout_imagined,
    rollout_real,
    sample_start,
    write_batch,
)
from wovr.worldmodel import OracleWorldModel

H = 4
T = 16


def make_policy(env, init_log_std=-1.0):
    policy = ChunkPolicy(env.state_dim, getattr(env, "n_tasks", 1), H,
                         env.action_dim, hidden=(16,), init_log_std=init_log_std)
    params = policy.init(derive_rng(0))
    return policy, params


def fail_traj(task_id=0, n=8, d=3):
    steps = [
        StepRecord(obs=np.full(d, float(i)), chunk=np.zeros((H, 2)),
                   reward=0, logp_old=-1.0, done=False)
        for i in range(n)
    ]
    return Trajectory.build(TaskSpec(task_id), "initial", steps)


def win_traj(task_id=0, n=3, d=3):
    steps = [
        StepRecord(obs=np.full(d, float(i)), chunk=np.zeros((H, 2)),
                   reward=1 if i == n - 1 else 0, logp_old=-1.0, done=i == n - 1)
        for i in range(n)
    ]
    return Trajectory.build(TaskSpec(task_id), "initial", steps)


# -- keyframe buffer ------------------------------------------------------------


def test_buffer_fifo_eviction():
    buf = KeyframeBuffer(capacity=2)
    for i in range(3):
        buf.append(np.array([float(i)]), TaskSpec(0), i)
    assert len(buf) == 2
    kept = [e[0][0] for e in buf.entries()]
    assert kept == [1.0, 2.0]


def test_buffer_rejects_bad_capacity():
    with pytest.raises(ValueError):
        KeyframeBuffer(capacity=0)


def test_harvest_skips_successes():
    buf = KeyframeBuffer()
    harvest_keyframes([win_traj(), win_traj()], 2, buf)
    assert len(buf) == 0


def test_harvest_takes_last_k_of_failures():
    buf = KeyframeBuffer()
    harvest_keyframes([fail_traj(n=8)], 3, buf)
    assert len(buf) == 3
    taken = [(e[0][0], e[2]) for e in buf.entries()]
    assert taken == [(5.0, 5), (6.0, 6), (7.0, 7)]


def test_harvest_short_trajectory_takes_all():
    buf = KeyframeBuffer()
    harvest_keyframes([fail_traj(n=1)], 3, buf)
    assert len(buf) == 1
    with pytest.raises(ValueError):
        harvest_keyframes([], 0, buf)


def test_harvest_entries_are_copies():
    buf = KeyframeBuffer()
    traj = fail_traj(n=2)
    harvest_keyframes([traj], 1, buf)
    traj.steps[-1].obs[0] = 123.0
    assert buf.entries()[0][0][0] != 123.0


# -- start sampling ---------------------------------------------------------------


def reset_const(value):
    return lambda rng: np.full(2, value)


def test_sample_start_pkir_zero_always_initial():
    buf = KeyframeBuffer()
    buf.append(np.zeros(2), TaskSpec(0), 0)
    rng = derive_rng(1)
    for _ in range(50):
        _, kind = sample_start(buf, TaskSpec(0), 0.0, reset_const(9.0), rng)
        assert kind == "initial"


def test_sample_start_empty_buffer_falls_back():
    buf = KeyframeBuffer()
    state, kind = sample_start(buf, TaskSpec(0), 1.0, reset_const(9.0), derive_rng(2))
    assert kind == "initial" and state[0] == 9.0


def test_sample_start_task_mismatch_falls_back():
    buf = KeyframeBuffer()
    buf.append(np.zeros(2), TaskSpec(1), 0)
    _, kind = sample_start(buf, TaskSpec(0), 1.0, reset_const(9.0), derive_rng(3))
    assert kind == "initial"


def test_sample_start_frequency():
    buf = KeyframeBuffer()
    buf.append(np.ones(2), TaskSpec(0), 0)
    rng = derive_rng(4)
    kinds = [
        sample_start(buf, TaskSpec(0), 0.5, reset_const(0.0), rng)[1]
        for _ in range(10_000)
    ]
    frac = kinds.count("keyframe") / len(kinds)
    assert 0.48 <= frac <= 0.52


def test_sample_start_returns_copy():
    buf = KeyframeBuffer()
    buf.append(np.ones(2), TaskSpec(0), 0)
    state, kind = sample_start(buf, TaskSpec(0), 1.0, reset_const(0.0), derive_rng(5))
    assert kind == "keyframe"
    state[0] = 55.0
    assert buf.entries()[0][0][0] == 1.0


def test_sample_start_rejects_bad_pkir():
    with pytest.raises(ValueError):
        sample_start(KeyframeBuffer(), TaskSpec(0), 1.5, reset_const(0.0), derive_rng(6))


# -- imagined rollouts --------------------------------------------------------------


def oracle_setup(env, task_id=0, size=3, seed=7):
    start = env.reset_state(TaskSpec(task_id), derive_rng(seed))
    group = GroupSpec(TaskSpec(task_id), start, "initial", size)
    wm = OracleWorldModel(env, context=4)
    reward = lambda frame, task: int(env.is_success(frame))
    return group, wm, reward


def test_rollout_imagined_t_zero_empty():
    env = ReachPoint()
    policy, params = make_policy(env)
    group, wm, reward = oracle_setup(env)
    trajs = rollout_imagined(policy, params, wm, reward, group, 0, H, seed=8)
    assert len(trajs) == group.size
    assert all(len(t.steps) == 0 and not t.success for t in trajs)


def test_rollout_imagined_requires_chunk_multiple():
    env = ReachPoint()
    policy, params = make_policy(env)
    group, wm, reward = oracle_setup(env)
    with pytest.raises(ValueError):
        rollout_imagined(policy, params, wm, reward, group, T + 1, H, seed=8)


def test_rollout_imagined_reward_always_one():
    env = ReachPoint()
    policy, params = make_policy(env)
    group, wm, _ = oracle_setup(env)
    always = lambda frame, task: 1
    trajs = rollout_imagined(policy, params, wm, always, group, T, H, seed=9)
    for t in trajs:
        assert t.success and t.valid_len == 1 and len(t.steps) == 1
        assert t.steps[0].reward == 1 and t.steps[0].done


def test_rollout_imagined_group_homogeneity():
    env = ReachPoint()
    policy, params = make_policy(env)
    group, wm, reward = oracle_setup(env, size=4)
    trajs = rollout_imagined(policy, params, wm, reward, group, T, H, seed=10)
    assert len(trajs) == 4
    for t in trajs:
        assert t.task.task_id == group.task.task_id
        assert t.start_kind == "initial"
        assert np.array_equal(t.steps[0].obs, group.start_state)
    # members draw independent streams: their first chunks differ
    assert not np.array_equal(trajs[0].steps[0].chunk, trajs[1].steps[0].chunk)


def test_rollout_imagined_logp_matches_policy_density():
    env = ReachPoint()
    policy, params = make_policy(env)
    group, wm, reward = oracle_setup(env)
    trajs = rollout_imagined(policy, params, wm, reward, group, T, H, seed=11)
    for t in trajs:
        for rec in t.steps:
            ref = policy.logprob(params, rec.obs, t.task, rec.chunk)
            assert rec.logp_old == pytest.approx(ref, rel=1e-12)


def test_rollout_imagined_mid_chunk_success_truncates():
    env = ReachPoint()
    policy, params = make_policy(env)
    group, wm, _ = oracle_setup(env)
    calls = []

    def fires_on_sixth(frame, task):
        calls.append(0)
        return 1 if len(calls) == 6 else 0

    trajs_one = rollout_imagined(policy, params, wm, fires_on_sixth,
                                 GroupSpec(group.task, group.start_state, "initial", 1),
                                 T, H, seed=12)
    t = trajs_one[0]
    assert t.success and len(t.steps) == 2
    assert t.steps[0].reward == 0 and t.steps[1].reward == 1 and t.steps[1].done
    assert len(calls) == 6  # evaluation stopped at the success frame


def test_rollout_imagined_aborts_on_nonfinite(caplog):
    env = ReachPoint()
    policy, params = make_policy(env)
    task = TaskSpec(0)
    start = env.reset_state(task, derive_rng(13))

    class BrokenWm:
        context = 4
        anchor_mode = "first"

        def predict_chunk(self, ctx, chunk, rng):
            return np.full((H, env.state_dim), np.nan)

    group = GroupSpec(task, start, "initial", 2)
    with caplog.at_level("WARNING"):
        trajs = rollout_imagined(policy, params, BrokenWm(), lambda f, t: 0,
                                 group, T, H, seed=14)
    assert len(trajs) == 2
    assert all(len(t.steps) == 0 and not t.success for t in trajs)
    assert any("aborted" in r.message for r in caplog.records)


# -- real rollouts --------------------------------------------------------------------


def test_rollout_real_deterministic_and_tagged():
    env = PickPlace2D()
    policy, params = make_policy(env)
    a = rollout_real(policy, params, env, TaskSpec(2), 5, T, H, seed=15)
    b = rollout_real(policy, params, env, TaskSpec(2), 5, T, H, seed=15)
    assert len(a) == 5
    assert a == b
    assert all(t.task.task_id == 2 for t in a)
    c = rollout_real(policy, params, env, TaskSpec(2), 5, T, H, seed=16)
    assert a != c


class ExpertPolicy:
    """Test double: unrolls the scripted controller one chunk ahead."""

    def __init__(self, env, horizon):
        self.env = env
        self.horizon = horizon

    def sample(self, params, obs, task, rng):
        state = np.asarray(obs, dtype=np.float64)
        chunk = []
        for _ in range(self.horizon):
            action = self.env.expert_action(state)
            state, _, _ = self.env.step(state, action)
            chunk.append(action)
        return np.array(chunk), 0.0


def test_rollout_real_expert_succeeds():
    env = PickPlace2D()
    expert = ExpertPolicy(env, H)
    for task_id in range(4):
        trajs = rollout_real(expert, {}, env, TaskSpec(task_id), 2, 64, H, seed=17)
        assert all(t.success for t in trajs)


def test_rollout_real_record_frames_consistent():
    env = PickPlace2D()
    expert = ExpertPolicy(env, H)
    trajs, eps = rollout_real(expert, {}, env, TaskSpec(0), 3, 64, H, seed=18,
                              record_frames=True)
    for traj, ep in zip(trajs, eps):
        assert ep.states.shape[0] == ep.actions.shape[0] + 1
        assert np.array_equal(ep.states[0], traj.steps[0].obs)
        # replaying the recorded actions through the env reproduces the states
        state = ep.states[0]
        for k, action in enumerate(ep.actions):
            state, _, _ = env.step(state, action)
            assert np.array_equal(state, ep.states[k + 1])
        assert env.is_success(ep.states[-1]) == traj.success


def test_rollout_real_counts_env_steps():
    env = CountingEnv(ReachPoint())
    policy, params = make_policy(ReachPoint(), init_log_std=-2.0)
    trajs = rollout_real(policy, params, env, TaskSpec(0), 2, T, H, seed=19)
    executed = sum(len(t.steps) for t in trajs) * H
    assert env.steps == executed
    assert env.resets == 2


# -- oracle substitution ----------------------------------------------------------------


def test_oracle_substitution_bit_identical():
    env = PickPlace2D()
    policy, params = make_policy(env, init_log_std=-0.5)
    wm = OracleWorldModel(env, context=4)
    reward = lambda frame, task: int(env.is_success(frame))
    for seed in range(10):
        task = TaskSpec(seed % 4)
        start = env.reset_state(task, derive_rng(seed, 0, 0))
        group = GroupSpec(task, start, "initial", 1)
        imagined = rollout_imagined(policy, params, wm, reward, group, 64, H,
                                    seed=seed)
        real = rollout_real(policy, params, env, task, 1, 64, H, seed=seed)
        assert imagined[0] == real[0]


# -- persistence -----------------------------------------------------------------------


def test_batch_roundtrip_with_manifest(tmp_path):
    trajs = [fail_traj(n=2), win_traj(n=3)]
    manifest = {"policy": "abc123", "wm": "def456", "p_kir": 0.5, "seed": 7}
    path = tmp_path / "batch.traj"
    write_batch(path, trajs, manifest)
    loaded, loaded_manifest = read_batch(path)
    assert loaded == trajs
    assert loaded_manifest == manifest
