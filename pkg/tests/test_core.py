import numpy as np
import pytest

from wovr.core import (
    FrameEpisode,
    InvariantViolation,
    MalformedHeader,
    StepRecord,
    TaskSpec,
    Trajectory,
    TruncatedPayload,
    append_store,
    compute_valid_len,
    decode_trajectory,
    derive_rng,
    encode_trajectory,
    one_hot,
    params_hash,
    read_frames,
    read_store,
    write_frames,
    write_store,
    RunConfig,
)


def make_step(rng, d=8, horizon=8, a_dim=3, reward=0, done=False):
    return StepRecord(
        obs=rng.normal(size=d),
        chunk=rng.normal(size=(horizon, a_dim)),
        reward=reward,
        logp_old=float(rng.normal()),
        done=done,
    )


def make_traj(seed=0, n=4, succeed_at=None):
    rng = np.random.default_rng(seed)
    steps = []
    for i in range(n):
        r = 1 if succeed_at is not None and i == succeed_at else 0
        steps.append(make_step(rng, reward=r, done=(i == n - 1)))
    return Trajectory.build(TaskSpec(1), "initial", steps)


def test_one_hot():
    assert np.array_equal(one_hot(2, 4), [0.0, 0.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        one_hot(4, 4)


def test_valid_len_failure_covers_all_steps():
    traj = make_traj(n=5)
    assert not traj.success
    assert traj.valid_len == 5


def test_valid_len_stops_at_first_success():
    traj = make_traj(n=6, succeed_at=2)
    assert traj.success
    assert traj.valid_len == 3


def test_compute_valid_len_rejects_missing_success():
    rng = np.random.default_rng(0)
    with pytest.raises(InvariantViolation):
        compute_valid_len([make_step(rng)], success=True)


def test_trajectory_rejects_mid_sequence_done():
    rng = np.random.default_rng(1)
    steps = [make_step(rng, done=True), make_step(rng)]
    with pytest.raises(InvariantViolation):
        Trajectory.build(TaskSpec(0), "initial", steps)


def test_trajectory_rejects_bad_valid_len():
    traj = make_traj(n=3)
    with pytest.raises(InvariantViolation):
        Trajectory(traj.task, traj.start_kind, traj.steps, traj.success, valid_len=2)


def test_step_record_rejects_nonbinary_reward():
    rng = np.random.default_rng(2)
    with pytest.raises(InvariantViolation):
        StepRecord(rng.normal(size=4), rng.normal(size=(2, 2)), reward=2, logp_old=0.0, done=False)


def test_roundtrip_is_exact():
    traj = make_traj(seed=3, n=7, succeed_at=4)
    decoded = decode_trajectory(encode_trajectory(traj))
    assert decoded == traj
    # bitwise, not just approximate
    assert decoded.steps[0].obs.tobytes() == traj.steps[0].obs.tobytes()


def test_roundtrip_keyframe_kind():
    traj = make_traj(seed=9, n=2)
    traj = Trajectory(traj.task, "keyframe", traj.steps, traj.success, traj.valid_len)
    assert decode_trajectory(encode_trajectory(traj)).start_kind == "keyframe"


def test_decode_rejects_truncation_and_flags_offset():
    blob = encode_trajectory(make_traj(seed=4, n=3))
    with pytest.raises(TruncatedPayload):
        decode_trajectory(blob[:-5])
    with pytest.raises(MalformedHeader):
        decode_trajectory(blob + b"\x00")
    with pytest.raises(MalformedHeader):
        decode_trajectory(blob[:3])


def test_decode_rejects_corrupt_reward_byte():
    traj = make_traj(seed=5, n=1)
    blob = bytearray(encode_trajectory(traj))
    # reward byte sits right after obs (8 floats) + chunk (8x3 floats) in the sole step
    header_size = len(blob) - (8 * 8 + 8 * 24 + 10)
    reward_off = header_size + 8 * 8 + 8 * 24
    assert blob[reward_off] == 0
    blob[reward_off] = 7
    with pytest.raises(InvariantViolation):
        decode_trajectory(bytes(blob))


def test_store_roundtrip(tmp_path):
    trajs = [make_traj(seed=i, n=3 + i, succeed_at=i if i % 2 else None) for i in range(1, 5)]
    path = tmp_path / "demos.wovr"
    write_store(path, trajs)
    assert read_store(path) == trajs
    append_store(path, trajs[0])
    assert read_store(path) == trajs + [trajs[0]]


def test_store_write_is_byte_deterministic(tmp_path):
    trajs = [make_traj(seed=i, n=4) for i in range(3)]
    a, b = tmp_path / "a.wovr", tmp_path / "b.wovr"
    write_store(a, trajs)
    write_store(b, trajs)
    assert a.read_bytes() == b.read_bytes()


def test_store_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.wovr"
    path.write_bytes(b"NOPE\x01")
    with pytest.raises(MalformedHeader):
        read_store(path)


def test_store_rejects_truncated_record(tmp_path):
    path = tmp_path / "trunc.wovr"
    write_store(path, [make_traj(seed=6, n=2)])
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(TruncatedPayload):
        read_store(path)


def test_frames_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    eps = [
        FrameEpisode(TaskSpec(t), rng.normal(size=(n + 1, 8)), rng.normal(size=(n, 3)))
        for t, n in [(0, 5), (3, 1)]
    ]
    path = tmp_path / "frames.wovf"
    write_frames(path, eps, "pickplace2d")
    loaded, env_name = read_frames(path)
    assert env_name == "pickplace2d"
    assert loaded == eps


def test_derive_rng_streams_are_stable_and_distinct():
    a1 = derive_rng(11, 0, 1).normal(size=4)
    a2 = derive_rng(11, 0, 1).normal(size=4)
    b = derive_rng(11, 0, 2).normal(size=4)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_params_hash_orders_keys_and_sees_values():
    p = {"w": np.arange(4.0), "b": np.zeros(2)}
    q = {"b": np.zeros(2), "w": np.arange(4.0)}
    assert params_hash(p) == params_hash(q)
    q["w"] = q["w"] + 1e-12
    assert params_hash(p) != params_hash(q)


def test_run_config_validation():
    RunConfig()
    with pytest.raises(ValueError):
        RunConfig(gamma=0.0)
    with pytest.raises(ValueError):
        RunConfig(gamma=1.2)
    with pytest.raises(ValueError):
        RunConfig(group_size=1)
    with pytest.raises(ValueError):
        RunConfig(max_episode_len=63)
    with pytest.raises(ValueError):
        RunConfig(kir_fraction=1.5)
