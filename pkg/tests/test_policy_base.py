import math

import numpy as np
import pytest

from baseseq import nn
from baseseq.policy_base import (
    ACTION_REACH,
    GAMMA_COLLISION,
    REWARD_MAX,
    BasePosePolicy,
    ReplayBuffer,
    SacHyperparams,
    action_to_pose,
    init_actor,
    observation,
    predict_base_pose,
    reward_base,
    train_base_policy,
)
from baseseq.reach import DEFAULT_MODEL
from baseseq.world import ObjectState, Pose2, Scene, TableRect, inverse_transform, sample_scene, transform

TABLE = TableRect()


def _scene(obj_pose, start):
    return Scene(TABLE, (ObjectState(0, 0, obj_pose),), start, 0)


def test_reward_examples():
    obj = Pose2(0.0, 0.3, 0.0)
    assert reward_base(_scene(obj, Pose2(3, 0, 0)), Pose2(0.5, 0.0, 0)) == -2e5
    assert reward_base(_scene(obj, Pose2(3, 0, 0)), Pose2(0.0, 2.5, 0)) == 0.0
    # mount 0.625 m above the object (t_grasp = 15 s); start 2 m behind along the heading (t_nav = 4 s)
    action = Pose2(0.2, 1.125, 0.0)
    r = reward_base(_scene(obj, Pose2(-1.8, 1.125, 0.0)), action)
    assert r == pytest.approx(1e6 + 5e5 / 5 + 5e5 / 16, abs=1e-6)
    assert r == pytest.approx(1_131_250.0, abs=1e-6)
    with pytest.raises(ValueError):
        reward_base(sample_scene(0, 2), action)


def test_reward_bounded(rng):
    scene = sample_scene(4, 1, (0.8, 3.0))
    for _ in range(500):
        r = reward_base(scene, Pose2(*rng.uniform(-2, 2, 2), rng.uniform(-3, 3)))
        assert r == GAMMA_COLLISION or 0.0 <= r <= REWARD_MAX


def test_observation_features():
    o = observation(Pose2(1, 2, 0.7), Pose2(-0.3, 0.1, -2.0))
    assert o.shape == (8,)
    assert o[2] ** 2 + o[3] ** 2 == pytest.approx(1.0, abs=1e-12)
    assert o[6] ** 2 + o[7] ** 2 == pytest.approx(1.0, abs=1e-12)


def test_action_mapping_bounds(rng):
    obj = Pose2(0.4, -0.1, 1.1)
    for _ in range(200):
        raw = rng.uniform(-1, 1, 3)
        local = inverse_transform(action_to_pose(raw, obj, "object"), obj)
        assert abs(local.x) <= ACTION_REACH + 1e-12 and abs(local.y) <= ACTION_REACH + 1e-12
        t = action_to_pose(raw, obj, "table", TABLE)
        assert abs(t.x) <= ACTION_REACH + TABLE.half_length + 1e-12
    with pytest.raises(ValueError):
        action_to_pose(np.zeros(3), obj, "robot")


def test_predict_frame_equivariance():
    """Configurations with identical observations give identical object-relative poses."""
    store = nn.ParamStore(3)
    init_actor(store, (16, 16))
    robot, obj = Pose2(1.5, -1.2, 0.4), Pose2(0.3, 0.1, -0.8)
    a = predict_base_pose(store, robot, obj, "object")
    b = predict_base_pose(store, robot, obj, "object")
    assert a == b
    # a second object with the same features but a different class: same pose
    c = predict_base_pose(store, robot, ObjectState(4, 3, obj), "object")
    assert c == a
    rel = inverse_transform(a, obj)
    assert abs(rel.x) <= ACTION_REACH + 1e-12 and abs(rel.y) <= ACTION_REACH + 1e-12
    back = transform(rel, obj)
    assert back.x == pytest.approx(a.x, abs=1e-12) and back.y == pytest.approx(a.y, abs=1e-12)


def test_replay_buffer_wraps(rng):
    buf = ReplayBuffer(5)
    for i in range(8):
        buf.add(np.full(8, i), np.zeros(3), float(i), np.full(8, i), 1.0)
    assert buf.size == 5
    obs, act, rew, nxt, done = buf.sample(rng, 4)
    assert obs.shape == (4, 8) and set(rew.ravel()) <= {3.0, 4.0, 5.0, 6.0, 7.0}


def _tiny():
    return SacHyperparams(hidden=(8, 8), batch=32, warmup=64, total_steps=200, eval_every=100,
                          eval_episodes=20, replay_capacity=500)


def test_training_deterministic():
    a = train_base_policy(_tiny(), "object", seed=5)
    b = train_base_policy(_tiny(), "object", seed=5)
    assert a.log == b.log and len(a.log) == 2
    assert all(np.array_equal(a.actor[k].data, b.actor[k].data) for k in a.actor)
    c = train_base_policy(_tiny(), "table", seed=5)
    assert c.log != a.log


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        SacHyperparams(lr=0)
    with pytest.raises(ValueError):
        SacHyperparams(hidden=())
    with pytest.raises(ValueError):
        train_base_policy(_tiny(), "world", seed=0)


def test_estimator_round_trip(tmp_path):
    est = BasePosePolicy(hidden=(8, 8), total_steps=200, warmup=64, batch=32, eval_every=100,
                         eval_episodes=20, replay_capacity=500, seed=2)
    assert est.get_params()["frame_mode"] == "object"
    est.fit()
    X = np.stack([observation(Pose2(2, 1, 0.3), Pose2(0.1, 0.2, 0.0)),
                  observation(Pose2(-2, 1, 2.0), Pose2(-0.5, -0.2, 1.0))])
    out = est.predict(X)
    assert out.shape == (2, 3)
    pose = est.predict_pose(Pose2(2, 1, 0.3), Pose2(0.1, 0.2, 0.0))
    assert np.allclose(out[0], pose.as_array())
    path = tmp_path / "b.json"
    est.save(path)
    back = BasePosePolicy.load(path)
    assert np.array_equal(back.predict(X), out)
    assert 0.0 <= back.score(n_episodes=10) <= 1.0
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 5)))
    assert math.isfinite(est.log_[-1]["mean_reward"])
    assert DEFAULT_MODEL.r_max == 0.85
