import json

import numpy as np
import pytest

from advoffline import envsuite as es

from oracles import pointmass_euler


def test_pointmass_rest_at_target_is_a_fixed_point():
    spec = es.pointmass()
    nxt, r = es.env_step(spec, np.zeros(4), np.zeros(2))
    np.testing.assert_array_equal(nxt, np.zeros(4))
    assert r == 0.0


def test_pointmass_euler_step_advances_position():
    spec = es.pointmass()
    nxt, _ = es.env_step(spec, np.array([0.0, 0.0, 1.0, 0.0]), np.zeros(2))
    np.testing.assert_allclose(nxt[:2], [0.05, 0.0], rtol=0, atol=1e-15)
    np.testing.assert_allclose(nxt[2:], [1.0, 0.0], rtol=0, atol=1e-15)


def test_pointmass_step_matches_euler_oracle():
    spec = es.pointmass()
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.normal(size=4)
        a = rng.uniform(-1, 1, 2)
        nxt, r = es.env_step(spec, s, a)
        pos, vel = pointmass_euler(s[:2], s[2:], spec.force_limit * a, spec.dt, spec.mass)
        np.testing.assert_allclose(nxt, np.r_[pos, vel], rtol=0, atol=1e-14)
        assert r == pytest.approx(-(s[:2] @ s[:2]) - 0.01 * (a @ a), abs=1e-14)


def test_pendulum_upright_equilibrium():
    spec = es.pendulum()
    nxt, r = es.env_step(spec, np.array([1.0, 0.0, 0.0]), np.zeros(1))
    np.testing.assert_allclose(nxt, [1.0, 0.0, 0.0], atol=1e-15)
    assert r == 0.0
    # every other state/action pair earns strictly less
    rng = np.random.default_rng(1)
    for _ in range(20):
        th, thd = rng.uniform(-np.pi, np.pi), rng.normal()
        _, r2 = es.env_step(spec, np.array([np.cos(th), np.sin(th), thd]), rng.uniform(-1, 1, 1))
        assert r2 < 0.0


def test_constant_zero_policy_return_closed_form():
    # a fixed start at rest off-target stays put: return = horizon * per-step reward
    spec = es.pointmass(init_low=(0.3, -0.4, 0.0, 0.0), init_high=(0.3, -0.4, 0.0, 0.0))
    ret, traj = es.rollout(spec, lambda s: np.zeros(2), seed=0)
    assert ret == pytest.approx(spec.horizon * -(0.3 ** 2 + 0.4 ** 2), rel=1e-12)
    assert len(traj.rewards) == spec.horizon


def test_env_step_validation():
    spec = es.pointmass()
    with pytest.raises(ValueError):
        es.env_step(spec, np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        es.env_step(spec, np.array([np.nan, 0, 0, 0]), np.zeros(2))
    with pytest.raises(ValueError):
        es.make_env("cartpole")


def test_actions_are_clipped_to_unit_box():
    spec = es.pointmass()
    big, _ = es.env_step(spec, np.zeros(4), np.array([5.0, -5.0]))
    unit, _ = es.env_step(spec, np.zeros(4), np.array([1.0, -1.0]))
    np.testing.assert_array_equal(big, unit)


@pytest.mark.parametrize("name", ["pointmass", "pendulum"])
def test_expert_beats_random(name):
    spec = es.make_env(name)
    rand, expert = es.reference_scores(spec, seed=0, n=20)
    assert expert > rand


def test_observation_filter_changes_only_what_policy_sees():
    spec = es.pointmass()
    seen = []

    def policy(o):
        seen.append(o.copy())
        return np.zeros(2)

    _, clean = es.rollout(spec, policy, seed=3)
    seen.clear()
    _, shifted = es.rollout(spec, policy, seed=3, observation_filter=lambda s: s + 1.0)
    # zero policy: true trajectory is unaffected by what it observes
    np.testing.assert_array_equal(clean.states, shifted.states)
    np.testing.assert_array_equal(np.array(seen), shifted.states + 1.0)


def test_dataset_size_one_writes_one_row(tmp_path):
    ds = es.generate_dataset(es.pointmass(), "expert", 1, seed=0)
    ds.save(tmp_path)
    lines = (tmp_path / "data.csv").read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].split(",") == ["s0", "s1", "s2", "s3", "a0", "a1", "r",
                                   "sn0", "sn1", "sn2", "sn3", "done"]


def test_dataset_roundtrip_is_exact(tmp_path):
    ds = es.generate_dataset(es.pendulum(), "medium-expert", 450, seed=2)
    ds.save(tmp_path)
    back = es.Dataset.load(tmp_path)
    for name in ("states", "actions", "rewards", "next_states", "dones", "state_mean", "state_std"):
        assert getattr(back, name).tobytes() == getattr(ds, name).tobytes(), name
    assert back.env == ds.env
    assert list(back.tags) == list(ds.tags)
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["composition"] == {"expert": 225, "medium": 225}


def test_medium_expert_is_half_expert_then_medium():
    ds = es.generate_dataset(es.pointmass(), "medium-expert", 301, seed=0)
    assert list(ds.tags[:151]) == ["expert"] * 151
    assert list(ds.tags[151:]) == ["medium"] * 150


def test_generation_is_deterministic():
    a = es.generate_dataset(es.pointmass(), "medium-replay", 500, seed=4)
    b = es.generate_dataset(es.pointmass(), "medium-replay", 500, seed=4)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.actions.tobytes() == b.actions.tobytes()
    c = es.generate_dataset(es.pointmass(), "medium-replay", 500, seed=5)
    assert c.states.tobytes() != a.states.tobytes()


def test_normalization_statistics_and_std_floor():
    ds = es.generate_dataset(es.pointmass(), "expert", 300, seed=0)
    np.testing.assert_allclose(ds.state_mean, ds.states.mean(axis=0))
    np.testing.assert_allclose(ds.state_std, ds.states.std(axis=0))
    np.testing.assert_allclose(ds.denormalize(ds.normalize(ds.states)), ds.states, atol=1e-12)
    const = es.Dataset(env=es.pointmass(), tier="expert", states=np.ones((5, 4)),
                       actions=np.zeros((5, 2)), rewards=np.zeros(5), next_states=np.ones((5, 4)),
                       dones=np.zeros(5, dtype=bool))
    np.testing.assert_array_equal(const.state_std, np.full(4, es.STD_FLOOR))


def test_episode_boundaries_marked_done():
    spec = es.pointmass()
    ds = es.generate_dataset(spec, "expert", 250, seed=0)
    assert np.flatnonzero(ds.dones).tolist() == [99, 199, 249]
    np.testing.assert_array_equal(ds.states[1:100], ds.next_states[:99])


def test_tier_quality_ordering():
    spec = es.pointmass()
    means = {t: es.generate_dataset(spec, t, 2000, seed=0).episode_returns().mean()
             for t in ("expert", "medium", "random")}
    assert means["expert"] > means["medium"] > means["random"]


def test_bad_tier_and_size():
    with pytest.raises(ValueError):
        es.generate_dataset(es.pointmass(), "hard", 10, 0)
    with pytest.raises(ValueError):
        es.generate_dataset(es.pointmass(), "expert", 0, 0)
