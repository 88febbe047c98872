import numpy as np
import pytest

from advoffline import attacks as at
from advoffline import diffcore as dc
from advoffline import envsuite as es

from oracles import mlp_forward


def nets(seed=0, n=4, m=2, hidden=(16, 16)):
    rng = np.random.default_rng(seed)
    actor = dc.MlpNet([n, *hidden, m], "tanh", rng=rng)
    critic = dc.MlpNet([n + m, *hidden, 1], "none", rng=rng)
    return actor, critic


def linf(a, b):
    return np.max(np.abs(np.asarray(a) - np.asarray(b)))


def quadratic(A, b):
    def objective(x):
        quad = dc.sum(dc.mul(dc.matmul(x, A), x), axis=1)
        return dc.add(dc.mul(quad, 0.5), dc.sum(dc.mul(x, b), axis=1))

    def value(x):
        x = np.atleast_2d(x)
        return 0.5 * np.einsum("bi,ij,bj->b", x, A, x) + x @ b
    return objective, value


def test_budget_validation():
    with pytest.raises(ValueError):
        at.PerturbationBudget(epsilon=-0.1)
    with pytest.raises(ValueError):
        at.PerturbationBudget(step_size=0)
    with pytest.raises(ValueError):
        at.PerturbationBudget(num_steps=0)
    with pytest.raises(ValueError):
        at.PerturbationBudget(norm="l2")
    with pytest.raises(ValueError):
        at.AttackSpec("fgsm")


@pytest.mark.parametrize("kind", ["random", "critic", "robust_critic", "actor"])
def test_every_attack_stays_in_ball(kind):
    actor, critic = nets(1)
    rng = np.random.default_rng(2)
    for eps in (0.0, 1e-9, 0.05, 0.3, 2.0):
        budget = at.PerturbationBudget(epsilon=eps, step_size=0.01 + eps, num_steps=3)
        s = rng.normal(size=(64, 4)) * 3
        adv = at.perturb(kind, s, budget, actor, critic, critic, rng)
        assert adv.shape == s.shape
        assert linf(adv, s) <= eps + 1e-12


def test_zero_budget_is_identity():
    actor, critic = nets(3)
    s = np.random.default_rng(0).normal(size=(8, 4))
    budget = at.PerturbationBudget(epsilon=0.0)
    for kind in at.ATTACK_KINDS:
        np.testing.assert_array_equal(at.perturb(kind, s, budget, actor, critic, critic,
                                                 np.random.default_rng(0)), s)


def test_pgd_matches_grid_oracle_on_quadratics():
    rng = np.random.default_rng(4)
    budget = at.PerturbationBudget(epsilon=0.05)
    g = np.linspace(-0.05, 0.05, 41)
    for _ in range(10):
        M = rng.normal(size=(2, 2)) * 5
        A, b = (M + M.T) / 2, rng.normal(size=2)
        s = rng.normal(size=2)
        objective, value = quadratic(A, b)
        grid = np.stack(np.meshgrid(s[0] + g, s[1] + g, indexing="ij"), -1).reshape(-1, 2)
        vals = value(grid).reshape(41, 41)
        resolution = max(np.abs(np.diff(vals, axis=0)).max(), np.abs(np.diff(vals, axis=1)).max())
        best = at.pgd_optimize(objective, s, budget, "maximize")
        assert linf(best, s) <= 0.05 + 1e-12
        assert value(best)[0] >= vals.max() - resolution


def test_pgd_never_worse_than_clean_point():
    rng = np.random.default_rng(5)
    budget = at.PerturbationBudget(epsilon=0.05)
    for sense in ("maximize", "minimize"):
        for _ in range(20):
            M = rng.normal(size=(2, 2)) * 50
            objective, value = quadratic((M + M.T) / 2, rng.normal(size=2))
            s = rng.normal(size=(5, 2))
            best = at.pgd_optimize(objective, s, budget, sense)
            sign = 1 if sense == "maximize" else -1
            assert np.all(sign * value(best) >= sign * value(s))


def test_pgd_linear_objective_reaches_corner():
    w = np.array([1.0, -2.0, 0.5])
    s = np.zeros((1, 3))
    best = at.pgd_optimize(lambda x: dc.sum(dc.mul(x, w), axis=1), s,
                           at.PerturbationBudget(epsilon=0.05), "maximize")
    np.testing.assert_allclose(best[0], 0.05 * np.sign(w), atol=1e-15)


def test_pgd_rejects_bad_sense():
    with pytest.raises(ValueError):
        at.pgd_optimize(lambda x: dc.sum(x, axis=1), np.zeros(2), at.PerturbationBudget(), "up")


def test_random_attack_is_projected_gaussian():
    budget = at.PerturbationBudget(epsilon=0.05)
    s = np.zeros((20000, 4))
    d = at.attack_random(s, budget, np.random.default_rng(6)) - s
    on_boundary = np.mean(np.isclose(np.abs(d), 0.05))
    # P(|N(0, 1)| > 1) = 0.3173
    assert abs(on_boundary - 0.3173) < 0.01
    inner = d[np.abs(d) < 0.05 - 1e-12]
    assert abs(inner.mean()) < 1e-3


def test_critic_attack_lowers_q_of_induced_action():
    actor, critic = nets(7)
    s = np.random.default_rng(8).normal(size=(128, 4))
    budget = at.PerturbationBudget(epsilon=0.1)
    adv = at.attack_critic(s, actor, critic, budget)

    def q_induced(x):
        return critic.predict(np.concatenate([s, actor.predict(x)], 1))[:, 0]

    assert np.all(q_induced(adv) <= q_induced(s))
    assert np.mean(q_induced(adv)) < np.mean(q_induced(s))


def test_actor_attack_beats_random_perturbations():
    actor, _ = nets(9)
    rng = np.random.default_rng(10)
    s = rng.normal(size=(64, 4))
    budget = at.PerturbationBudget(epsilon=0.05)
    clean = actor.predict(s)
    dev = ((actor.predict(at.attack_actor(s, actor, budget)) - clean) ** 2).sum(1)
    rand = ((actor.predict(at.attack_random(s, budget, rng)) - clean) ** 2).sum(1)
    assert np.all(dev > 0)
    assert dev.mean() > 2 * rand.mean()


def test_actor_attack_at_least_best_corner_of_linearization():
    # the search starts from the corner maximizing the linearized deviation
    actor, _ = nets(11, n=3, m=2)
    s = np.random.default_rng(12).normal(size=(1, 3))
    budget = at.PerturbationBudget(epsilon=0.02)
    adv = at.attack_actor(s, actor, budget)
    clean = mlp_forward([p.value for p in actor.params], s, "tanh")
    corners = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], float)
    devs = [((mlp_forward([p.value for p in actor.params], s + 0.02 * c, "tanh") - clean) ** 2).sum()
            for c in corners]
    got = ((actor.predict(adv) - clean) ** 2).sum()
    assert got >= 0.9 * max(devs)


def test_attacks_require_their_networks():
    actor, _ = nets(0)
    s = np.zeros((2, 4))
    with pytest.raises(ValueError):
        at.attack_critic(s, actor, None, at.PerturbationBudget())
    with pytest.raises(ValueError):
        at.attack_robust_critic(s, actor, None, at.PerturbationBudget())
    with pytest.raises(ValueError):
        at.ObservationAttack(at.AttackSpec("robust_critic"), actor, np.zeros(4), np.ones(4))


def test_single_state_input_keeps_shape():
    actor, critic = nets(13)
    s = np.random.default_rng(0).normal(size=4)
    for kind in ("critic", "actor", "random"):
        out = at.perturb(kind, s, at.PerturbationBudget(), actor, critic, None, np.random.default_rng(0))
        assert out.shape == (4,)


def test_observation_attack_budget_is_in_normalized_units():
    actor, critic = nets(14)
    mean, std = np.array([1.0, -2.0, 0.0, 3.0]), np.array([0.1, 10.0, 1.0, 0.5])
    filt = at.ObservationAttack(at.AttackSpec("actor"), actor, mean, std, critic=critic)
    s = np.array([1.2, 5.0, -0.3, 2.0])
    o = filt(s)
    assert np.max(np.abs((o - s) / std)) <= 0.05 + 1e-12
    assert np.max(np.abs(o - s) / std) > 0.04


def test_examination_buffer_holds_exactly_the_budget():
    spec = es.pointmass()
    pd = es.expert_controller(spec)
    buf = at.collect_examination(spec, pd, np.zeros(4), np.ones(4), capacity=250, seed=0)
    assert len(buf) == 250
    assert np.flatnonzero(buf.data.dones).tolist() == [99, 199, 249]
    with pytest.raises(ValueError):
        at.ExaminationBuffer(buf.data, capacity=100)


def test_action_smoothness_search_stays_in_action_ball():
    _, critic = nets(15)
    rng = np.random.default_rng(16)
    s, a = rng.normal(size=(32, 4)), rng.uniform(-1, 1, (32, 2))
    budget = at.PerturbationBudget(epsilon=0.05)
    a_hat = at.action_smoothness(critic, s, a, budget)
    assert linf(a_hat, a) <= 0.05 + 1e-12
    q0 = critic.predict(np.concatenate([s, a], 1))
    q1 = critic.predict(np.concatenate([s, a_hat], 1))
    assert np.all((q1 - q0) ** 2 > 0)


def test_robust_q_training_fits_victim_values():
    spec = es.pointmass()
    actor, _ = nets(17, hidden=(16,))
    pd = es.expert_controller(spec)
    data = es.generate_dataset(spec, "expert", 1000, seed=0)
    buf = at.collect_examination(spec, pd, data.state_mean, data.state_std, capacity=1000, seed=1)
    res = at.train_robust_q(actor, buf, steps=150, batch_size=64, hidden=(16, 16), seed=0)
    assert res.final_loss < res.initial_loss
    assert len(res.losses) == 150
    assert np.isfinite(res.smoothness)
    with pytest.raises(ValueError):
        at.train_robust_q(actor, buf, steps=1, batch_size=5000)
