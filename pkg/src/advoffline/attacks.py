"""Observation-space attacks on an offline actor-critic agent.

All attacks work on normalized states and keep every perturbed state inside
the l-infinity ball of radius ``epsilon`` around the clean state. Critic-
style attacks use sign-gradient PGD with the clean point kept as a candidate,
so the attacker is never worse off than doing nothing.
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .envsuite import Dataset, EnvSpec, rollout

ATTACK_KINDS = ("none", "random", "critic", "robust_critic", "actor")
EXAMINATION_BUDGET = 10_000

warnings = Counter()


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float = 0.05
    step_size: float = 0.01
    num_steps: int = 5
    norm: str = "linf"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.norm != "linf":
            raise ValueError("only the l-infinity ball is supported")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; choose from {ATTACK_KINDS}")


def project(x, center, epsilon):
    return np.clip(x, center - epsilon, center + epsilon)


def pgd_optimize(objective: Callable[[dc.Tensor], dc.Tensor], s, budget: PerturbationBudget,
                 sense: str = "maximize", start=None) -> np.ndarray:
    """Sign-gradient PGD inside B(s, epsilon).

    ``objective`` maps a batch of states (Tensor, shape (B, n)) to per-row
    values of shape (B,). A single state of shape (n,) is accepted too. Among
    the clean point, ``start`` and every iterate, the best point per row under
    ``sense`` is returned.
    """
    if sense not in ("maximize", "minimize"):
        raise ValueError("sense must be 'maximize' or 'minimize'")
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s2 = s[None] if single else s
    sign = 1.0 if sense == "maximize" else -1.0
    eps = budget.epsilon

    def value_and_grad(x):
        xt = dc.Tensor(x, requires_grad=True)
        val = objective(xt)
        (g,) = dc.grad(dc.sum(val), [xt])
        return val.value.reshape(len(x)), g

    clean_val, g = value_and_grad(s2)
    best, best_val = s2.copy(), sign * clean_val
    x = s2.copy()

    def consider(x, val):
        better = sign * val > best_val
        best[better] = x[better]
        best_val[better] = sign * val[better]

    if start is not None:
        x = project(np.asarray(start, dtype=np.float64).reshape(s2.shape), s2, eps)
        val, g = value_and_grad(x)
        consider(x, val)
    for _ in range(budget.num_steps):
        if not np.all(np.isfinite(g)):
            warnings["nonfinite_gradient"] += 1
            break
        x = project(x + sign * budget.step_size * np.sign(g), s2, eps)
        val, g = value_and_grad(x)
        consider(x, val)
    return best[0] if single else best


def _corner_start(jac: np.ndarray, s2: np.ndarray, eps: float) -> np.ndarray:
    """Ball corner maximizing ||J d||^2 over sign vectors d, per row.

    Squared-difference objectives are flat at the clean point, so their
    gradient cannot seed PGD; the linearized objective can.
    """
    n = s2.shape[1]
    if n <= 12:
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=n)))  # (2^n, n)
        scores = np.einsum("bmn,kn->bkm", jac, signs)
        best = np.argmax((scores ** 2).sum(axis=2), axis=1)
        d = signs[best]
    else:
        _, _, vt = np.linalg.svd(jac)
        d = np.sign(vt[:, 0, :])
        d[d == 0] = 1.0
    return s2 + eps * d


def input_jacobian(net: dc.MlpNet, x2: np.ndarray) -> np.ndarray:
    """Per-row Jacobian of net outputs w.r.t. inputs, shape (B, out, in)."""
    rows = []
    for j in range(net.output_dim):
        xt = dc.Tensor(x2, requires_grad=True)
        out = net(xt)
        (g,) = dc.grad(dc.sum(dc.mul(out, _unit(net.output_dim, j))), [xt])
        rows.append(g)
    return np.stack(rows, axis=1)


def _unit(m, j):
    e = np.zeros(m)
    e[j] = 1.0
    return e


# ---------------------------------------------------------------- attacks

def random_noise(shape, budget: PerturbationBudget, rng: np.random.Generator) -> np.ndarray:
    """Unprojected Normal(0, epsilon) noise."""
    return rng.normal(0.0, 1.0, shape) * budget.epsilon


def attack_random(s, budget: PerturbationBudget, rng: np.random.Generator) -> np.ndarray:
    """s + Normal(0, epsilon) noise, projected back onto B(s, epsilon)."""
    s = np.asarray(s, dtype=np.float64)
    return project(s + random_noise(s.shape, budget, rng), s, budget.epsilon)


def _q_of_policy(q_net: dc.MlpNet, actor: dc.MlpNet, s2: np.ndarray):
    def objective(x):
        a = actor(x)
        return dc.sum(q_net(dc.concat([dc.Tensor(s2), a])), axis=1)
    return objective


def attack_critic(s, actor: dc.MlpNet, critic: dc.MlpNet | None, budget: PerturbationBudget) -> np.ndarray:
    """argmin over B(s, eps) of Q(s, pi(s~))."""
    if critic is None:
        raise ValueError("critic attack requires a critic network")
    s = np.asarray(s, dtype=np.float64)
    s2 = s[None] if s.ndim == 1 else s
    with dc.frozen(actor, critic):
        out = pgd_optimize(_q_of_policy(critic, actor, s2), s2, budget, "minimize")
    return out[0] if s.ndim == 1 else out


def attack_robust_critic(s, actor: dc.MlpNet, robust_q: dc.MlpNet | None,
                         budget: PerturbationBudget) -> np.ndarray:
    if robust_q is None:
        raise ValueError("robust critic attack requires a robust Q network; run train_robust_q first")
    return attack_critic(s, actor, robust_q, budget)


def actor_deviation(actor: dc.MlpNet, clean_actions: np.ndarray):
    def objective(x):
        return dc.sum(dc.square(dc.sub(actor(x), clean_actions)), axis=1)
    return objective


def attack_actor(s, actor: dc.MlpNet, budget: PerturbationBudget) -> np.ndarray:
    """argmax over B(s, eps) of ||pi(s) - pi(s~)||^2."""
    s = np.asarray(s, dtype=np.float64)
    s2 = s[None] if s.ndim == 1 else s
    if budget.epsilon == 0:
        return s.copy()
    with dc.frozen(actor):
        start = _corner_start(input_jacobian(actor, s2), s2, budget.epsilon)
        out = pgd_optimize(actor_deviation(actor, actor.predict(s2)), s2, budget, "maximize",
                           start=start)
    return out[0] if s.ndim == 1 else out


def perturb(kind: str, s, budget: PerturbationBudget, actor=None, critic=None, robust_q=None,
            rng=None) -> np.ndarray:
    """Dispatch to one attack by name; ``s`` is in normalized-state space."""
    if kind == "none":
        return np.array(s, dtype=np.float64)
    if kind == "random":
        return attack_random(s, budget, rng if rng is not None else np.random.default_rng(0))
    if kind == "critic":
        return attack_critic(s, actor, critic, budget)
    if kind == "robust_critic":
        return attack_robust_critic(s, actor, robust_q, budget)
    if kind == "actor":
        return attack_actor(s, actor, budget)
    raise ValueError(f"unknown attack {kind!r}")


class ObservationAttack:
    """Observation filter for ``rollout``: raw state in, attacked raw observation out."""

    def __init__(self, spec: AttackSpec, actor, state_mean, state_std, critic=None,
                 robust_q=None, seed=0):
        if spec.kind == "critic" and critic is None:
            raise ValueError("critic attack requires the agent's critic")
        if spec.kind == "robust_critic" and robust_q is None:
            raise ValueError("robust_critic attack requires a robust Q checkpoint; "
                             "run prepare-robust-q (train_robust_q) first")
        self.spec = spec
        self.actor, self.critic, self.robust_q = actor, critic, robust_q
        self.mean, self.std = np.asarray(state_mean), np.asarray(state_std)
        self.rng = np.random.default_rng(seed)

    def __call__(self, s):
        if self.spec.kind == "none":
            return np.asarray(s, dtype=np.float64)
        s_n = (np.asarray(s) - self.mean) / self.std
        adv = perturb(self.spec.kind, s_n, self.spec.budget, self.actor, self.critic,
                      self.robust_q, self.rng)
        return adv * self.std + self.mean


# ---------------------------------------------------------------- robust Q

@dataclass
class ExaminationBuffer:
    """Clean-observation transitions of the victim in the test environment."""

    data: Dataset
    capacity: int = EXAMINATION_BUDGET

    def __post_init__(self):
        if len(self.data) > self.capacity:
            raise ValueError(f"examination buffer holds {len(self.data)} > {self.capacity} transitions")

    def __len__(self):
        return len(self.data)


def collect_examination(env: EnvSpec, policy: Callable, state_mean, state_std,
                        capacity: int = EXAMINATION_BUDGET, seed: int = 0) -> ExaminationBuffer:
    """Roll the victim out on clean observations until exactly ``capacity`` transitions."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    cols = {k: [] for k in "s a r n d".split()}
    total, ep = 0, 0
    while total < capacity:
        _, traj = rollout(env, policy, seed * 100_003 + ep)
        take = min(env.horizon, capacity - total)
        d = np.zeros(take, dtype=bool)
        d[-1] = True
        for k, v in zip("s a r n".split(), (traj.states, traj.actions, traj.rewards, traj.next_states)):
            cols[k].append(v[:take])
        cols["d"].append(d)
        total += take
        ep += 1
    data = Dataset(env=env, tier="examination",
                   states=np.concatenate(cols["s"]), actions=np.concatenate(cols["a"]),
                   rewards=np.concatenate(cols["r"]), next_states=np.concatenate(cols["n"]),
                   dones=np.concatenate(cols["d"]), seed=seed,
                   state_mean=np.asarray(state_mean), state_std=np.asarray(state_std))
    return ExaminationBuffer(data, capacity)


def action_smoothness(q: dc.MlpNet, s_n: np.ndarray, a: np.ndarray, budget: PerturbationBudget):
    """Worst action in B(a, eps) for (Q(s, a~) - Q(s, a))^2, found by PGD over actions."""
    q_clean = q.predict(np.concatenate([s_n, a], axis=1))[:, 0]

    def objective(at):
        qa = q(dc.concat([dc.Tensor(s_n), at]))
        return dc.sum(dc.square(dc.sub(qa, q_clean[:, None])), axis=1)

    if budget.epsilon == 0:
        return a.copy()
    with dc.frozen(q):
        return _action_pgd(q, objective, s_n, a, budget)


def _action_pgd(q, objective, s_n, a, budget):
    # flat at a~ = a: seed from the sign of dQ/da
    xt = dc.Tensor(a, requires_grad=True)
    (g,) = dc.grad(dc.sum(q(dc.concat([dc.Tensor(s_n), xt]))), [xt])
    start = a + budget.epsilon * np.where(g >= 0, 1.0, -1.0)
    return pgd_optimize(objective, a, budget, "maximize", start=start)


@dataclass
class RobustQResult:
    q: dc.MlpNet
    losses: list
    smoothness: float
    initial_loss: float
    final_loss: float


def robust_q_loss(q: dc.MlpNet, target_q: dc.MlpNet, batch: dict, lam: float, gamma: float,
                  budget: PerturbationBudget):
    """TD error of the victim's Q plus lam * worst-case action smoothness penalty."""
    s, a, r, sn, an = batch["s"], batch["a"], batch["r"], batch["sn"], batch["an"]
    y = r + gamma * target_q.predict(np.concatenate([sn, an], axis=1))[:, 0]
    q_sa = q(dc.concat([dc.Tensor(s), dc.Tensor(a)]))
    td = dc.mean(dc.square(dc.sub(q_sa, y[:, None])))
    if lam == 0:
        return td, td, None
    a_hat = action_smoothness(q, s, a, budget)
    q_hat = q(dc.concat([dc.Tensor(s), dc.Tensor(a_hat)]))
    smooth = dc.mean(dc.square(dc.sub(q_hat, q_sa)))
    return dc.add(td, dc.mul(smooth, lam)), td, smooth


def train_robust_q(actor: dc.MlpNet, buffer: ExaminationBuffer, lam: float = 1.0,
                   gamma: float = 0.99, steps: int = 20_000, batch_size: int = 256,
                   lr: float = 3e-4, tau: float = 0.005, hidden=(64, 64),
                   budget: PerturbationBudget | None = None, seed: int = 0) -> RobustQResult:
    """Fit the attacker's own Q function of the victim policy on the examination buffer."""
    budget = budget or PerturbationBudget()
    data = buffer.data
    if len(data) < batch_size:
        raise ValueError(f"examination buffer ({len(data)}) smaller than one batch ({batch_size})")
    rng = np.random.default_rng(seed)
    n, m = data.env.state_dim, data.env.action_dim
    q = dc.MlpNet([n + m, *hidden, 1], "none", rng=rng)
    target = q.copy()
    opt = dc.MomentOptimizer.for_net(q, lr=lr)
    s_all = data.normalize(data.states)
    sn_all = data.normalize(data.next_states)
    an_all = actor.predict(sn_all)

    def batch_at(idx):
        return {"s": s_all[idx], "a": data.actions[idx], "r": data.rewards[idx],
                "sn": sn_all[idx], "an": an_all[idx]}

    probe = batch_at(rng.integers(0, len(data), size=min(len(data), 1024)))
    initial = float(robust_q_loss(q, target, probe, 0.0, gamma, budget)[1].value)
    losses = []
    for _ in range(steps):
        b = batch_at(rng.integers(0, len(data), size=batch_size))
        total, td, smooth = robust_q_loss(q, target, b, lam, gamma, budget)
        grads = dc.grad(total, q.params)
        opt.step(q.params, grads)
        dc.soft_update(target, q, tau)
        losses.append(float(total.value))
    final = float(robust_q_loss(q, target, probe, 0.0, gamma, budget)[1].value)
    return RobustQResult(q=q, losses=losses, smoothness=measure_action_smoothness(q, probe, budget),
                         initial_loss=initial, final_loss=final)


def measure_action_smoothness(q: dc.MlpNet, batch: dict, budget: PerturbationBudget) -> float:
    s, a = batch["s"], batch["a"]
    a_hat = action_smoothness(q, s, a, budget)
    q0 = q.predict(np.concatenate([s, a], axis=1))
    q1 = q.predict(np.concatenate([s, a_hat], axis=1))
    return float(np.mean((q1 - q0) ** 2))
