"""Analytic control environments, scripted behavior controllers and offline datasets.

Two deterministic tasks:

``pointmass``
    State ``(px, py, vx, vy)``, action a 2-d force in [-1, 1]^2 scaled by
    ``force_limit``. Explicit Euler with step ``dt``::

        pos' = pos + dt * vel
        vel' = vel + dt * (force_limit * a / mass - damping * vel
                           - stiffness * (pos - target))

    Reward ``-||pos - target||^2 - 0.01 ||a||^2`` evaluated at the pre-step
    state.

``pendulum``
    State ``(cos th, sin th, thdot)`` with ``th = 0`` upright. Semi-implicit
    Euler on ``thddot = (g / l) sin th + force_limit * a / (mass l^2)``.
    Reward ``-(wrap(th)^2 + 0.1 thdot^2 + 0.001 a^2)``.

Episodes always run exactly ``horizon`` steps.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

GENERATOR_VERSION = "1"
TIERS = ("expert", "medium", "medium-replay", "medium-expert", "random")
STD_FLOOR = 1e-6
REF_ROLLOUTS = 100


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    dt: float = 0.05
    mass: float = 1.0
    force_limit: float = 1.0
    target: tuple = ()
    damping: float = 0.0
    stiffness: float = 0.0
    gravity: float = 10.0
    length: float = 1.0
    max_speed: float = 8.0
    init_low: tuple = ()
    init_high: tuple = ()

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def pointmass(**overrides) -> EnvSpec:
    spec = EnvSpec(
        name="pointmass", state_dim=4, action_dim=2, horizon=100,
        dt=0.05, mass=1.0, force_limit=2.0, target=(0.0, 0.0),
        init_low=(-1.0, -1.0, -0.5, -0.5), init_high=(1.0, 1.0, 0.5, 0.5),
    )
    return replace(spec, **overrides)


def pendulum(**overrides) -> EnvSpec:
    spec = EnvSpec(
        name="pendulum", state_dim=3, action_dim=1, horizon=200,
        dt=0.05, mass=1.0, force_limit=2.0, target=(0.0,),
        gravity=10.0, length=1.0, max_speed=8.0,
        init_low=(-np.pi, -1.0), init_high=(np.pi, 1.0),
    )
    return replace(spec, **overrides)


ENVS = {"pointmass": pointmass, "pendulum": pendulum}


def make_env(name: str, **overrides) -> EnvSpec:
    try:
        return ENVS[name](**overrides)
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None


def wrap_angle(th):
    return (th + np.pi) % (2 * np.pi) - np.pi


def initial_state(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    x = rng.uniform(spec.init_low, spec.init_high)
    if spec.name == "pendulum":
        th, thdot = x
        return np.array([np.cos(th), np.sin(th), thdot])
    return x


def env_step(spec: EnvSpec, state, action) -> tuple[np.ndarray, float]:
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.shape != (spec.state_dim,) or action.shape != (spec.action_dim,):
        raise ValueError(f"expected state {spec.state_dim} / action {spec.action_dim}, "
                         f"got {state.shape} / {action.shape}")
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(action))):
        raise ValueError("non-finite state or action")
    a = np.clip(action, -1.0, 1.0)
    dt = spec.dt
    if spec.name == "pointmass":
        pos, vel = state[:2], state[2:]
        err = pos - np.asarray(spec.target)
        reward = -float(err @ err) - 0.01 * float(a @ a)
        acc = spec.force_limit * a / spec.mass - spec.damping * vel - spec.stiffness * err
        nxt = np.concatenate([pos + dt * vel, vel + dt * acc])
    elif spec.name == "pendulum":
        th = np.arctan2(state[1], state[0])
        thdot = state[2]
        err = wrap_angle(th - spec.target[0])
        reward = -float(err ** 2 + 0.1 * thdot ** 2 + 0.001 * a[0] ** 2)
        thddot = (spec.gravity / spec.length * np.sin(th)
                  + spec.force_limit * a[0] / (spec.mass * spec.length ** 2))
        thdot = np.clip(thdot + dt * thddot, -spec.max_speed, spec.max_speed)
        th = th + dt * thdot
        nxt = np.array([np.cos(th), np.sin(th), thdot])
    else:
        raise ValueError(f"unknown env {spec.name!r}")
    return nxt, reward


# ------------------------------------------------------------ controllers

class PDController:
    """Saturated PD law driving the point mass to its target."""

    def __init__(self, spec: EnvSpec, kp=4.0, kd=3.0):
        self.spec, self.kp, self.kd = spec, kp, kd

    def __call__(self, s):
        s = np.asarray(s)
        err = s[:2] - np.asarray(self.spec.target)
        # cancel the passive spring so the closed loop is set by kp, kd alone
        force = (-self.kp * err - self.kd * s[2:]) * self.spec.mass + self.spec.stiffness * err * self.spec.mass
        return np.clip(force / self.spec.force_limit, -1.0, 1.0)


class SwingUpController:
    """Energy pumping far from upright, PD balance near it."""

    def __init__(self, spec: EnvSpec, k_energy=1.0, kp=12.0, kd=3.0, capture=0.4):
        self.spec, self.k_energy, self.kp, self.kd, self.capture = spec, k_energy, kp, kd, capture

    def __call__(self, s):
        sp = self.spec
        th = np.arctan2(s[1], s[0])
        thdot = s[2]
        if abs(th) < self.capture:
            torque = -self.kp * th - self.kd * thdot
        else:
            energy = 0.5 * sp.length ** 2 * thdot ** 2 + sp.gravity * sp.length * (np.cos(th) - 1.0)
            torque = -self.k_energy * energy * thdot
            if abs(thdot) < 1e-3 and energy < 0:
                torque = sp.force_limit  # kick out of the bottom rest point
        return np.clip(np.array([torque / sp.force_limit]), -1.0, 1.0)


def expert_controller(spec: EnvSpec):
    if spec.name == "pointmass":
        return PDController(spec)
    return SwingUpController(spec)


def medium_controller(spec: EnvSpec):
    if spec.name == "pointmass":
        return PDController(spec, kp=1.0, kd=1.0)
    return SwingUpController(spec, k_energy=0.3, kp=8.0, kd=1.0, capture=0.3)


class NoisyPolicy:
    """Base controller plus clipped Gaussian action noise."""

    def __init__(self, base, sigma, rng):
        self.base, self.sigma, self.rng = base, sigma, rng

    def __call__(self, s):
        a = np.asarray(self.base(s), dtype=np.float64)
        if self.sigma > 0:
            a = a + self.rng.normal(0.0, self.sigma, a.shape)
        return np.clip(a, -1.0, 1.0)


class RandomPolicy:
    def __init__(self, spec: EnvSpec, rng):
        self.spec, self.rng = spec, rng

    def __call__(self, s):
        return self.rng.uniform(-1.0, 1.0, self.spec.action_dim)


# --------------------------------------------------------------- rollouts

@dataclass
class Trajectory:
    states: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


def rollout(spec: EnvSpec, policy: Callable, seed: int,
            observation_filter: Callable | None = None) -> tuple[float, Trajectory]:
    """Run one episode of exactly ``spec.horizon`` steps; return (undiscounted return, trajectory).

    ``observation_filter`` maps the true state to what the policy sees. The
    simulator always advances from the true state.
    """
    rng = np.random.default_rng(seed)
    s = initial_state(spec, rng)
    n, m, h = spec.state_dim, spec.action_dim, spec.horizon
    states, obs, next_states = np.zeros((h, n)), np.zeros((h, n)), np.zeros((h, n))
    actions, rewards = np.zeros((h, m)), np.zeros(h)
    for t in range(h):
        o = s if observation_filter is None else observation_filter(s)
        a = np.asarray(policy(o), dtype=np.float64)
        if a.shape != (m,):
            raise ValueError(f"policy returned action of shape {a.shape}, expected ({m},)")
        s_next, r = env_step(spec, s, a)
        states[t], obs[t], actions[t], rewards[t], next_states[t] = s, o, np.clip(a, -1, 1), r, s_next
        s = s_next
    traj = Trajectory(states, obs, actions, rewards, next_states)
    return traj.episode_return, traj


def mean_return(spec: EnvSpec, make_policy: Callable[[int], Callable], seeds) -> float:
    return float(np.mean([rollout(spec, make_policy(s), s)[0] for s in seeds]))


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    env: EnvSpec
    tier: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    seed: int = 0
    ref_random_score: float = 0.0
    ref_expert_score: float = 1.0
    tags: np.ndarray = field(default=None)
    state_mean: np.ndarray = field(default=None)
    state_std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.tags is None:
            self.tags = np.full(len(self.rewards), self.tier, dtype=object)
        if self.state_mean is None:
            self.state_mean = self.states.mean(axis=0)
            self.state_std = np.maximum(self.states.std(axis=0), STD_FLOOR)

    def __len__(self):
        return len(self.rewards)

    @property
    def size(self):
        return len(self)

    def normalize(self, s):
        return (np.asarray(s) - self.state_mean) / self.state_std

    def denormalize(self, s):
        return np.asarray(s) * self.state_std + self.state_mean

    def episode_returns(self) -> np.ndarray:
        ends = np.flatnonzero(self.dones)
        starts = np.r_[0, ends[:-1] + 1]
        return np.array([self.rewards[a:b + 1].sum() for a, b in zip(starts, ends)])

    def meta(self) -> dict:
        tags, counts = np.unique(self.tags.astype(str), return_counts=True)
        return {
            "env": self.env.to_dict(),
            "tier": self.tier,
            "size": len(self),
            "seed": self.seed,
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "ref_random_score": self.ref_random_score,
            "ref_expert_score": self.ref_expert_score,
            "composition": {str(t): int(c) for t, c in zip(tags, counts)},
            "generator_version": GENERATOR_VERSION,
        }

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        n, m = self.env.state_dim, self.env.action_dim
        header = ([f"s{i}" for i in range(n)] + [f"a{i}" for i in range(m)] + ["r"]
                  + [f"sn{i}" for i in range(n)] + ["done"])
        with open(out / "data.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for i in range(len(self)):
                row = [*self.states[i], *self.actions[i], self.rewards[i], *self.next_states[i]]
                w.writerow([repr(float(x)) for x in row] + [int(self.dones[i])])
        (out / "meta.json").write_text(json.dumps(self.meta(), indent=2) + "\n")
        return out

    @classmethod
    def load(cls, in_dir) -> "Dataset":
        d = Path(in_dir)
        meta = json.loads((d / "meta.json").read_text())
        env = EnvSpec.from_dict(meta["env"])
        n, m = env.state_dim, env.action_dim
        with open(d / "data.csv", newline="") as f:
            rows = list(csv.reader(f))[1:]
        arr = np.array(rows, dtype=np.float64).reshape(-1, 2 * n + m + 2)
        tags = []
        for tag, count in meta.get("composition", {meta["tier"]: len(arr)}).items():
            tags += [tag] * count
        order = _composition_order(meta["tier"], tags)
        return cls(env=env, tier=meta["tier"], states=arr[:, :n], actions=arr[:, n:n + m],
                   rewards=arr[:, n + m], next_states=arr[:, n + m + 1:2 * n + m + 1],
                   dones=arr[:, -1].astype(bool), seed=meta["seed"],
                   ref_random_score=meta["ref_random_score"],
                   ref_expert_score=meta["ref_expert_score"],
                   tags=np.array(order, dtype=object),
                   state_mean=np.array(meta["state_mean"]), state_std=np.array(meta["state_std"]))


def _composition_order(tier, tags):
    if tier == "medium-expert":
        return sorted(tags, key=lambda t: 0 if t == "expert" else 1)
    return tags


def _collect(spec: EnvSpec, make_policy: Callable[[int, int], Callable], size: int,
             seed: int, tag: str):
    """Roll out episodes until ``size`` transitions are logged (last episode truncated)."""
    cols = {k: [] for k in ("s", "a", "r", "sn", "d")}
    seeds = np.random.SeedSequence(seed)
    ep = 0
    total = 0
    while total < size:
        child = seeds.spawn(1)[0]
        ep_seed = int(child.generate_state(1)[0])
        policy = make_policy(ep, ep_seed)
        _, traj = rollout(spec, policy, ep_seed)
        take = min(spec.horizon, size - total)
        done = np.zeros(spec.horizon, dtype=bool)
        done[-1] = True
        cols["s"].append(traj.states[:take])
        cols["a"].append(traj.actions[:take])
        cols["r"].append(traj.rewards[:take])
        cols["sn"].append(traj.next_states[:take])
        d = done[:take].copy()
        d[-1] = True
        cols["d"].append(d)
        total += take
        ep += 1
    return (np.concatenate(cols["s"]), np.concatenate(cols["a"]), np.concatenate(cols["r"]),
            np.concatenate(cols["sn"]), np.concatenate(cols["d"]), np.full(total, tag, dtype=object))


EXPERT_SIGMA = 0.1
MEDIUM_SIGMA = 0.3
REPLAY_SIGMA = (1.0, 0.3)


def _tier_policy(spec: EnvSpec, kind: str, size: int):
    def make(ep, ep_seed):
        rng = np.random.default_rng(ep_seed + 1)
        if kind == "expert":
            return NoisyPolicy(expert_controller(spec), EXPERT_SIGMA, rng)
        if kind == "medium":
            return NoisyPolicy(medium_controller(spec), MEDIUM_SIGMA, rng)
        if kind == "random":
            return RandomPolicy(spec, rng)
        if kind == "medium-replay":
            n_eps = max(1, -(-size // spec.horizon))
            frac = ep / max(1, n_eps - 1)
            sigma = REPLAY_SIGMA[0] + frac * (REPLAY_SIGMA[1] - REPLAY_SIGMA[0])
            return NoisyPolicy(medium_controller(spec), sigma, rng)
        raise ValueError(f"unknown tier {kind!r}")
    return make


def reference_scores(spec: EnvSpec, seed: int, n: int = REF_ROLLOUTS) -> tuple[float, float]:
    """Mean undiscounted returns of the uniform-random policy and the noise-free expert."""
    seeds = [int(x) for x in np.random.SeedSequence([seed, 7]).generate_state(n)]
    rand = mean_return(spec, lambda s: RandomPolicy(spec, np.random.default_rng(s + 1)), seeds)
    expert = mean_return(spec, lambda s: expert_controller(spec), seeds)
    return rand, expert


def generate_dataset(spec: EnvSpec, tier: str, size: int, seed: int) -> Dataset:
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}; choose from {TIERS}")
    if size < 1:
        raise ValueError("size must be >= 1")
    if tier == "medium-expert":
        n_exp = size - size // 2
        parts = [_collect(spec, _tier_policy(spec, "expert", n_exp), n_exp, seed, "expert")]
        if size // 2:
            parts.append(_collect(spec, _tier_policy(spec, "medium", size // 2), size // 2,
                                  seed + 1, "medium"))
        cols = [np.concatenate(c) for c in zip(*parts)]
    else:
        cols = _collect(spec, _tier_policy(spec, tier, size), size, seed, tier)
    s, a, r, sn, d, tags = cols
    ref_random, ref_expert = reference_scores(spec, seed)
    if not ref_expert > ref_random:
        raise RuntimeError("expert reference score does not exceed random reference score")
    return Dataset(env=spec, tier=tier, states=s, actions=a, rewards=r, next_states=sn, dones=d,
                   seed=seed, ref_random_score=ref_random, ref_expert_score=ref_expert, tags=tags)
