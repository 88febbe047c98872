"""TD3+BC with optional smoothness defenses.

Each iteration samples a batch, runs one critic update (policy evaluation)
and, every ``policy_period`` iterations, one actor update (policy
improvement) followed by a soft update of all target networks.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .attacks import PerturbationBudget
from .defenses import (DefenseSpec, actor_smoothness, adversarial_states,
                       critic_smoothness)
from .envsuite import Dataset, EnvSpec, rollout

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
NET_ROLES = ("actor", "critic1", "critic2", "target_actor", "target_critic1", "target_critic2")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    max_iterations: int = 50_000
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 0.005
    policy_period: int = 2
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha: float = 2.5
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    hidden: tuple = (64, 64)
    seed: int = 0
    log_interval: int = 5000
    eval_episodes: int = 3
    defense: DefenseSpec = field(default_factory=DefenseSpec)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1 or self.max_iterations < 1 or self.policy_period < 1:
            raise ValueError("batch_size, max_iterations and policy_period must be >= 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if isinstance(self.defense, dict):
            self.defense = defense_from_dict(self.defense)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["defense"] = defense_to_dict(self.defense)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def defense_to_dict(d: DefenseSpec) -> dict:
    return {"kind": d.kind, "weight": d.weight, "generator": d.generator,
            "epsilon": d.budget.epsilon, "step_size": d.budget.step_size,
            "num_steps": d.budget.num_steps}


def defense_from_dict(d: dict) -> DefenseSpec:
    known = {"kind", "weight", "generator", "epsilon", "step_size", "num_steps"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown defense keys: {sorted(unknown)}")
    budget = PerturbationBudget(**{k: d[k] for k in ("epsilon", "step_size", "num_steps") if k in d})
    return DefenseSpec(kind=d.get("kind", "none"), weight=d.get("weight", 1.0),
                       generator=d.get("generator", ""), budget=budget)


def config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown train keys: {sorted(unknown)}")
    return TrainConfig(**d)


# ------------------------------------------------------------------ agent

@dataclass
class AgentState:
    actor: dc.MlpNet
    critic1: dc.MlpNet
    critic2: dc.MlpNet
    target_actor: dc.MlpNet
    target_critic1: dc.MlpNet
    target_critic2: dc.MlpNet
    actor_opt: dc.MomentOptimizer
    critic_opt: dc.MomentOptimizer
    state_mean: np.ndarray
    state_std: np.ndarray
    env: EnvSpec
    iteration: int = 0
    actor_updates: int = 0
    critic_updates: int = 0

    @classmethod
    def create(cls, env: EnvSpec, state_mean, state_std, cfg: TrainConfig, rng) -> "AgentState":
        n, m = env.state_dim, env.action_dim
        actor = dc.MlpNet([n, *cfg.hidden, m], "tanh", rng=rng)
        c1 = dc.MlpNet([n + m, *cfg.hidden, 1], "none", rng=rng)
        c2 = dc.MlpNet([n + m, *cfg.hidden, 1], "none", rng=rng)
        return cls(actor, c1, c2, actor.copy(), c1.copy(), c2.copy(),
                   dc.MomentOptimizer.for_net(actor, lr=cfg.actor_lr),
                   dc.MomentOptimizer([p.shape for p in c1.params + c2.params], lr=cfg.critic_lr),
                   np.asarray(state_mean, dtype=np.float64), np.asarray(state_std, dtype=np.float64),
                   env)

    def nets(self) -> dict:
        return {role: getattr(self, role) for role in NET_ROLES}

    def normalize(self, s):
        return (np.asarray(s) - self.state_mean) / self.state_std

    def policy(self, s):
        """Deterministic action for a raw (unnormalized) state."""
        return self.actor.predict(self.normalize(s))

    def q1(self, s_n, a):
        return self.critic1.predict(np.concatenate([s_n, a], axis=-1))[..., 0]

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for role, net in self.nets().items():
            dc.save_net(net, out / role, role)
        np.savez(out / "optimizers.npz",
                 **{f"actor_m{i}": m for i, m in enumerate(self.actor_opt.m)},
                 **{f"actor_v{i}": v for i, v in enumerate(self.actor_opt.v)},
                 **{f"critic_m{i}": m for i, m in enumerate(self.critic_opt.m)},
                 **{f"critic_v{i}": v for i, v in enumerate(self.critic_opt.v)},
                 steps=np.array([self.actor_opt.step_count, self.critic_opt.step_count]))
        meta = {"format_version": CHECKPOINT_VERSION, "env": self.env.to_dict(),
                "state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist(),
                "iteration": self.iteration, "actor_updates": self.actor_updates,
                "critic_updates": self.critic_updates,
                "lr": {"actor": self.actor_opt.lr, "critic": self.critic_opt.lr}}
        (out / "agent.json").write_text(json.dumps(meta, indent=2) + "\n")
        return out

    @classmethod
    def load(cls, in_dir) -> "AgentState":
        d = Path(in_dir)
        if not (d / "agent.json").exists():
            raise FileNotFoundError(f"no agent checkpoint at {d}")
        meta = json.loads((d / "agent.json").read_text())
        nets = {role: dc.load_net(d / role)[0] for role in NET_ROLES}
        actor_opt = dc.MomentOptimizer.for_net(nets["actor"], lr=meta["lr"]["actor"])
        critic_opt = dc.MomentOptimizer([p.shape for p in nets["critic1"].params + nets["critic2"].params],
                                        lr=meta["lr"]["critic"])
        opt_file = d / "optimizers.npz"
        if opt_file.exists():
            z = np.load(opt_file)
            for opt, name in ((actor_opt, "actor"), (critic_opt, "critic")):
                opt.m = [z[f"{name}_m{i}"] for i in range(len(opt.shapes))]
                opt.v = [z[f"{name}_v{i}"] for i in range(len(opt.shapes))]
            actor_opt.step_count, critic_opt.step_count = (int(x) for x in z["steps"])
        return cls(**nets, actor_opt=actor_opt, critic_opt=critic_opt,
                   state_mean=np.array(meta["state_mean"]), state_std=np.array(meta["state_std"]),
                   env=EnvSpec.from_dict(meta["env"]), iteration=meta["iteration"],
                   actor_updates=meta["actor_updates"], critic_updates=meta["critic_updates"])


def checkpoint_hash(ckpt_dir) -> str:
    h = hashlib.sha256()
    for role in NET_ROLES:
        h.update((Path(ckpt_dir) / f"{role}.bin").read_bytes())
    return h.hexdigest()[:16]


# ----------------------------------------------------------------- losses

def make_batch(dataset: Dataset, idx: np.ndarray, state_mean, state_std) -> dict:
    return {"s": (dataset.states[idx] - state_mean) / state_std,
            "a": dataset.actions[idx],
            "r": dataset.rewards[idx],
            "sn": (dataset.next_states[idx] - state_mean) / state_std,
            "idx": idx}


def _sa(s, a):
    return dc.concat([dc.Tensor(s), a if isinstance(a, dc.Tensor) else dc.Tensor(a)])


def td_target(agent: AgentState, batch: dict, cfg: TrainConfig, rng) -> np.ndarray:
    sn = batch["sn"]
    noise = np.clip(rng.normal(0.0, cfg.policy_noise, (len(sn), agent.env.action_dim)),
                    -cfg.noise_clip, cfg.noise_clip)
    an = np.clip(agent.target_actor.predict(sn) + noise, -1.0, 1.0)
    x = np.concatenate([sn, an], axis=1)
    q_next = np.minimum(agent.target_critic1.predict(x), agent.target_critic2.predict(x))[:, 0]
    # done marks time-limit truncation only; the tasks never terminate, so always bootstrap
    return batch["r"] + cfg.gamma * q_next


def critic_losses(agent: AgentState, batch: dict, cfg: TrainConfig, rng, defense: DefenseSpec | None = None):
    """Build the critic objective; returns (total Tensor, info dict)."""
    if len(batch["r"]) == 0:
        raise ValueError("empty batch")
    defense = defense or DefenseSpec()
    y = td_target(agent, batch, cfg, rng)[:, None]
    s, a = batch["s"], batch["a"]
    q1 = agent.critic1(_sa(s, a))
    q2 = agent.critic2(_sa(s, a))
    l1 = dc.mean(dc.square(dc.sub(q1, y)))
    l2 = dc.mean(dc.square(dc.sub(q2, y)))
    total = dc.add(l1, l2)
    info = {"critic1_loss": float(l1.value), "critic2_loss": float(l2.value),
            "critic_loss": float(l1.value + l2.value), "defense_term": 0.0}
    if defense.kind == "critic_defense":
        with dc.frozen(agent.critic1, agent.critic2):
            s_adv = adversarial_states(defense, s, agent.actor, agent.critic1, rng)
        d1 = critic_smoothness(agent.critic1, s, s_adv, a, q1)
        d2 = critic_smoothness(agent.critic2, s, s_adv, a, q2)
        term = dc.mul(dc.add(d1, d2), 0.5)
        info["defense_term"] = float(term.value)
        if defense.weight > 0:
            total = dc.add(total, dc.mul(term, defense.weight))
    return total, info


def policy_evaluation(agent: AgentState, batch: dict, cfg: TrainConfig, rng,
                      defense: DefenseSpec | None = None) -> dict:
    """One critic update. Gradients touch only the live critics."""
    total, info = critic_losses(agent, batch, cfg, rng, defense)
    params = agent.critic1.params + agent.critic2.params
    with dc.frozen(agent.actor):
        grads = dc.grad(total, params)
    _check_finite(agent, batch, info, grads)
    agent.critic_opt.step(params, grads)
    agent.critic_updates += 1
    return info


def actor_loss(agent: AgentState, batch: dict, cfg: TrainConfig, rng, defense: DefenseSpec | None = None):
    if len(batch["r"]) == 0:
        raise ValueError("empty batch")
    defense = defense or DefenseSpec()
    s, a = batch["s"], batch["a"]
    with dc.frozen(agent.critic1):
        pi = agent.actor(s)
        q = agent.critic1(_sa(s, pi))
    scale = cfg.alpha / max(float(np.mean(np.abs(q.value))), 1e-8)
    bc = dc.mean(dc.sum(dc.square(dc.sub(pi, a)), axis=1))
    total = dc.add(dc.mul(dc.mean(q), -scale), bc)
    info = {"actor_loss": 0.0, "bc_loss": float(bc.value), "q_scale": scale, "actor_defense_term": 0.0}
    if defense.kind == "actor_defense":
        with dc.frozen(agent.actor):
            s_adv = adversarial_states(defense, s, agent.actor, agent.critic1, rng)
        term = actor_smoothness(agent.actor, s, s_adv, pi)
        info["actor_defense_term"] = float(term.value)
        if defense.weight > 0:
            total = dc.add(total, dc.mul(term, defense.weight))
    info["actor_loss"] = float(total.value)
    return total, info


def policy_improvement(agent: AgentState, batch: dict, cfg: TrainConfig, rng,
                       defense: DefenseSpec | None = None) -> dict:
    """One actor update. Gradients touch only the live actor."""
    total, info = actor_loss(agent, batch, cfg, rng, defense)
    with dc.frozen(agent.critic1):
        grads = dc.grad(total, agent.actor.params)
    _check_finite(agent, batch, info, grads)
    agent.actor_opt.step(agent.actor.params, grads)
    agent.actor_updates += 1
    return info


def _check_finite(agent, batch, info, grads):
    finite = all(np.isfinite(v) for v in info.values()) and all(np.all(np.isfinite(g)) for g in grads)
    if not finite:
        dump = {"iteration": agent.iteration, "batch_ids": batch["idx"].tolist(), "losses": info}
        raise TrainingDiverged(f"non-finite loss or gradient at iteration {agent.iteration}", dump)


def update_targets(agent: AgentState, tau: float):
    dc.soft_update(agent.target_actor, agent.actor, tau)
    dc.soft_update(agent.target_critic1, agent.critic1, tau)
    dc.soft_update(agent.target_critic2, agent.critic2, tau)


# ------------------------------------------------------------------ train

EVAL_SEED_BASE = 900_000


def clean_eval_return(agent: AgentState, episodes: int = 3) -> float:
    return float(np.mean([rollout(agent.env, agent.policy, EVAL_SEED_BASE + i)[0]
                          for i in range(episodes)]))


def train(cfg: TrainConfig, dataset: Dataset, callback: Callable[[dict], None] | None = None):
    """Run ``cfg.max_iterations`` TD3+BC iterations; return (agent, log records)."""
    rng = np.random.default_rng(cfg.seed)
    agent = AgentState.create(dataset.env, dataset.state_mean, dataset.state_std, cfg, rng)
    records = []
    n = len(dataset)
    last_actor = {"actor_loss": float("nan"), "actor_defense_term": 0.0}
    for k in range(1, cfg.max_iterations + 1):
        agent.iteration = k
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = make_batch(dataset, idx, agent.state_mean, agent.state_std)
        info = policy_evaluation(agent, batch, cfg, rng, cfg.defense)
        if k % cfg.policy_period == 0:
            last_actor = policy_improvement(agent, batch, cfg, rng, cfg.defense)
            update_targets(agent, cfg.tau)
        if cfg.log_interval and (k % cfg.log_interval == 0 or k == cfg.max_iterations):
            defense_term = info["defense_term"] if cfg.defense.kind == "critic_defense" \
                else last_actor["actor_defense_term"]
            rec = {"iter": k, "critic_loss": info["critic_loss"],
                   "actor_loss": last_actor["actor_loss"], "defense_term": defense_term,
                   "clean_eval_return": clean_eval_return(agent, cfg.eval_episodes)}
            records.append(rec)
            log.info("iter %d critic %.4g actor %.4g defense %.3g return %.2f", k,
                     rec["critic_loss"], rec["actor_loss"], defense_term, rec["clean_eval_return"])
            if callback:
                callback(rec)
    return agent, records
