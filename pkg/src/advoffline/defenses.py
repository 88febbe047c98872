"""Smoothness regularizers added to the critic or actor objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .attacks import PerturbationBudget, attack_actor, attack_critic, attack_random

DEFENSE_KINDS = ("none", "critic_defense", "actor_defense")
LAMBDA_GRID = (0.1, 0.5, 1.0, 5.0, 10.0)
DEFAULT_GENERATOR = {"critic_defense": "critic", "actor_defense": "actor"}


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    weight: float = 1.0
    generator: str = ""
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense {self.kind!r}; choose from {DEFENSE_KINDS}")
        if self.weight < 0:
            raise ValueError("defense weight must be >= 0")
        if not self.generator:
            object.__setattr__(self, "generator", DEFAULT_GENERATOR.get(self.kind, "none"))
        if self.generator not in ("none", "random", "critic", "actor"):
            raise ValueError(f"unsupported training attack {self.generator!r}")

    @property
    def active(self):
        return self.kind != "none"


def adversarial_states(defense: DefenseSpec, s: np.ndarray, actor: dc.MlpNet,
                       critic: dc.MlpNet, rng: np.random.Generator) -> np.ndarray:
    """Perturbed copies of a normalized batch from the defense's training attack."""
    kind, budget = defense.generator, defense.budget
    if kind == "none" or budget.epsilon == 0:
        return s.copy()
    if kind == "random":
        return attack_random(s, budget, rng)
    if kind == "critic":
        return attack_critic(s, actor, critic, budget)
    return attack_actor(s, actor, budget)


def critic_smoothness(critic: dc.MlpNet, s: np.ndarray, s_adv: np.ndarray, a: np.ndarray,
                      q_clean: dc.Tensor | None = None) -> dc.Tensor:
    """mean over the batch of (Q(s~, a) - Q(s, a))^2."""
    if q_clean is None:
        q_clean = critic(dc.concat([dc.Tensor(s), dc.Tensor(a)]))
    q_adv = critic(dc.concat([dc.Tensor(s_adv), dc.Tensor(a)]))
    return dc.mean(dc.square(dc.sub(q_adv, q_clean)))


def actor_smoothness(actor: dc.MlpNet, s: np.ndarray, s_adv: np.ndarray,
                     pi_clean: dc.Tensor | None = None) -> dc.Tensor:
    """mean over the batch of ||pi(s~) - pi(s)||^2."""
    if pi_clean is None:
        pi_clean = actor(s)
    diff = dc.sub(actor(s_adv), pi_clean)
    return dc.mean(dc.sum(dc.square(diff), axis=1))
