"""Sweep the smoothness weight of one defense over a grid.

For each weight: train, then record the clean score, the attacked score and
the sensitivity the defense targets, measured on held-out states.
"""
import argparse
import csv
import logging
from pathlib import Path

import numpy as np

from advoffline import attacks as at
from advoffline import envsuite as es
from advoffline import evalkit as ek
from advoffline import trainer as tr
from advoffline.defenses import LAMBDA_GRID, DefenseSpec


def sensitivity(agent, kind, states, actions):
    s = agent.normalize(states)
    budget = at.PerturbationBudget()
    if kind == "actor_defense":
        adv = at.attack_actor(s, agent.actor, budget)
        return float(np.mean(np.sum((agent.actor.predict(adv) - agent.actor.predict(s)) ** 2, 1)))
    adv = at.attack_critic(s, agent.actor, agent.critic1, budget)
    q0 = agent.critic1.predict(np.concatenate([s, actions], 1))
    q1 = agent.critic1.predict(np.concatenate([adv, actions], 1))
    return float(np.mean((q1 - q0) ** 2))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--env", default="pointmass", choices=sorted(es.ENVS))
    p.add_argument("--defense", default="actor_defense", choices=("critic_defense", "actor_defense"))
    p.add_argument("--grid", default=",".join(f"{x:g}" for x in LAMBDA_GRID))
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--out", default="results/lambda_sweep.csv")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = es.make_env(args.env)
    data = es.generate_dataset(spec, "expert", 50_000, seed=0)
    held = es.generate_dataset(spec, "expert", 5_000, seed=999)
    attack = "actor" if args.defense == "actor_defense" else "critic"
    weights = [0.0] + [float(x) for x in args.grid.split(",")]
    rows = []
    for lam in weights:
        kind = args.defense if lam > 0 else "none"
        cfg = tr.TrainConfig(max_iterations=args.iterations, seed=args.seed,
                             log_interval=args.iterations, defense=DefenseSpec(kind, lam))
        agent, _ = tr.train(cfg, data)
        row = {"weight": lam, "sensitivity": sensitivity(agent, args.defense, held.states, held.actions)}
        for k in ("none", attack):
            runs = ek.evaluate(agent, spec, at.AttackSpec(k), args.episodes, [args.seed],
                               ref_random=data.ref_random_score, ref_expert=data.ref_expert_score)
            row[f"{k}_score"] = runs[0].normalized
        logging.info("%s", row)
        rows.append(row)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print("  ".join(f"{k}={v:.4g}" for k, v in r.items()))


if __name__ == "__main__":
    main()
