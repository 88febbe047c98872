"""Train TD3+BC agents and score them under every observation attack.

Writes a run db (JSON lines) plus the per-task table and aggregate
statistics, e.g.

    python scripts/attack_ordering.py --env pendulum --seeds 3 --out results/pendulum
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from advoffline import attacks as at
from advoffline import diffcore as dc
from advoffline import envsuite as es
from advoffline import evalkit as ek
from advoffline import trainer as tr
from advoffline.cli import METHOD_NAMES
from advoffline.defenses import DefenseSpec


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--env", default="pointmass", choices=sorted(es.ENVS))
    p.add_argument("--tier", default="expert", choices=es.TIERS)
    p.add_argument("--size", type=int, default=50_000, help="dataset transitions")
    p.add_argument("--defense", default="none", choices=("none", "critic_defense", "actor_defense"))
    p.add_argument("--weight", type=float, default=1.0)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--robust-q-steps", type=int, default=20_000)
    p.add_argument("--skip-robust", action="store_true", help="leave out the robust-critic attack")
    p.add_argument("--out", required=True)
    return p.parse_args()


def main():
    args = parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = es.make_env(args.env)
    data = es.generate_dataset(spec, args.tier, args.size, seed=0)
    logging.info("refs random %.2f expert %.2f", data.ref_random_score, data.ref_expert_score)
    kinds = [k for k in at.ATTACK_KINDS if not (args.skip_robust and k == "robust_critic")]
    db = out / "runs.jsonl"
    for seed in range(args.seeds):
        cfg = tr.TrainConfig(max_iterations=args.iterations, seed=seed,
                             log_interval=max(1, args.iterations // 5),
                             defense=DefenseSpec(args.defense, args.weight))
        t0 = time.perf_counter()
        agent, _ = tr.train(cfg, data)
        ckpt = agent.save(out / f"seed{seed}" / "checkpoint")
        logging.info("seed %d trained in %.0f s", seed, time.perf_counter() - t0)
        robust_q = None
        if "robust_critic" in kinds:
            buf = at.collect_examination(spec, agent.policy, agent.state_mean, agent.state_std, seed=seed)
            robust_q = at.train_robust_q(agent.actor, buf, steps=args.robust_q_steps, seed=seed).q
            dc.save_net(robust_q, out / f"seed{seed}" / "robust_q", "robust_q")
        for kind in kinds:
            runs = ek.evaluate(agent, spec, at.AttackSpec(kind), args.episodes, [seed],
                               ref_random=data.ref_random_score, ref_expert=data.ref_expert_score,
                               robust_q=robust_q, dataset=args.tier,
                               method=METHOD_NAMES[args.defense], checkpoint=tr.checkpoint_hash(ckpt))
            ek.append_runs(db, runs)
            logging.info("seed %d %-13s %.2f", seed, kind, runs[0].normalized)

    runs = ek.read_runs(db)
    rows = ek.task_table(runs)
    (out / "task_table.csv").write_text(ek.table_csv(rows))
    report = ek.aggregate(runs, metrics=("iqm", "mean", "median"))
    (out / "aggregate.csv").write_text(report.to_csv())
    print(ek.format_table(rows))
    means = {k: float(np.mean([r.normalized for r in runs if r.attack == k])) for k in kinds}
    summary = {"env": args.env, "tier": args.tier, "defense": args.defense, "seeds": args.seeds,
               "seed_mean_scores": means,
               "critic_degradation_pct": 100 * (means["none"] - means["critic"]) / means["none"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
