"""Command-line entry point: gen-data, train, sweep, prepare-robust-q, eval, report.

Exit codes: 0 success, 2 usage or config error, 3 missing artifact,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from . import diffcore as dc
from .attacks import (EXAMINATION_BUDGET, ATTACK_KINDS, AttackSpec, PerturbationBudget,
                      collect_examination, train_robust_q)
from .defenses import LAMBDA_GRID
from .envsuite import GENERATOR_VERSION, TIERS, Dataset, EnvSpec, generate_dataset, make_env
from .evalkit import (STATISTICS, aggregate, append_runs, evaluate, format_table, read_runs,
                      table_csv, task_table)
from .trainer import (CHECKPOINT_VERSION, AgentState, TrainConfig, TrainingDiverged,
                      checkpoint_hash, config_from_dict, defense_from_dict, train)

log = logging.getLogger("advoffline")

EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4
RUNDB_VERSION = 1
METHOD_NAMES = {"none": "TD3BC", "critic_defense": "TD3BC + Critic Defense",
                "actor_defense": "TD3BC + Actor Defense"}
CONFIG_SECTIONS = {
    "env": {"name"} | {f.name for f in fields(EnvSpec)},
    "dataset": {"tier", "size", "seed", "path"},
    "train": {f.name for f in fields(TrainConfig)} - {"defense"},
    "defense": {"kind", "weight", "generator", "epsilon", "step_size", "num_steps"},
    "attack_eval": {"attacks", "epsilon", "episodes", "seeds"},
}


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------- config

def parse_config(text: str) -> dict:
    """Parse and validate a TOML experiment config; unknown sections or keys are errors."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"invalid TOML: {e}") from None
    for section, body in raw.items():
        if section not in CONFIG_SECTIONS:
            raise UsageError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise UsageError(f"[{section}] must be a table")
        unknown = set(body) - CONFIG_SECTIONS[section]
        if unknown:
            raise UsageError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return {s: dict(raw.get(s, {})) for s in CONFIG_SECTIONS}


def env_from_config(cfg: dict) -> EnvSpec:
    env = dict(cfg["env"])
    name = env.pop("name", "pointmass")
    env.pop("state_dim", None), env.pop("action_dim", None)
    overrides = {k: tuple(v) if isinstance(v, list) else v for k, v in env.items()}
    return make_env(name, **overrides)


def train_config(cfg: dict) -> TrainConfig:
    d = dict(cfg["train"])
    try:
        d["defense"] = defense_from_dict(cfg["defense"])
        return config_from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(out: Path, kind: str, cfg_hash: str, artifacts: dict, seeds) -> Path:
    missing = [k for k, p in artifacts.items() if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"manifest artifacts missing: {missing}")
    manifest = {"experiment_id": f"{kind}-{cfg_hash[:12]}", "config_hash": cfg_hash,
                "artifacts": {k: str(p) for k, p in artifacts.items()},
                "tool_version": __version__, "formats": format_versions(), "seeds": list(seeds)}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def format_versions() -> dict:
    return {"checkpoint": CHECKPOINT_VERSION, "net": dc.FORMAT_VERSION,
            "dataset_generator": GENERATOR_VERSION, "run_db": RUNDB_VERSION}


# --------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    spec = make_env(args.env)
    ds = generate_dataset(spec, args.tier, args.size, args.seed)
    out = ds.save(args.out)
    print(f"wrote {len(ds)} transitions to {out}")
    print(f"ref_random_score {ds.ref_random_score!r}")
    print(f"ref_expert_score {ds.ref_expert_score!r}")
    return 0


def load_dataset_for(cfg: dict, env: EnvSpec, out: Path) -> tuple[Dataset, Path]:
    d = cfg["dataset"]
    if "path" in d:
        path = Path(d["path"])
        if not (path / "meta.json").exists():
            raise FileNotFoundError(f"no dataset at {path}")
        ds = Dataset.load(path)
        if ds.env != env:
            raise UsageError("dataset env does not match the [env] section")
        return ds, path
    ds = generate_dataset(env, d.get("tier", "expert"), int(d.get("size", 50_000)), int(d.get("seed", 0)))
    return ds, ds.save(out / "dataset")


def cmd_train(args) -> int:
    text = Path(args.config).read_text()
    cfg = parse_config(text)
    env = env_from_config(cfg)
    tcfg = train_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(text)
    ds, ds_path = load_dataset_for(cfg, env, out)
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    def record(rec):
        with open(log_path, "a") as f:
            f.write(json.dumps(rec) + "\n")

    try:
        agent, _ = train(tcfg, ds, callback=record)
    except TrainingDiverged as e:
        (out / "diverged.json").write_text(json.dumps(e.dump, indent=2) + "\n")
        raise
    ckpt = agent.save(out / "checkpoint")
    info = {"task": env.name, "dataset": ds.tier, "method": METHOD_NAMES[tcfg.defense.kind],
            "defense_weight": tcfg.defense.weight, "ref_random_score": ds.ref_random_score,
            "ref_expert_score": ds.ref_expert_score, "train_digest": tcfg.digest()}
    (ckpt / "run_info.json").write_text(json.dumps(info, indent=2) + "\n")
    write_manifest(out, "train", config_hash(text),
                   {"config": out / "config.toml", "dataset": ds_path, "checkpoint": ckpt,
                    "training_log": log_path}, [tcfg.seed])
    print(f"checkpoint {ckpt} hash {checkpoint_hash(ckpt)}")
    return 0


def cmd_sweep(args) -> int:
    text = Path(args.config).read_text()
    cfg = parse_config(text)
    if cfg["defense"].get("kind", "none") == "none":
        raise UsageError("sweep needs a [defense] kind other than none")
    grid = [float(x) for x in args.lambda_grid.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = {}
    for lam in grid:
        job_dir = out / f"lambda_{lam:g}"
        job_dir.mkdir(parents=True, exist_ok=True)
        job_cfg = job_dir / "sweep_config.toml"
        job_cfg.write_text(with_weight(text, lam))
        # each lambda in its own process so no state leaks between jobs
        rc = subprocess.call([sys.executable, "-m", "advoffline.cli", "train",
                              "--config", str(job_cfg), "--out", str(job_dir)])
        if rc != 0:
            return rc
        jobs[f"lambda_{lam:g}"] = job_dir / "manifest.json"
    write_manifest(out, "sweep", config_hash(text), jobs, [cfg["train"].get("seed", 0)])
    return 0


def with_weight(text: str, lam: float) -> str:
    """Config text with [defense] weight replaced by ``lam``."""
    lines, section, done = [], None, False
    for line in text.splitlines():
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            if section == "defense" and not done:
                lines.append(f"weight = {lam!r}")
                done = True
            section = s[1:-1].strip()
        elif section == "defense" and s.split("=")[0].strip() == "weight":
            line, done = f"weight = {lam!r}", True
        lines.append(line)
    if section == "defense" and not done:
        lines.append(f"weight = {lam!r}")
    return "\n".join(lines) + "\n"


def load_checkpoint(path) -> tuple[AgentState, dict]:
    ckpt = Path(path)
    if not (ckpt / "agent.json").exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    info_path = ckpt / "run_info.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {}
    return AgentState.load(ckpt), info


def cmd_prepare_robust_q(args) -> int:
    agent, _ = load_checkpoint(args.checkpoint)
    env = agent.env if args.env is None else make_env(args.env)
    if env.name != agent.env.name:
        raise UsageError(f"checkpoint was trained on {agent.env.name}, not {env.name}")
    out = Path(args.out or Path(args.checkpoint).parent / "robust_q")
    out.mkdir(parents=True, exist_ok=True)
    buf = collect_examination(env, agent.policy, agent.state_mean, agent.state_std,
                              capacity=args.budget, seed=args.seed)
    buf_dir = buf.data.save(out / "examination")
    budget = PerturbationBudget(epsilon=args.eps)
    res = train_robust_q(agent.actor, buf, lam=args.lam, steps=args.steps,
                         batch_size=min(256, len(buf)), budget=budget, seed=args.seed,
                         hidden=tuple(agent.critic1.layer_dims[1:-1]))
    dc.save_net(res.q, out / "robust_q", "robust_q")
    summary = {"initial_td_loss": res.initial_loss, "final_td_loss": res.final_loss,
               "action_smoothness": res.smoothness, "steps": args.steps, "lam": args.lam,
               "budget": args.budget}
    (out / "robust_q_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    key = config_hash(json.dumps({"checkpoint": checkpoint_hash(args.checkpoint), **summary,
                                  "seed": args.seed}, sort_keys=True))
    write_manifest(out, "robust-q", key, {"examination": buf_dir,
                                          "robust_q": out / "robust_q.bin"}, [args.seed])
    print(f"robust Q at {out / 'robust_q'}; td loss {res.initial_loss:.4g} -> {res.final_loss:.4g}")
    return 0


EVAL_DEFAULTS = {"attacks": ",".join(ATTACK_KINDS), "eps": 0.05, "episodes": 10, "seeds": 5}


def eval_settings(args) -> dict:
    """Explicit flags win, then the config's [attack_eval] section, then protocol defaults."""
    settings = dict(EVAL_DEFAULTS)
    if args.config:
        sec = parse_config(Path(args.config).read_text())["attack_eval"]
        if "attacks" in sec:
            a = sec["attacks"]
            settings["attacks"] = ",".join(a) if isinstance(a, list) else str(a)
        for key, flag in (("epsilon", "eps"), ("episodes", "episodes"), ("seeds", "seeds")):
            if key in sec:
                settings[flag] = sec[key]
    for flag in EVAL_DEFAULTS:
        if getattr(args, flag) is not None:
            settings[flag] = getattr(args, flag)
    return settings


def cmd_eval(args) -> int:
    agent, info = load_checkpoint(args.checkpoint)
    opts = eval_settings(args)
    attacks = [a.strip() for a in opts["attacks"].split(",") if a.strip()]
    bad = [a for a in attacks if a not in ATTACK_KINDS]
    if bad:
        raise UsageError(f"unknown attacks {bad}; choose from {ATTACK_KINDS}")
    ref_random = args.ref_random if args.ref_random is not None else info.get("ref_random_score")
    ref_expert = args.ref_expert if args.ref_expert is not None else info.get("ref_expert_score")
    if ref_random is None or ref_expert is None:
        raise FileNotFoundError("reference scores not found; pass --ref-random/--ref-expert")
    robust_q = None
    if "robust_critic" in attacks:
        rq = Path(args.robust_q or Path(args.checkpoint).parent / "robust_q")
        if rq.is_dir():
            rq = rq / "robust_q"
        if not rq.with_suffix(".bin").exists():
            raise FileNotFoundError(f"robust_critic needs a robust Q checkpoint at {rq}; "
                                    "run prepare-robust-q first")
        robust_q, _ = dc.load_net(rq)
    budget = PerturbationBudget(epsilon=float(opts["eps"]))
    ckpt_hash = checkpoint_hash(args.checkpoint)
    seeds = list(range(int(opts["seeds"])))
    written = 0
    for kind in attacks:
        runs = evaluate(agent, agent.env, AttackSpec(kind, budget), int(opts["episodes"]), seeds,
                        ref_random=ref_random, ref_expert=ref_expert, robust_q=robust_q,
                        task=info.get("task", agent.env.name), dataset=info.get("dataset", ""),
                        method=info.get("method", "TD3BC"), checkpoint=ckpt_hash)
        written += append_runs(args.out, runs)
        scores = [r.normalized for r in runs]
        print(f"{kind:14s} normalized {np.mean(scores):8.2f} +- {np.std(scores):.2f}")
    print(f"appended {written} runs to {args.out}")
    return 0


def cmd_report(args) -> int:
    runs = read_runs(args.runs)
    if not runs:
        raise FileNotFoundError(f"no runs in {args.runs}")
    metrics = [m.strip() for m in args.metric.split(",")]
    bad = [m for m in metrics if m not in STATISTICS]
    if bad:
        raise UsageError(f"unknown metrics {bad}")
    group_by = tuple(g.strip() for g in args.group_by.split(","))
    report = aggregate(runs, group_by=group_by, metrics=metrics, resamples=args.bootstrap,
                       seed=args.seed)
    rows = task_table(runs)
    text = format_table(rows)
    lines = [text, ""]
    for r in report.rows:
        pct = "" if r.pct_vs_clean is None else f" ({r.pct_vs_clean:+d}%)"
        lines.append(f"{r.level:14s} {r.method:24s} {r.attack:14s} {r.metric:6s} "
                     f"{r.value:8.2f} [{r.ci_low:.2f}, {r.ci_high:.2f}] n={r.n}{pct}")
    body = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "aggregate.csv").write_text(report.to_csv())
        (out / "task_table.csv").write_text(table_csv(rows))
        (out / "report.txt").write_text(body)
    print(body, end="")
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advoffline", description=__doc__.splitlines()[0])
    fv = format_versions()
    p.add_argument("--version", action="version",
                   version=f"advoffline {__version__} (" + ", ".join(f"{k} format {v}" for k, v in fv.items()) + ")")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an offline dataset")
    g.add_argument("--env", choices=("pointmass", "pendulum"), default="pointmass")
    g.add_argument("--tier", choices=TIERS, default="expert")
    g.add_argument("--size", type=int, default=50_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train TD3+BC from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train one job per defense weight")
    s.add_argument("--config", required=True)
    s.add_argument("--lambda-grid", default=",".join(f"{x:g}" for x in LAMBDA_GRID))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("prepare-robust-q", help="profile the victim and fit the attacker's Q")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--env", choices=("pointmass", "pendulum"))
    r.add_argument("--budget", type=int, default=EXAMINATION_BUDGET, help="examination transitions")
    r.add_argument("--steps", type=int, default=20_000)
    r.add_argument("--lam", type=float, default=1.0)
    r.add_argument("--eps", type=float, default=0.05)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    r.set_defaults(func=cmd_prepare_robust_q)

    e = sub.add_parser("eval", help="evaluate a checkpoint under attacks")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="TOML config whose [attack_eval] section supplies defaults")
    e.add_argument("--attacks", help=f"comma list (default {EVAL_DEFAULTS['attacks']})")
    e.add_argument("--eps", type=float, help="l-inf budget in normalized state units (default 0.05)")
    e.add_argument("--episodes", type=int, help="episodes per seed (default 10)")
    e.add_argument("--seeds", type=int, help="number of evaluation seeds (default 5)")
    e.add_argument("--robust-q", help="robust Q directory or file stem (default: <checkpoint>/../robust_q)")
    e.add_argument("--ref-random", type=float)
    e.add_argument("--ref-expert", type=float)
    e.add_argument("--out", required=True, help="run db (JSON lines)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("report", help="aggregate a run db into tables")
    a.add_argument("--runs", required=True)
    a.add_argument("--group-by", default="method,attack")
    a.add_argument("--metric", default="iqm,mean,median")
    a.add_argument("--bootstrap", type=int, default=2000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as e:
        dump = getattr(e, "dump", None)
        print(f"error: {e}", file=sys.stderr)
        if dump is not None:
            print(json.dumps(dump), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
