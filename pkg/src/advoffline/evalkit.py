"""Attack-suite evaluation, score normalization and aggregate statistics."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .attacks import AttackSpec, ObservationAttack
from .envsuite import EnvSpec, rollout

ATTACK_COLUMNS = (("none", "Clean"), ("random", "Random"), ("critic", "Critic"),
                  ("actor", "Actor"), ("robust_critic", "RobustCritic"))
EVAL_SEED_STRIDE = 1_000


@dataclass
class RunScores:
    task: str
    dataset: str
    method: str
    attack: str
    seed: int
    returns: list
    normalized: float
    checkpoint: str = ""

    def __post_init__(self):
        if len(self.returns) < 1:
            raise ValueError("a run needs at least one episode")
        if not np.isfinite(self.normalized):
            raise ValueError("normalized score must be finite")

    @property
    def key(self):
        return (self.checkpoint, self.attack, self.seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def normalize_score(raw: float, ref_random: float, ref_expert: float) -> float:
    if ref_expert == ref_random:
        raise ValueError("expert and random reference scores are equal")
    # divide first so the endpoints map to exactly 0 and 100
    return 100.0 * ((raw - ref_random) / (ref_expert - ref_random))


def evaluate(agent, env: EnvSpec, attack: AttackSpec, episodes: int, seeds: Sequence[int], *,
             ref_random: float, ref_expert: float, robust_q=None, task: str | None = None,
             dataset: str = "", method: str = "TD3BC", checkpoint: str = "") -> list[RunScores]:
    """One RunScores per evaluation seed; each runs ``episodes`` attacked rollouts.

    The attack only filters what the policy observes.
    """
    if attack.kind == "robust_critic" and robust_q is None:
        raise FileNotFoundError("robust_critic evaluation needs a robust Q checkpoint; "
                                "run train_robust_q (cli: prepare-robust-q) first")
    runs = []
    for seed in seeds:
        returns = []
        for ep in range(episodes):
            ep_seed = seed * EVAL_SEED_STRIDE + ep
            filt = None
            if attack.kind != "none":
                filt = ObservationAttack(attack, agent.actor, agent.state_mean, agent.state_std,
                                         critic=agent.critic1, robust_q=robust_q, seed=ep_seed)
            returns.append(rollout(env, agent.policy, ep_seed, filt)[0])
        score = normalize_score(float(np.mean(returns)), ref_random, ref_expert)
        runs.append(RunScores(task or env.name, dataset, method, attack.kind, int(seed),
                              returns, score, checkpoint))
    return runs


# ------------------------------------------------------------- statistics

def iqm(values) -> float:
    """Mean after dropping floor(n/4) values from each end."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("iqm of an empty sequence")
    k = v.size // 4
    return float(v[k:v.size - k].mean())


def mean(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("mean of an empty sequence")
    return float(v.mean())


def median(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("median of an empty sequence")
    return float(np.median(v))


STATISTICS: dict[str, Callable] = {"iqm": iqm, "mean": mean, "median": median}


def bootstrap_ci(strata: dict, statistic: Callable | str = iqm, resamples: int = 2000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Stratified percentile bootstrap.

    Each resample draws, within every stratum (in sorted key order), as many
    runs as the stratum holds, with replacement; the statistic is computed on
    the pooled draw.
    """
    stat = STATISTICS[statistic] if isinstance(statistic, str) else statistic
    rng = np.random.default_rng(seed)
    groups = [np.asarray(strata[k], dtype=np.float64) for k in sorted(strata)]
    if any(g.size == 0 for g in groups):
        raise ValueError("every stratum needs at least one run")
    stats = np.empty(resamples)
    for b in range(resamples):
        stats[b] = stat(np.concatenate([g[rng.integers(0, g.size, g.size)] for g in groups]))
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return float(lo), float(hi)


def percent_change(attacked: float, clean: float) -> int:
    """100 * (attacked / clean - 1), rounded half away from zero."""
    x = 100.0 * (attacked / clean - 1.0)
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


# -------------------------------------------------------------- run store

def read_runs(path) -> list[RunScores]:
    p = Path(path)
    if not p.exists():
        return []
    return [RunScores(**json.loads(line)) for line in p.read_text().splitlines() if line.strip()]


def append_runs(path, runs: Iterable[RunScores]) -> int:
    """Append runs not already present (keyed by checkpoint, attack, seed); return count written."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    seen = {r.key for r in read_runs(p)}
    written = 0
    with open(p, "a") as f:
        for r in runs:
            if r.key in seen:
                continue
            f.write(r.to_json() + "\n")
            seen.add(r.key)
            written += 1
    return written


# -------------------------------------------------------------- aggregate

@dataclass
class AggregateRow:
    level: str
    method: str
    attack: str
    metric: str
    value: float
    ci_low: float
    ci_high: float
    n: int
    pct_vs_clean: int | None = None


@dataclass
class AggregateReport:
    group_by: tuple
    metrics: tuple
    rows: list = field(default_factory=list)

    def lookup(self, level, method, attack, metric) -> AggregateRow:
        for r in self.rows:
            if (r.level, r.method, r.attack, r.metric) == (level, method, attack, metric):
                return r
        raise KeyError((level, method, attack, metric))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["level", "method", "attack", "metric", "value", "ci_low", "ci_high", "n", "pct_vs_clean"])
        for r in self.rows:
            w.writerow([r.level, r.method, r.attack, r.metric, repr(r.value), repr(r.ci_low),
                        repr(r.ci_high), r.n, "" if r.pct_vs_clean is None else r.pct_vs_clean])
        return buf.getvalue()


def aggregate(runs: Sequence[RunScores], group_by=("method", "attack"),
              metrics=("iqm", "mean", "median"), resamples: int = 2000, seed: int = 0) -> AggregateReport:
    """Per-dataset statistics (runs pooled over tasks, bootstrap stratified by task)
    plus an ``overall`` level pooled over datasets (stratified by task and dataset)."""
    if not runs:
        raise ValueError("no runs to aggregate")
    report = AggregateReport(tuple(group_by), tuple(metrics))
    levels = sorted({r.dataset for r in runs})
    by_level = {lv: [r for r in runs if r.dataset == lv] for lv in levels}
    if len(levels) > 1 or "overall" not in by_level:
        by_level["overall"] = list(runs)
    for level, subset in by_level.items():
        groups = defaultdict(list)
        for r in subset:
            groups[tuple(getattr(r, g) for g in group_by)].append(r)
        for key in sorted(groups):
            members = groups[key]
            strata = defaultdict(list)
            for r in sorted(members, key=lambda r: (r.task, r.dataset, r.seed, r.checkpoint)):
                stratum = r.task if level != "overall" else (r.task, r.dataset)
                strata[stratum].append(r.normalized)
            pooled = np.concatenate([strata[k] for k in sorted(strata)])
            for metric in metrics:
                value = STATISTICS[metric](pooled)
                lo, hi = bootstrap_ci(strata, metric, resamples, seed=seed)
                # percentile intervals of trimmed statistics can miss the point estimate
                lo, hi = min(lo, value), max(hi, value)
                method = key[group_by.index("method")] if "method" in group_by else ""
                attack = key[group_by.index("attack")] if "attack" in group_by else ""
                report.rows.append(AggregateRow(level, method, attack, metric, value, lo, hi, len(pooled)))
    for row in report.rows:
        if row.attack and row.attack != "none":
            try:
                clean = report.lookup(row.level, row.method, "none", row.metric)
            except KeyError:
                continue
            if clean.value != 0:
                row.pct_vs_clean = percent_change(row.value, clean.value)
    return report


# ------------------------------------------------------------ task tables

def task_table(runs: Sequence[RunScores]) -> list[dict]:
    """Appendix-style rows: per (task, method) the seed mean and std of normalized
    score for each attack column, plus a MEAN row per method averaging the task
    means and task stds."""
    cells = defaultdict(list)
    for r in runs:
        cells[(r.task, r.method, r.attack)].append(r.normalized)
    tasks = sorted({r.task for r in runs})
    methods = sorted({r.method for r in runs})
    rows = []
    for method in methods:
        per_task = []
        for task in tasks:
            row = {"task": task, "method": method}
            for attack, _ in ATTACK_COLUMNS:
                v = cells.get((task, method, attack))
                row[f"{attack}_mean"] = float(np.mean(v)) if v else None
                row[f"{attack}_std"] = float(np.std(v)) if v else None
            if any(row[f"{a}_mean"] is not None for a, _ in ATTACK_COLUMNS):
                per_task.append(row)
        rows += per_task
        if per_task:
            rows.append(mean_row(per_task, method))
    return rows


def mean_row(task_rows: Sequence[dict], method: str) -> dict:
    row = {"task": "MEAN", "method": method}
    for attack, _ in ATTACK_COLUMNS:
        for part in ("mean", "std"):
            vals = [r[f"{attack}_{part}"] for r in task_rows if r.get(f"{attack}_{part}") is not None]
            row[f"{attack}_{part}"] = float(np.mean(vals)) if vals else None
    return row


def format_table(rows: Sequence[dict]) -> str:
    header = ["Task", "Method"] + [label for _, label in ATTACK_COLUMNS]
    body = []
    for r in rows:
        cells = [r["task"], r["method"]]
        for attack, _ in ATTACK_COLUMNS:
            m, s = r.get(f"{attack}_mean"), r.get(f"{attack}_std")
            cells.append("-" if m is None else f"{m:.2f}+{s:.2f}")
        body.append(cells)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(line, widths)) for line in [header] + body]
    return "\n".join(lines) + "\n"


def table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    cols = ["task", "method"] + [f"{a}_{p}" for a, _ in ATTACK_COLUMNS for p in ("mean", "std")]
    w = csv.DictWriter(buf, fieldnames=cols)
    w.writeheader()
    for r in rows:
        w.writerow({c: ("" if r.get(c) is None else r[c]) for c in cols})
    return buf.getvalue()


# --------------------------------------------------------------- fixtures

APPENDIX_TABLES = {"expert": "appendix_expert.csv",
                   "medium-expert": "appendix_medium_expert.csv",
                   "medium-replay": "appendix_medium_replay.csv"}


def load_fixture(name: str) -> list[dict]:
    text = resources.files("advoffline").joinpath("fixtures", name).read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        for k, v in r.items():
            if k not in ("task", "method"):
                r[k] = float(v)
    return rows


def appendix_table(tier: str) -> list[dict]:
    """Transcribed per-task table; the clean column is keyed like the ``none`` attack."""
    rows = load_fixture(APPENDIX_TABLES[tier])
    return [{k.replace("clean_", "none_", 1) if k.startswith("clean_") else k: v
             for k, v in r.items()} for r in rows]
