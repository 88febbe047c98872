import csv
import io

import numpy as np
import pytest

from advoffline import evalkit as ek

from oracles import interquartile_mean, round_half_away, stratified_bootstrap

ATTACKS = ("clean", "random", "critic", "actor", "robust_critic")


def run(task="pointmass", dataset="expert", method="TD3BC", attack="none", seed=0, score=50.0,
        checkpoint="abc"):
    return ek.RunScores(task, dataset, method, attack, seed, [score], score, checkpoint)


def test_iqm_of_one_to_eight():
    assert ek.iqm(np.arange(1, 9)) == 4.5


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 7, 10, 13])
def test_iqm_matches_oracle(n):
    v = np.random.default_rng(n).normal(size=n)
    assert ek.iqm(v) == pytest.approx(interquartile_mean(v), abs=1e-14)


def test_empty_statistics_raise():
    for f in (ek.iqm, ek.mean, ek.median):
        with pytest.raises(ValueError):
            f([])


def test_normalization_endpoints_exact():
    for rnd, exp in ((-355.27096478469133, -9.512821646452501), (-1186.573638555343, -302.76167967212393),
                     (0.0, 1.0), (-3.0, 7.5), (-1e6, 1e-3)):
        assert ek.normalize_score(rnd, rnd, exp) == 0.0
        assert ek.normalize_score(exp, rnd, exp) == 100.0
    with pytest.raises(ValueError):
        ek.normalize_score(1.0, 2.0, 2.0)


def test_percent_change_rounds_half_away_from_zero():
    assert ek.percent_change(43.69, 73.46) == -41
    # binary-exact halves: 1.125 - 1 = 0.125 exactly
    assert ek.percent_change(112.5, 100.0) == 13
    assert ek.percent_change(87.5, 100.0) == -13
    assert ek.percent_change(100.0, 100.0) == 0
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, c = rng.uniform(1, 100, 2)
        assert ek.percent_change(a, c) == round_half_away(100 * (a / c - 1))


def test_bootstrap_matches_independent_implementation():
    rng = np.random.default_rng(1)
    runs = rng.normal(60, 15, 10)
    strata = {"walker": list(runs[:4]), "hopper": list(runs[4:7]), "cheetah": list(runs[7:])}
    for stat_name, stat in (("iqm", interquartile_mean), ("mean", lambda v: float(np.mean(v)))):
        lo, hi = ek.bootstrap_ci(strata, stat_name, resamples=500, level=0.95, seed=7)
        rlo, rhi = stratified_bootstrap(strata, stat, 500, 0.95, 7)
        assert abs(lo - rlo) <= 1e-12 and abs(hi - rhi) <= 1e-12


def test_bootstrap_of_constant_runs_is_degenerate():
    lo, hi = ek.bootstrap_ci({"a": [3.0] * 5}, "mean", resamples=50)
    assert lo == hi == 3.0
    with pytest.raises(ValueError):
        ek.bootstrap_ci({"a": []}, "mean")


def test_run_db_deduplicates(tmp_path):
    db = tmp_path / "runs.jsonl"
    runs = [run(seed=s, score=s) for s in range(3)]
    assert ek.append_runs(db, runs) == 3
    assert ek.append_runs(db, runs + [run(seed=3)]) == 1
    assert [r.seed for r in ek.read_runs(db)] == [0, 1, 2, 3]
    assert ek.read_runs(db)[1] == runs[1]


def test_run_scores_validation():
    with pytest.raises(ValueError):
        ek.RunScores("t", "d", "m", "none", 0, [], 1.0)
    with pytest.raises(ValueError):
        ek.RunScores("t", "d", "m", "none", 0, [1.0], float("nan"))


def test_aggregate_levels_and_percent_change():
    runs = []
    for ds in ("expert", "medium-replay"):
        for task in ("pointmass", "pendulum"):
            for seed in range(5):
                runs.append(run(task, ds, attack="none", seed=seed, score=80.0 + seed))
                runs.append(run(task, ds, attack="critic", seed=seed, score=40.0 + seed))
    rep = ek.aggregate(runs, metrics=("iqm", "mean", "median"), resamples=200)
    assert {r.level for r in rep.rows} == {"expert", "medium-replay", "overall"}
    row = rep.lookup("overall", "TD3BC", "critic", "mean")
    assert row.value == pytest.approx(42.0) and row.n == 20
    assert row.pct_vs_clean == round_half_away(100 * (42.0 / 82.0 - 1))
    assert rep.lookup("expert", "TD3BC", "none", "iqm").pct_vs_clean is None
    for r in rep.rows:
        assert r.ci_low <= r.value <= r.ci_high
    parsed = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert len(parsed) == len(rep.rows)


def test_task_table_mean_row_averages_task_means_and_stds():
    runs = [run("a", attack="none", seed=0, score=10.0), run("a", attack="none", seed=1, score=20.0),
            run("b", attack="none", seed=0, score=30.0), run("b", attack="none", seed=1, score=50.0)]
    rows = ek.task_table(runs)
    mean = [r for r in rows if r["task"] == "MEAN"][0]
    assert mean["none_mean"] == pytest.approx((15.0 + 40.0) / 2)
    assert mean["none_std"] == pytest.approx((5.0 + 10.0) / 2)
    assert mean["critic_mean"] is None
    text = ek.format_table(rows)
    assert "Clean" in text.splitlines()[0] and "RobustCritic" in text.splitlines()[0]


@pytest.mark.parametrize("tier", sorted(ek.APPENDIX_TABLES))
def test_appendix_mean_rows_reproduce(tier):
    rows = ek.appendix_table(tier)
    methods = sorted({r["method"] for r in rows})
    assert len(methods) == 3
    for method in methods:
        tasks = [r for r in rows if r["method"] == method and r["task"] != "MEAN"]
        published = [r for r in rows if r["method"] == method and r["task"] == "MEAN"][0]
        assert len(tasks) == 3
        ours = ek.mean_row(tasks, method)
        for a in ATTACKS:
            key = "none" if a == "clean" else a
            for part in ("mean", "std"):
                assert abs(ours[f"{key}_{part}"] - published[f"{key}_{part}"]) <= 0.01


def test_table1_percent_changes_reproduce():
    rows = ek.load_fixture("table1_iqm.csv")
    assert len(rows) == 3
    count = 0
    for r in rows:
        for a in ("random", "critic", "actor", "robust_critic"):
            assert ek.percent_change(r[a], r["clean"]) == int(r[f"{a}_pct"])
            count += 1
    assert count == 12
