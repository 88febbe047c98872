"""Recompute the summary rows of the bundled published result tables.

Checks the MEAN row of each per-task table (mean of task means and of task
stds) and the percent-change annotations of the IQM summary.
"""
import argparse

from advoffline import evalkit as ek


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--tol", type=float, default=0.01)
    args = p.parse_args()

    worst = 0.0
    for tier in sorted(ek.APPENDIX_TABLES):
        rows = ek.appendix_table(tier)
        print(f"== {tier}")
        for method in sorted({r["method"] for r in rows}):
            tasks = [r for r in rows if r["method"] == method and r["task"] != "MEAN"]
            published = next(r for r in rows if r["method"] == method and r["task"] == "MEAN")
            ours = ek.mean_row(tasks, method)
            diffs = {f"{a}_{p}": ours[f"{a}_{p}"] - published[f"{a}_{p}"]
                     for a, _ in ek.ATTACK_COLUMNS for p in ("mean", "std")}
            gap = max(abs(d) for d in diffs.values())
            worst = max(worst, gap)
            print(f"  {method:24s} max |recomputed - published| = {gap:.4f}")

    print("== IQM percent changes")
    mismatches = 0
    for r in ek.load_fixture("table1_iqm.csv"):
        cells = []
        for a in ("random", "critic", "actor", "robust_critic"):
            got = ek.percent_change(r[a], r["clean"])
            mismatches += got != int(r[f"{a}_pct"])
            cells.append(f"{a} {r[a]:.2f} ({got:+d}% vs {int(r[a + '_pct']):+d}%)")
        print(f"  {r['method']:7s} " + ", ".join(cells))
    print(f"worst MEAN-row gap {worst:.4f} (tol {args.tol}); percent mismatches {mismatches}")
    return 0 if worst <= args.tol and mismatches == 0 else 1


if __name__ == "__main__":
    raise SystemExit(main())
