"""Ablation grids: train one model per (mixture variant, seed), score every
variant against the same held-out probe questions, aggregate mean +/- std.

Variants of a grid differ only in which task kinds are mixed into training
and in the negative-sampling policy; corpus, model size, step budget, and
the probe set are shared.  Completed runs are detected by their echoed
config and reused, so a finished grid can be re-aggregated without
retraining.
"""

from __future__ import annotations

import csv
import json
import multiprocessing
import os
import statistics

from .config import RunConfig, render_config
from .runner import load_run_report, run_complete, run_training
from .tasksynth import EASY, HARD

CM_KINDS = ["caption", "completion", "itm", "mlm"]
OA_LIST = ["oa_list"]
OA_QUESTIONS = ["oa_exists", "oa_andor", "oa_which"]
ALL_KINDS = CM_KINDS + OA_LIST + OA_QUESTIONS

# mixture-composition grid: one row per training recipe
TABLE1 = [
    ("caption_only", ["caption"], EASY),
    ("mlm_only", ["mlm"], EASY),
    ("cm_mix", CM_KINDS, EASY),
    ("cm_mix_hard", CM_KINDS, HARD),
    ("cm_mix_oa_list", CM_KINDS + OA_LIST, EASY),
    ("oa_234", OA_QUESTIONS, EASY),
    ("cm_mix_oa_234", CM_KINDS + OA_QUESTIONS, EASY),
    ("cm_mix_oa_mix", ALL_KINDS, EASY),
    ("cm_mix_hard_oa_mix", ALL_KINDS, HARD),
]

# negative-policy grid: each object question trained alone, easy vs hard
TABLE2 = [(f"{kind}_{policy}", [kind], policy)
          for kind in OA_QUESTIONS for policy in (EASY, HARD)]

GRIDS = {"paper-table1": TABLE1, "paper-table2": TABLE2}


def variant_config(base, name, kinds, policy, seed, out_root, eval_kinds):
    cfg = RunConfig(
        seed=seed,
        out=os.path.join(out_root, name, f"seed{seed}"),
        eval_split=base.eval_split,
        corpus=dict(base.corpus),
        tasks=dict(base.tasks),
        weights=[],
        schedule=dict(base.schedule),
        model=dict(base.model),
        train=dict(base.train),
    )
    cfg.tasks["kinds"] = list(kinds)
    cfg.tasks["policy"] = policy
    cfg.train["eval_kinds"] = list(eval_kinds)
    cfg.source_text = render_config(cfg)
    return cfg


def variant_metrics(report):
    """Flat metric dict from a stored eval report."""
    per = report["per_task"]
    out = {"overall_em": report["overall"]["exact_match"]}
    for kind, row in per.items():
        out[f"em.{kind}"] = row["exact_match"]
    cm = [per[k]["exact_match"] for k in ("completion", "itm", "mlm") if k in per]
    oa = [per[k]["exact_match"] for k in OA_LIST + OA_QUESTIONS if k in per]
    if cm:
        out["cm_em"] = sum(cm) / len(cm)
    if oa:
        out["oa_em"] = sum(oa) / len(oa)
    if "caption" in per and "cider" in per["caption"]:
        out["caption_cider"] = per["caption"]["cider"]
    return out


def _run_one(job):
    """Worker for one (variant, seed) cell; never raises, marks failures."""
    name, seed, cfg = job
    try:
        if not run_complete(cfg.out, cfg.source_text):
            run_training(cfg)
        return name, seed, None, variant_metrics(load_run_report(cfg.out))
    except Exception as e:  # a failed cell must not sink the grid
        return name, seed, f"{type(e).__name__}: {e}", None


def run_grid(grid, base, out_root, seeds=(0, 1, 2), jobs=1, eval_kinds=None, log=None):
    """Execute a grid spec [(name, kinds, policy), ...].  Returns the summary
    structure that also lands in summary.json / summary.csv."""
    say = log or (lambda msg: None)
    if isinstance(grid, str):
        grid = GRIDS[grid]
    eval_kinds = list(eval_kinds) if eval_kinds else ALL_KINDS
    os.makedirs(out_root, exist_ok=True)

    jobs_list = [
        (name, seed, variant_config(base, name, kinds, policy, seed, out_root, eval_kinds))
        for name, kinds, policy in grid for seed in seeds
    ]
    say(f"{len(grid)} variants x {len(seeds)} seeds = {len(jobs_list)} runs, jobs={jobs}")
    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            results = pool.map(_run_one, jobs_list)
    else:
        results = []
        for job in jobs_list:
            results.append(_run_one(job))
            name, seed, err, _ = results[-1]
            say(f"  {name} seed{seed}: {'FAILED ' + err if err else 'done'}")

    variants = {}
    for (name, kinds, policy) in grid:
        variants[name] = {"kinds": list(kinds), "policy": policy,
                          "seeds": {}, "status": "ok", "aggregate": {}}
    for name, seed, err, metrics in results:
        variants[name]["seeds"][str(seed)] = {"error": err} if err else metrics
        if err:
            variants[name]["status"] = "failed"
    for name, v in variants.items():
        rows = [m for m in v["seeds"].values() if "error" not in m]
        keys = sorted({k for m in rows for k in m})
        for k in keys:
            vals = [m[k] for m in rows if k in m]
            v["aggregate"][k] = {"mean": statistics.fmean(vals),
                                 "std": statistics.pstdev(vals) if len(vals) > 1 else 0.0}

    summary = {"grid": [[n, v["kinds"], v["policy"]] for n, v in variants.items()],
               "seeds": list(seeds), "eval_kinds": eval_kinds, "variants": variants}
    with open(os.path.join(out_root, "summary.json"), "w") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
    _write_csv(grid, variants, out_root)
    return summary


_T1_COLUMNS = ["overall_em", "cm_em", "oa_em", "caption_cider"]


def _write_csv(grid, variants, out_root):
    path = os.path.join(out_root, "summary.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "kinds", "policy", "status"]
                   + [f"{c}_{s}" for c in _T1_COLUMNS for s in ("mean", "std")])
        for name, _, _ in grid:
            v = variants[name]
            row = [name, "+".join(v["kinds"]), v["policy"], v["status"]]
            for c in _T1_COLUMNS:
                agg = v["aggregate"].get(c)
                row += ["", ""] if agg is None else [f"{agg['mean']:.4f}", f"{agg['std']:.4f}"]
            w.writerow(row)


def easy_hard_matrix(variants):
    """Fold <task>_<policy> variants into rows: task -> policy -> own-task EM."""
    matrix = {}
    for name, v in variants.items():
        for policy in (EASY, HARD):
            if name.endswith("_" + policy):
                task = name[: -len(policy) - 1]
                agg = v["aggregate"].get(f"em.{task}")
                matrix.setdefault(task, {})[policy] = {
                    "mean": agg["mean"] if agg else None,
                    "std": agg["std"] if agg else None,
                    "status": v["status"],
                }
    return matrix


def write_easy_hard_csv(matrix, out_root):
    path = os.path.join(out_root, "easy_hard.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "easy_mean", "easy_std", "hard_mean", "hard_std", "status"])
        for task in sorted(matrix):
            cells = matrix[task]
            status = "ok" if all(c["status"] == "ok" for c in cells.values()) else "failed"
            row = [task]
            for policy in (EASY, HARD):
                c = cells.get(policy)
                if c and c["mean"] is not None:
                    row += [f"{c['mean']:.4f}", f"{c['std']:.4f}"]
                else:
                    row += ["", ""]
            w.writerow(row + [status])
    return path
