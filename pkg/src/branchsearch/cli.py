"""Command-line front end tying the pipeline together.

Commands: search, ems-fit, ems-rank, random-corpus, train-one, metrics-dump.
Exit codes: 0 success, 1 validation failure, 2 runtime failure. Every output
file carries a schema version; given the same config and seeds, every
command writes byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from . import ems
from .bohb import (AllTrialsDiverged, SearchSpace, _jsonable, hyperband_brackets,
                   run_search)
from .config import ConfigError, RunConfig, load_config
from .losses import AdvMode
from .metrics import METRIC_NAMES
from .network import BranchConfig
from .trainer import TrialSpec, run_trial, true_target_accuracy

REPORT_SCHEMA_VERSION = 1
RANKING_SCHEMA_VERSION = 1
ANALYSIS_SCHEMA_VERSION = 1

# debugging default mirrors the branch the searched space is centered on
BASELINE_BRANCH = dict(lam=1.0, dropout_p=0.5, n_fc_layers=2, fc_h=1024, fc_b=512)


def _make_trainer(pair, cfg: RunConfig):
    s = cfg.search

    def trainer(branch_cfg, budget, seed):
        spec = TrialSpec(
            config=branch_cfg, mode=s.mode, budget=budget, pair=pair,
            schedule=cfg.schedule, snapshot_every=s.snapshot_every,
            max_budget=s.max_budget, seed=seed, feature_dim=s.feature_dim,
            dann_form=s.dann_form,
        )
        return run_trial(spec)

    return trainer


def _branch_override(args) -> BranchConfig:
    return BranchConfig(
        lam=args.lam if args.lam is not None else BASELINE_BRANCH["lam"],
        dropout_p=args.dropout if args.dropout is not None else BASELINE_BRANCH["dropout_p"],
        n_fc_layers=args.n_fc if args.n_fc is not None else BASELINE_BRANCH["n_fc_layers"],
        fc_h=args.fc_h if args.fc_h is not None else BASELINE_BRANCH["fc_h"],
        fc_b=args.fc_b if args.fc_b is not None else BASELINE_BRANCH["fc_b"],
    )


def _run_single(args):
    cfg = load_config(args.config)
    pair = cfg.data.build_pair()
    branch = _branch_override(args)
    budget = args.budget or cfg.search.max_budget
    seed = args.seed if args.seed is not None else cfg.search.seed
    spec = TrialSpec(
        config=branch, mode=cfg.search.mode, budget=budget, pair=pair,
        schedule=cfg.schedule, snapshot_every=cfg.search.snapshot_every,
        max_budget=max(budget, cfg.search.max_budget), seed=seed,
        feature_dim=cfg.search.feature_dim, dann_form=cfg.search.dann_form,
    )
    return cfg, pair, run_trial(spec)


def cmd_search(args) -> int:
    cfg = load_config(args.config)
    if not cfg.regressor_path:
        raise ConfigError("no [ems] regressor_path configured; "
                          "fit one with `branchsearch ems-fit` first")
    if not os.path.exists(cfg.regressor_path):
        raise ConfigError(f"regressor not found at {cfg.regressor_path}; "
                          "fit one with `branchsearch ems-fit` first")
    with open(cfg.regressor_path) as f:
        estimator = ems.EmsPair.from_json(f.read())

    pair = cfg.data.build_pair()
    out_dir = args.out or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    s = cfg.search
    floor = 1.0 / pair.k + s.divergence_eps

    t0 = time.perf_counter()
    result = run_search(
        cfg.space, _make_trainer(pair, cfg), estimator,
        s.rounds, s.parallelism, s.seed,
        min_budget=s.min_budget, max_budget=s.max_budget, eta=s.eta,
        random_fraction=s.random_fraction, good_quantile=s.good_quantile,
        source_acc_floor=floor, ledger_path=os.path.join(out_dir, "ledger.jsonl"),
    )
    elapsed = time.perf_counter() - t0

    # report-only ground truth, computed after the search released the seal
    labels = pair.labels_for_evaluation()
    true_accs = true_target_accuracy(result.best.record.history, labels)

    plan = [{"bracket": b.s, "budgets": list(b.budgets), "counts": list(b.counts)}
            for b in hyperband_brackets(s.min_budget, s.max_budget, s.eta)]
    n_diverged = sum(1 for t in result.trials if t.status == "diverged")
    report = {
        "schema": REPORT_SCHEMA_VERSION,
        "mode": s.mode.value,
        "seed": s.seed,
        "bracket_plan": plan,
        "n_trials": len(result.trials),
        "n_diverged": n_diverged,
        "best_trial_id": result.best.trial_id,
        "best_config": asdict(result.best.config),
        "best_budget": result.best.budget,
        "best_epoch": result.best_epoch,
        "ems_score": result.best.ems_score,
        "true_target_accuracy_report_only": {
            "note": "ground truth revealed after the search finished; "
                    "never used during search",
            "per_epoch": [float(a) for a in true_accs],
            "at_best_epoch": float(true_accs[result.best_epoch]),
        },
    }
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as f:
        json.dump(_jsonable(report), f, indent=2, sort_keys=True)
        f.write("\n")

    print(f"trials: {len(result.trials)} ({n_diverged} diverged)")
    print(f"best config: {asdict(result.best.config)}")
    print(f"best trial {result.best.trial_id} (budget {result.best.budget}), "
          f"snapshot {result.best_epoch}, ems score {result.best.ems_score:.4f}")
    print(f"true target accuracy (report-only): {true_accs[result.best_epoch]:.4f}")
    print(f"wrote {report_path} and ledger.jsonl in {elapsed:.1f}s")
    return 0


def _correlation_table(report: dict) -> str:
    lines = [f"{'metric':<18} {'pearson':>9} {'spearman':>9}"]
    for name, row in report.items():
        if name in ("in_sample", "corpus"):
            continue
        lines.append(f"{name:<18} {row['pearson']:>9.4f} {row['spearman']:>9.4f}")
    return "\n".join(lines)


def cmd_ems_fit(args) -> int:
    dataset = ems.SnapshotDataset.read_csv(args.corpus)
    features = tuple(args.features.split(",")) if args.features else ems.DEFAULT_FEATURES
    unknown = [f for f in features if f not in METRIC_NAMES]
    if unknown:
        raise ConfigError(f"unknown metric features: {unknown}")
    pair_reg = ems.fit_pair(dataset, features)
    with open(args.out, "w") as f:
        f.write(pair_reg.to_json())
        f.write("\n")

    if args.eval_corpus:
        eval_ds = ems.SnapshotDataset.read_csv(args.eval_corpus)
        report = ems.correlation_report(pair_reg, eval_ds)
        report["in_sample"] = False
        report["corpus"] = eval_ds.corpus_id
    else:
        acc = dataset.accuracy
        report = {}
        for name in METRIC_NAMES:
            col = dataset.column(name)
            ok = np.isfinite(col)
            report[name] = {
                "pearson": ems.pearson(col[ok], acc[ok]) if ok.sum() >= 3 else math.nan,
                "spearman": ems.spearman(col[ok], acc[ok]) if ok.sum() >= 3 else math.nan,
            }
        scores = pair_reg.cross_run.score_rows(dataset.features)
        report["ensemble"] = {"pearson": ems.pearson(scores, acc),
                              "spearman": ems.spearman(scores, acc)}
        report["in_sample"] = True
        report["corpus"] = dataset.corpus_id

    report_path = args.report or args.out + ".correlations.json"
    with open(report_path, "w") as f:
        json.dump(_jsonable({"schema": REPORT_SCHEMA_VERSION, **report}), f,
                  indent=2, sort_keys=True)
        f.write("\n")
    print(f"fit on {dataset.corpus_id} ({len(dataset)} rows), "
          f"features: {', '.join(pair_reg.within_run.feature_names)}")
    if pair_reg.within_run.dropped:
        print(f"dropped: {', '.join(pair_reg.within_run.dropped)}")
    print(_correlation_table(report))
    print(f"wrote {args.out} and {report_path}")
    return 0


def cmd_ems_rank(args) -> int:
    dataset = ems.SnapshotDataset.read_csv(args.corpus)
    with open(args.regressor) as f:
        pair_reg = ems.EmsPair.from_json(f.read())

    runs = {}
    for i, tid in enumerate(dataset.trial_ids):
        runs.setdefault(tid, []).append(i)
    if not runs:
        raise ConfigError(f"{args.corpus} has no rows")

    cross = pair_reg.cross_run.score_rows(dataset.features)
    within = pair_reg.within_run.score_rows(dataset.features)
    epochs = np.asarray(dataset.epochs)
    rows = []
    for tid, idx in runs.items():
        idx = np.array(idx)
        pick = idx[int(np.argmax(within[idx]))]
        newest = idx[int(np.argmax(epochs[idx]))]
        rows.append({
            "trial_id": tid,
            "ems_score": float(cross[newest]),
            "best_epoch": int(dataset.epochs[pick]),
            "true_acc_at_pick": float(dataset.accuracy[pick]),
        })
    rows.sort(key=lambda r: -r["ems_score"])

    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"#schema={RANKING_SCHEMA_VERSION}", f"corpus={dataset.corpus_id}"])
            w.writerow(["rank", "trial_id", "ems_score", "best_epoch", "true_acc_at_pick"])
            for rank, r in enumerate(rows, 1):
                w.writerow([rank, r["trial_id"], repr(r["ems_score"]),
                            r["best_epoch"], repr(r["true_acc_at_pick"])])

    print(f"{'rank':<5} {'trial':<12} {'ems score':>10} {'epoch':>6} {'true acc':>9}")
    for rank, r in enumerate(rows[:args.top], 1):
        print(f"{rank:<5} {r['trial_id']:<12} {r['ems_score']:>10.4f} "
              f"{r['best_epoch']:>6} {r['true_acc_at_pick']:>9.4f}")
    if len(rows) >= 3:
        rho = ems.spearman([r["ems_score"] for r in rows],
                           [r["true_acc_at_pick"] for r in rows])
        print(f"spearman(ems score, true acc at pick) = {rho:.4f}")
    return 0


def _sensitivity_rows(configs, best_accs):
    """Mean/std of per-run best accuracy grouped by each parameter's value;
    lambda and dropout group by quartile bins of their sampled values."""
    rows = []
    by_param = {
        "n_fc_layers": [c.n_fc_layers for c in configs],
        "fc_h": [c.fc_h for c in configs],
        "fc_b": [c.fc_b for c in configs],
    }
    accs = np.asarray(best_accs)
    for param, values in by_param.items():
        for v in sorted(set(values)):
            mask = np.array([x == v for x in values])
            rows.append((param, str(v), int(mask.sum()),
                         float(accs[mask].mean()), float(accs[mask].std())))
    for param, values in (("lambda", np.array([c.lam for c in configs])),
                          ("dropout_p", np.array([c.dropout_p for c in configs]))):
        edges = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0])
        for lo, hi in zip(edges[:-1], edges[1:]):
            mask = (values >= lo) & (values <= hi) if hi == edges[-1] \
                else (values >= lo) & (values < hi)
            if mask.any():
                rows.append((param, f"[{lo:.4g},{hi:.4g}]", int(mask.sum()),
                             float(accs[mask].mean()), float(accs[mask].std())))
    return rows


def cmd_random_corpus(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    cfg = load_config(args.config)
    pair = cfg.data.build_pair()
    s = cfg.search
    budget = args.budget or s.max_budget

    rng = np.random.default_rng(np.random.SeedSequence([s.seed, 0xC0]))
    configs = [cfg.space.sample_uniform(rng) for _ in range(args.n)]
    trainer = _make_trainer(pair, cfg)
    seeds = [int(np.random.SeedSequence([s.seed, 0xC0, i]).generate_state(1)[0])
             for i in range(args.n)]

    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=s.parallelism) as pool:
        futures = [pool.submit(trainer, c, budget, sd)
                   for c, sd in zip(configs, seeds)]
        records = [f.result() for f in futures]
    elapsed = time.perf_counter() - t0

    corpus_id = args.corpus_id or cfg.data.corpus_id()
    trial_ids = [f"rc{i}" for i in range(args.n)]
    dataset = ems.dataset_from_records(corpus_id, trial_ids, records)
    dataset.write_csv(args.out)

    stem = args.out[:-4] if args.out.endswith(".csv") else args.out
    kept = [(tid, r) for tid, r in zip(trial_ids, records)
            if not r.diverged and r.true_accs]
    with open(stem + "_hist.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"#schema={ANALYSIS_SCHEMA_VERSION}", f"corpus={corpus_id}"])
        w.writerow(["trial_id", "final_true_acc", "best_true_acc"])
        for tid, r in kept:
            w.writerow([tid, repr(float(r.true_accs[-1])), repr(float(max(r.true_accs)))])

    with open(stem + "_sensitivity.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"#schema={ANALYSIS_SCHEMA_VERSION}", f"corpus={corpus_id}"])
        w.writerow(["param", "value", "n", "mean_best_acc", "std_best_acc"])
        kept_cfgs = [configs[trial_ids.index(tid)] for tid, _ in kept]
        best_accs = [max(r.true_accs) for _, r in kept]
        if kept:
            for row in _sensitivity_rows(kept_cfgs, best_accs):
                w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4])])

    n_div = sum(1 for r in records if r.diverged)
    if kept:
        finals = [r.true_accs[-1] for _, r in kept]
        print(f"{args.n} configs at budget {budget}: {len(kept)} completed, "
              f"{n_div} diverged; final true acc "
              f"{min(finals):.3f}..{max(finals):.3f} in {elapsed:.1f}s")
    else:
        print(f"{args.n} configs at budget {budget}: all diverged ({elapsed:.1f}s)")
    print(f"wrote {args.out}, {stem}_hist.csv, {stem}_sensitivity.csv")
    return 0


def _snapshot_table(record) -> str:
    cols = ["iter"] + list(METRIC_NAMES) + (["true_acc"] if record.true_accs else [])
    lines = ["  ".join(f"{c:>10}" for c in cols)]
    for e, snap in enumerate(record.snapshots):
        vals = [f"{record.snapshot_iters[e]:>10}"]
        d = snap.as_dict()
        vals += [f"{d[m]:>10.4f}" for m in METRIC_NAMES]
        if record.true_accs:
            vals.append(f"{record.true_accs[e]:>10.4f}")
        lines.append("  ".join(vals))
    return "\n".join(lines)


def cmd_train_one(args) -> int:
    cfg, pair, record = _run_single(args)
    print(f"config: {asdict(record.config)}")
    print(f"mode {record.mode.value}, budget {record.budget} "
          f"(schedule over {record.max_budget}), seed {record.seed}")
    if record.diverged:
        print(f"DIVERGED after {record.completed_iters} iterations")
    if record.snapshots:
        print(_snapshot_table(record))
    print(f"wall time {record.wall_time:.1f}s")
    return 0


def cmd_metrics_dump(args) -> int:
    cfg, pair, record = _run_single(args)
    dataset = ems.dataset_from_records(cfg.data.corpus_id(), [args.trial_id], [record])
    dataset.write_csv(args.out)
    print(f"wrote {len(dataset)} snapshot rows to {args.out}")
    if record.diverged:
        print(f"note: trial diverged after {record.completed_iters} iterations")
    return 0


class _Parser(argparse.ArgumentParser):
    # validation failures exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_branch_flags(p):
    p.add_argument("--lam", type=float, default=None, help="domain loss weight")
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--n-fc", type=int, default=None, dest="n_fc")
    p.add_argument("--fc-h", type=int, default=None, dest="fc_h")
    p.add_argument("--fc-b", type=int, default=None, dest="fc_b")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="branchsearch",
                     description="budgeted architecture search for adversarial "
                                 "branches, scored without target labels")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", parents=[], help="run the full search loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory override")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("ems-fit", help="fit the metric-ensemble regressor on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", default=None, help="comma-separated metric names")
    p.add_argument("--eval-corpus", default=None, dest="eval_corpus")
    p.add_argument("--report", default=None, help="correlation report path")
    p.set_defaults(func=cmd_ems_fit)

    p = sub.add_parser("ems-rank", help="rank a corpus's runs by ensemble score")
    p.add_argument("--corpus", required=True)
    p.add_argument("--regressor", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_ems_rank)

    p = sub.add_parser("random-corpus", help="train uniformly sampled configs "
                                             "and dump their snapshot metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--corpus-id", default=None, dest="corpus_id")
    p.set_defaults(func=cmd_random_corpus)

    p = sub.add_parser("train-one", help="run a single trial and print snapshots")
    p.add_argument("--config", required=True)
    _add_branch_flags(p)
    p.set_defaults(func=cmd_train_one)

    p = sub.add_parser("metrics-dump", help="run one trial and write its "
                                            "snapshot rows as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trial-id", default="t0", dest="trial_id")
    _add_branch_flags(p)
    p.set_defaults(func=cmd_metrics_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except AllTrialsDiverged as e:
        print(f"search failed: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
