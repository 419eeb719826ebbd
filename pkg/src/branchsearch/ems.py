"""Linear metric-ensemble scorer for ranking trained models without labels.

A least-squares regressor maps the standardized per-snapshot metric vector to
true target accuracy on a corpus from one task, then transfers unchanged to
rank runs and snapshots on another task. Two variants are always fitted
together: the cross-run one leaves out the pseudo-label agreement feature
(that metric only orders snapshots within a single run), the within-run one
includes it.

Scores are ranking quantities. They are never reported as accuracies.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .metrics import METRIC_NAMES, SnapshotMetrics

DEFAULT_FEATURES = (
    "entropy",
    "diversity",
    "silhouette",
    "calinski",
    "source_acc",
    "pseudo_label_acc",
)
CROSS_RUN_EXCLUDED = "pseudo_label_acc"

DATASET_SCHEMA_VERSION = 1
REGRESSOR_SCHEMA_VERSION = 1

CSV_COLUMNS = ("trial_id", "epoch") + METRIC_NAMES + ("true_acc",)


@dataclass
class SnapshotDataset:
    """Rows of per-snapshot metrics with their true target accuracy."""

    corpus_id: str
    trial_ids: list
    epochs: list
    features: np.ndarray  # (n_rows, len(METRIC_NAMES)) in METRIC_NAMES order
    accuracy: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        n = self.features.shape[0]
        if not (len(self.trial_ids) == len(self.epochs) == n == self.accuracy.shape[0]):
            raise ValueError("dataset column lengths differ")
        if self.features.shape[1] != len(METRIC_NAMES):
            raise ValueError(f"expected {len(METRIC_NAMES)} feature columns")

    def __len__(self):
        return self.features.shape[0]

    def column(self, name):
        return self.features[:, METRIC_NAMES.index(name)]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"#schema={DATASET_SCHEMA_VERSION}", f"corpus={self.corpus_id}"])
            w.writerow(CSV_COLUMNS)
            for i in range(len(self)):
                row = [self.trial_ids[i], str(self.epochs[i])]
                row += [repr(float(v)) for v in self.features[i]]
                row.append(repr(float(self.accuracy[i])))
                w.writerow(row)

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as f:
            r = csv.reader(f)
            head = next(r)
            if not head or not head[0].startswith("#schema="):
                raise ValueError(f"{path}: missing schema header")
            if int(head[0].split("=", 1)[1]) != DATASET_SCHEMA_VERSION:
                raise ValueError(f"{path}: unsupported schema {head[0]}")
            corpus = head[1].split("=", 1)[1] if len(head) > 1 else ""
            cols = tuple(next(r))
            if cols != CSV_COLUMNS:
                raise ValueError(f"{path}: unexpected columns {cols}")
            trial_ids, epochs, feats, accs = [], [], [], []
            for row in r:
                trial_ids.append(row[0])
                epochs.append(int(row[1]))
                feats.append([float(v) for v in row[2:2 + len(METRIC_NAMES)]])
                accs.append(float(row[2 + len(METRIC_NAMES)]))
        return cls(corpus, trial_ids, epochs, np.array(feats).reshape(len(accs), -1)
                   if accs else np.zeros((0, len(METRIC_NAMES))), np.array(accs))


def dataset_from_records(corpus_id, trial_ids, records) -> SnapshotDataset:
    """Flatten completed trial records (with true_accs filled) into rows."""
    ids, epochs, feats, accs = [], [], [], []
    for tid, rec in zip(trial_ids, records):
        if rec.diverged or rec.true_accs is None:
            continue
        for e, snap in enumerate(rec.snapshots):
            ids.append(str(tid))
            epochs.append(e)
            feats.append([snap.as_dict()[name] for name in METRIC_NAMES])
            accs.append(rec.true_accs[e])
    feats_arr = np.array(feats) if feats else np.zeros((0, len(METRIC_NAMES)))
    return SnapshotDataset(corpus_id, ids, epochs, feats_arr, np.array(accs))


@dataclass(frozen=True)
class EmsRegressor:
    """Frozen linear scorer: standardize with fit-corpus stats, dot, shift."""

    feature_names: tuple
    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray
    bias: float
    trained_on: str
    rank_deficient: bool = False
    dropped: tuple = ()
    r2: float = math.nan

    def score(self, metrics) -> float:
        """Ranking score for one snapshot. NaN features impute to the
        fit-corpus mean; absent features are an error."""
        if isinstance(metrics, SnapshotMetrics):
            metrics = metrics.as_dict()
        z = np.empty(len(self.feature_names))
        for i, name in enumerate(self.feature_names):
            if name not in metrics:
                raise ValueError(f"metric {name!r} missing and not imputable")
            v = metrics[name]
            z[i] = 0.0 if not math.isfinite(v) else (v - self.means[i]) / self.stds[i]
        return float(z @ self.weights + self.bias)

    def score_rows(self, features, names=METRIC_NAMES) -> np.ndarray:
        """Vectorized scoring of a (n, len(names)) raw feature matrix."""
        cols = [names.index(n) for n in self.feature_names]
        x = np.asarray(features, dtype=np.float64)[:, cols]
        z = (x - self.means[None, :]) / self.stds[None, :]
        z[~np.isfinite(z)] = 0.0
        return z @ self.weights + self.bias

    def to_json(self) -> str:
        payload = {
            "schema": REGRESSOR_SCHEMA_VERSION,
            "feature_names": list(self.feature_names),
            "means": [float(v) for v in self.means],
            "stds": [float(v) for v in self.stds],
            "weights": [float(v) for v in self.weights],
            "bias": float(self.bias),
            "trained_on": self.trained_on,
            "rank_deficient": self.rank_deficient,
            "dropped": list(self.dropped),
            "r2": None if not math.isfinite(self.r2) else float(self.r2),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("schema") != REGRESSOR_SCHEMA_VERSION:
            raise ValueError(f"unsupported regressor schema {d.get('schema')}")
        return cls(
            feature_names=tuple(d["feature_names"]),
            means=np.array(d["means"]),
            stds=np.array(d["stds"]),
            weights=np.array(d["weights"]),
            bias=d["bias"],
            trained_on=d["trained_on"],
            rank_deficient=d["rank_deficient"],
            dropped=tuple(d["dropped"]),
            r2=math.nan if d["r2"] is None else d["r2"],
        )


def fit(dataset: SnapshotDataset, feature_subset=DEFAULT_FEATURES) -> EmsRegressor:
    """Ordinary least squares of true accuracy on standardized metrics.

    Constant or all-NaN features are dropped with a warning; NaN entries
    impute to the per-feature finite mean. A rank-deficient design falls back
    to the minimum-norm solution and flags the result.
    """
    if len(dataset) < 2:
        raise ValueError("need at least 2 rows to fit")
    y = dataset.accuracy
    if y.min() < 0.0 or y.max() > 1.0:
        raise ValueError("accuracy targets must lie in [0,1]")

    names, means, stds, cols = [], [], [], []
    dropped = []
    for name in feature_subset:
        col = dataset.column(name)
        finite = np.isfinite(col)
        if not finite.any():
            dropped.append(name)
            continue
        m = float(col[finite].mean())
        s = float(col[finite].std())
        if s < 1e-12:
            dropped.append(name)
            continue
        filled = np.where(finite, col, m)
        names.append(name)
        means.append(m)
        stds.append(s)
        cols.append((filled - m) / s)
    if dropped:
        warnings.warn(f"dropped constant or empty features: {dropped}", stacklevel=2)
    if not names:
        raise ValueError("no usable features left after dropping constants")

    z = np.stack(cols, axis=1)
    a = np.concatenate([z, np.ones((z.shape[0], 1))], axis=1)
    rank_deficient = bool(np.linalg.matrix_rank(a) < a.shape[1])
    if rank_deficient:
        coef = np.linalg.lstsq(a, y, rcond=None)[0]
    else:
        g = a.T @ a
        try:
            coef = np.linalg.solve(g, a.T @ y)
        except np.linalg.LinAlgError:
            coef = np.linalg.solve(g + 1e-8 * np.eye(g.shape[0]), a.T @ y)

    pred = a @ coef
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan

    return EmsRegressor(
        feature_names=tuple(names), means=np.array(means), stds=np.array(stds),
        weights=coef[:-1], bias=float(coef[-1]), trained_on=dataset.corpus_id,
        rank_deficient=rank_deficient, dropped=tuple(dropped), r2=r2,
    )


@dataclass(frozen=True)
class EmsPair:
    """The two regressor variants fitted on one corpus."""

    within_run: EmsRegressor  # all features, pseudo-label agreement included
    cross_run: EmsRegressor   # same minus the pseudo-label feature

    def score_run(self, snapshots) -> float:
        return run_score(self, snapshots)

    def pick_epoch(self, snapshots) -> int:
        return best_epoch(self, snapshots)

    def to_json(self) -> str:
        return json.dumps({
            "schema": REGRESSOR_SCHEMA_VERSION,
            "within_run": json.loads(self.within_run.to_json()),
            "cross_run": json.loads(self.cross_run.to_json()),
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            within_run=EmsRegressor.from_json(json.dumps(d["within_run"])),
            cross_run=EmsRegressor.from_json(json.dumps(d["cross_run"])),
        )


def fit_pair(dataset: SnapshotDataset, feature_subset=DEFAULT_FEATURES) -> EmsPair:
    cross_features = tuple(n for n in feature_subset if n != CROSS_RUN_EXCLUDED)
    return EmsPair(
        within_run=fit(dataset, feature_subset),
        cross_run=fit(dataset, cross_features),
    )


def run_score(pair: EmsPair, snapshots) -> float:
    """Cross-run score of a run: the score of its newest snapshot.

    Runs compare by the model state they would carry forward (or deliver),
    using the variant without the pseudo-label feature so runs are comparable
    to each other. Scoring the newest state rather than the best-looking
    snapshot keeps the near-uniform predictions every run starts from out of
    the ranking.
    """
    if not snapshots:
        return -math.inf
    return pair.cross_run.score(snapshots[-1])


def best_epoch(pair: EmsPair, snapshots) -> int:
    """Within-run best snapshot index, full feature set."""
    if not snapshots:
        raise ValueError("no snapshots to choose from")
    scores = [pair.within_run.score(s) for s in snapshots]
    return int(np.argmax(scores))


def select_best(pair: EmsPair, trials):
    """Pick (trial index, epoch index): runs ranked by the cross-run score,
    the chosen run's epoch by the within-run score."""
    scored = [(i, run_score(pair, t.snapshots)) for i, t in enumerate(trials)
              if t.snapshots and not getattr(t, "diverged", False)]
    if not scored:
        raise ValueError("no completed trials to select from")
    best_i = max(scored, key=lambda s: (s[1], -s[0]))[0]
    return best_i, best_epoch(pair, trials[best_i].snapshots)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc ** 2).sum() * (yc ** 2).sum())
    if denom == 0.0:
        return math.nan
    return float((xc * yc).sum() / denom)


def rankdata(x) -> np.ndarray:
    """Average ranks, 1-based, ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.shape[0])
    i = 0
    while i < x.shape[0]:
        j = i
        while j + 1 < x.shape[0] and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    return pearson(rankdata(x), rankdata(y))


def correlation_report(pair: EmsPair, dataset: SnapshotDataset) -> dict:
    """Per-metric and ensemble Pearson/Spearman against true accuracy.

    Refuses a corpus the regressor was fit on; rows with a NaN metric are
    excluded pairwise for that metric's correlations.
    """
    if len(dataset) < 3:
        raise ValueError("need at least 3 rows for correlations")
    if dataset.corpus_id and dataset.corpus_id == pair.cross_run.trained_on:
        raise ValueError("evaluation corpus must differ from the fit corpus")
    acc = dataset.accuracy
    report = {}
    for name in METRIC_NAMES:
        col = dataset.column(name)
        ok = np.isfinite(col)
        if ok.sum() < 3:
            report[name] = {"pearson": math.nan, "spearman": math.nan}
            continue
        report[name] = {
            "pearson": pearson(col[ok], acc[ok]),
            "spearman": spearman(col[ok], acc[ok]),
        }
    ens = pair.cross_run.score_rows(dataset.features)
    report["ensemble"] = {"pearson": pearson(ens, acc), "spearman": spearman(ens, acc)}
    return report
