"""Single-trial runner: trains one network on one domain pair for a budget.

Each iteration draws one source and one target batch with replacement,
builds the combined objective, and applies a momentum-SGD step whose
learning rate and reversal coefficient follow progress p = iter/max_budget.
Using max_budget as the denominator means a short trial walks the same
schedule prefix it would at full budget, so re-trained promotions are
consistent.

Snapshots taken every ``snapshot_every`` iterations (and always at the end)
record the label-free metrics plus the hard target predictions; the
pseudo-label agreement column is filled in retroactively once the run ends.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import AdvMode, Batch, total_loss
from .metrics import SnapshotMetrics, compute_snapshot, pseudo_label_accuracy
from .network import BranchConfig, TrainSchedule, build_network, sgd_step
from .synthdata import DomainPair

DEFAULT_FEATURE_DIM = 16


@dataclass(frozen=True)
class TrialSpec:
    config: BranchConfig
    mode: AdvMode
    budget: int
    pair: DomainPair
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    snapshot_every: int = 0
    max_budget: int = 0
    seed: int = 0
    feature_dim: int = DEFAULT_FEATURE_DIM
    dann_form: str = "log"

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        mb = self.max_budget or self.budget
        if mb < self.budget:
            raise ValueError("max_budget smaller than budget")
        se = self.snapshot_every or max(1, self.budget // 20)
        object.__setattr__(self, "max_budget", mb)
        object.__setattr__(self, "snapshot_every", se)
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")


@dataclass
class TrialRecord:
    """Everything a finished trial reports.

    ``wall_time`` is bookkeeping for humans and stays out of any
    deterministic serialization; ``true_accs`` is filled only when the pair's
    evaluation labels are reachable (never inside a sealed search).
    """

    config: BranchConfig
    mode: AdvMode
    budget: int
    max_budget: int
    seed: int
    diverged: bool
    completed_iters: int
    snapshot_iters: list
    snapshots: list
    history: np.ndarray
    wall_time: float = 0.0
    true_accs: list | None = None

    def n_snapshots(self):
        return len(self.snapshots)


def true_target_accuracy(history, labels) -> np.ndarray:
    """Per-epoch accuracy of recorded predictions against evaluation labels."""
    history = np.asarray(history)
    labels = np.asarray(labels)
    return (history == labels[:, None]).mean(axis=0)


def run_trial(spec: TrialSpec) -> TrialRecord:
    t0 = time.perf_counter()
    pair = spec.pair
    k = pair.k
    out_dim = 1 if spec.mode is AdvMode.DANN else k

    root = np.random.SeedSequence(spec.seed)
    init_ss, batch_ss = root.spawn(2)
    net = build_network(spec.config, pair.dims, spec.feature_dim, k, out_dim, init_ss)
    rng = np.random.default_rng(batch_ss)

    n_s = pair.source_x.shape[0]
    n_t = pair.target_x.shape[0]
    bs = spec.schedule.batch_size

    snapshot_iters: list[int] = []
    snapshots: list[SnapshotMetrics] = []
    history_cols: list[np.ndarray] = []
    diverged = False
    completed = 0

    for t in range(spec.budget):
        p = t / spec.max_budget
        idx_s = rng.integers(0, n_s, size=bs)
        idx_t = rng.integers(0, n_t, size=bs)
        batch = Batch(pair.source_x[idx_s], pair.source_y[idx_s], pair.target_x[idx_t])
        loss, nv = total_loss(batch, net, spec.config, spec.mode, p,
                              spec.schedule, rng, spec.dann_form)
        if not np.isfinite(loss.value):
            diverged = True
            break
        ad.backward(loss)
        sgd_step(net, nv.grads(), spec.schedule, p)
        completed = t + 1

        if completed % spec.snapshot_every == 0 or completed == spec.budget:
            probs_t, feats_t = net.predict(pair.target_x)
            probs_s, _ = net.predict(pair.source_x)
            snapshots.append(compute_snapshot(probs_t, feats_t, probs_s, pair.source_y))
            history_cols.append(np.argmax(probs_t, axis=1).astype(np.int64))
            snapshot_iters.append(completed)

    if history_cols:
        history = np.stack(history_cols, axis=1)
        for snap, acc in zip(snapshots, pseudo_label_accuracy(history)):
            snap.pseudo_label_acc = float(acc)
    else:
        history = np.zeros((n_t, 0), dtype=np.int64)

    record = TrialRecord(
        config=spec.config, mode=spec.mode, budget=spec.budget,
        max_budget=spec.max_budget, seed=spec.seed, diverged=diverged,
        completed_iters=completed, snapshot_iters=snapshot_iters,
        snapshots=snapshots, history=history,
    )
    if history.shape[1]:
        try:
            labels = pair.labels_for_evaluation()
        except RuntimeError:
            labels = None
        if labels is not None:
            record.true_accs = [float(a) for a in true_target_accuracy(history, labels)]
    record.wall_time = time.perf_counter() - t0
    return record
