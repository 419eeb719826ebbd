"""Multi-fidelity search over branch configurations.

Hyperband brackets schedule trials across budgets with successive halving at
eta; a density-ratio surrogate proposes configurations once enough
observations exist at some budget, mixing in uniform draws at a fixed rate.
Trial quality is the estimator's cross-run score, so the whole loop runs
without target labels.

Everything the search does lands in an append-only ledger of JSON lines.
Given the same seed the ledger is byte-identical across runs: trials execute
concurrently but their results are recorded and consumed in slot order, and
wall-clock times stay out of the ledger.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .network import BranchConfig
from .synthdata import sealed_labels

LEDGER_SCHEMA_VERSION = 1

GOOD_QUANTILE = 0.15
RANDOM_FRACTION = 1.0 / 3.0
N_CANDIDATES = 24
BANDWIDTH_FLOOR = 1e-3

DEFAULT_LAMBDA_RANGE = (0.05, 5.0)
DEFAULT_DROPOUT_MAX = 0.8
DEFAULT_N_FC = (1, 2, 3)
DEFAULT_FC_H = (64, 128, 256, 512, 1024, 2048)
DEFAULT_FC_B = (32, 64, 128, 256, 512)


@dataclass(frozen=True)
class SearchSpace:
    """Bounds and choice sets for the five searched dimensions.

    Vector encoding for the surrogate: lambda maps to [0,1] on a log scale,
    dropout to [0,1] linearly, the three categoricals to choice indices.
    """

    lam_low: float = DEFAULT_LAMBDA_RANGE[0]
    lam_high: float = DEFAULT_LAMBDA_RANGE[1]
    dropout_max: float = DEFAULT_DROPOUT_MAX
    n_fc_choices: tuple = DEFAULT_N_FC
    fc_h_choices: tuple = DEFAULT_FC_H
    fc_b_choices: tuple = DEFAULT_FC_B

    def __post_init__(self):
        if not (0.0 < self.lam_low < self.lam_high < math.inf):
            raise ValueError("need 0 < lam_low < lam_high < inf")
        if not 0.0 <= self.dropout_max < 1.0:
            raise ValueError("dropout_max must be in [0,1)")
        for name in ("n_fc_choices", "fc_h_choices", "fc_b_choices"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")

    @property
    def dims(self):
        return 5

    def categorical_sizes(self):
        return (len(self.n_fc_choices), len(self.fc_h_choices), len(self.fc_b_choices))

    def sample_uniform(self, rng) -> BranchConfig:
        lam = float(np.exp(rng.uniform(np.log(self.lam_low), np.log(self.lam_high))))
        dropout = float(rng.uniform(0.0, self.dropout_max)) if self.dropout_max > 0 else 0.0
        return BranchConfig(
            lam=lam,
            dropout_p=dropout,
            n_fc_layers=int(self.n_fc_choices[rng.integers(len(self.n_fc_choices))]),
            fc_h=int(self.fc_h_choices[rng.integers(len(self.fc_h_choices))]),
            fc_b=int(self.fc_b_choices[rng.integers(len(self.fc_b_choices))]),
        )

    def to_vector(self, cfg: BranchConfig) -> np.ndarray:
        span = np.log(self.lam_high) - np.log(self.lam_low)
        z0 = (np.log(cfg.lam) - np.log(self.lam_low)) / span
        z1 = cfg.dropout_p / self.dropout_max if self.dropout_max > 0 else 0.0
        return np.array([
            z0, z1,
            float(self.n_fc_choices.index(cfg.n_fc_layers)),
            float(self.fc_h_choices.index(cfg.fc_h)),
            float(self.fc_b_choices.index(cfg.fc_b)),
        ])

    def from_vector(self, v) -> BranchConfig:
        lam = float(np.exp(np.log(self.lam_low)
                           + v[0] * (np.log(self.lam_high) - np.log(self.lam_low))))
        return BranchConfig(
            lam=lam,
            dropout_p=float(v[1] * self.dropout_max),
            n_fc_layers=int(self.n_fc_choices[int(v[2])]),
            fc_h=int(self.fc_h_choices[int(v[3])]),
            fc_b=int(self.fc_b_choices[int(v[4])]),
        )


@dataclass(frozen=True)
class Bracket:
    s: int
    budgets: tuple   # rung budgets, ascending
    counts: tuple    # configs entering each rung

    @property
    def n_rungs(self):
        return len(self.budgets)


def hyperband_brackets(min_budget, max_budget, eta) -> list[Bracket]:
    """Standard bracket plan: bracket s starts ceil((s_max+1)/(s+1)*eta^s)
    configs at budget max/eta^s and keeps the top floor(n/eta) per rung."""
    if not (0 < min_budget <= max_budget):
        raise ValueError("need 0 < min_budget <= max_budget")
    if eta < 2:
        raise ValueError("eta must be >= 2")
    s_max = int(math.floor(math.log(max_budget / min_budget) / math.log(eta) + 1e-9))
    brackets = []
    for s in range(s_max, -1, -1):
        n = math.ceil((s_max + 1) / (s + 1) * eta ** s)
        budgets, counts = [], []
        count = n
        for i in range(s + 1):
            budgets.append(max(1, round(max_budget / eta ** (s - i))))
            counts.append(count)
            count = count // eta
        brackets.append(Bracket(s, tuple(budgets), tuple(counts)))
    return brackets


class _Kde:
    """Product kernel density over the encoded space: Gaussians on the two
    continuous dimensions, category-smoothing kernels on the rest."""

    def __init__(self, vectors, space: SearchSpace):
        self.pts = np.asarray(vectors, dtype=np.float64)
        n, d = self.pts.shape
        factor = n ** (-1.0 / (d + 4))
        self.cont_bw = np.maximum(self.pts[:, :2].std(axis=0) * factor, BANDWIDTH_FLOOR)
        self.cat_sizes = space.categorical_sizes()
        self.cat_bw = float(np.clip(factor, 0.05, 0.5))

    def density(self, v) -> float:
        v = np.asarray(v, dtype=np.float64)
        diff = (v[None, :2] - self.pts[:, :2]) / self.cont_bw[None, :]
        cont = np.exp(-0.5 * diff ** 2) / (self.cont_bw[None, :] * np.sqrt(2.0 * np.pi))
        per_point = cont.prod(axis=1)
        h = self.cat_bw
        for j, m in enumerate(self.cat_sizes):
            same = self.pts[:, 2 + j] == v[2 + j]
            per_point = per_point * np.where(same, 1.0 - h + h / m, h / m)
        return float(per_point.mean())

    def sample(self, rng) -> np.ndarray:
        i = int(rng.integers(self.pts.shape[0]))
        out = self.pts[i].copy()
        out[:2] = np.clip(rng.normal(out[:2], self.cont_bw), 0.0, 1.0)
        h = self.cat_bw
        for j, m in enumerate(self.cat_sizes):
            if rng.random() >= 1.0 - h + h / m:
                others = [c for c in range(m) if c != int(out[2 + j])]
                out[2 + j] = float(others[int(rng.integers(m - 1))])
        return out


class Surrogate:
    """Per-budget good/bad density-ratio model over observed configs."""

    def __init__(self, space: SearchSpace, good_quantile=GOOD_QUANTILE,
                 min_points=None, random_fraction=RANDOM_FRACTION,
                 n_candidates=N_CANDIDATES):
        self.space = space
        self.good_quantile = good_quantile
        self.min_points = space.dims + 1 if min_points is None else min_points
        self.random_fraction = random_fraction
        self.n_candidates = n_candidates
        self.observations = {}  # budget -> list of (vector, score, bad)
        self._cache = None

    def observe(self, budget, config, score, diverged):
        vec = self.space.to_vector(config)
        self.observations.setdefault(int(budget), []).append(
            (vec, -math.inf if diverged else float(score), bool(diverged)))
        self._cache = None

    def _model(self):
        """(good KDE, bad KDE) at the largest budget with enough points."""
        if self._cache is not None:
            return self._cache
        model = None
        for budget in sorted(self.observations, reverse=True):
            obs = self.observations[budget]
            if len(obs) < self.min_points:
                continue
            completed = [(i, o) for i, o in enumerate(obs) if not o[2]]
            n_good = math.ceil(self.good_quantile * len(obs))
            ranked = sorted(completed, key=lambda io: (-io[1][1], io[0]))
            good = [o[0] for _, o in ranked[:n_good]]
            bad = [o[0] for _, o in ranked[n_good:]] + [o[0] for o in obs if o[2]]
            if good and bad:
                model = (_Kde(good, self.space), _Kde(bad, self.space))
            break
        self._cache = (model,)
        return self._cache

    def sample(self, rng) -> BranchConfig:
        gate = rng.random()
        (model,) = self._model()
        if gate < self.random_fraction or model is None:
            return self.space.sample_uniform(rng)
        good, bad = model
        best_vec, best_ratio = None, -math.inf
        for _ in range(self.n_candidates):
            v = good.sample(rng)
            # the product kernel underflows to 0.0 far from every bad point
            ratio = good.density(v) / max(bad.density(v), 1e-300)
            if ratio > best_ratio:
                best_vec, best_ratio = v, ratio
        return self.space.from_vector(best_vec)


def sample_configs(surrogate: Surrogate, space: SearchSpace, count, rng):
    if count < 1:
        raise ValueError("count must be >= 1")
    if space is not surrogate.space:
        raise ValueError("surrogate was built for a different space")
    return [surrogate.sample(rng) for _ in range(count)]


def update(surrogate: Surrogate, trial: "SearchTrial") -> Surrogate:
    surrogate.observe(trial.budget, trial.config, trial.ems_score,
                      trial.status == "diverged")
    return surrogate


@dataclass
class SearchTrial:
    """One executed training run inside the search."""

    trial_id: str
    cfg_id: str
    round: int
    bracket: int
    rung: int
    slot: int
    config: BranchConfig
    budget: int
    seed: int
    status: str          # completed | diverged
    ems_score: float     # -inf when diverged
    record: object = field(repr=False, default=None)


class AllTrialsDiverged(RuntimeError):
    """Raised when no full-budget trial completes; carries the ledger."""

    def __init__(self, message, events):
        super().__init__(message)
        self.events = events


@dataclass
class SearchResult:
    best: SearchTrial
    best_epoch: int
    trials: list
    events: list


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.floating, float)):
        f = float(x)
        return f if math.isfinite(f) else None
    if isinstance(x, (np.integer, int)):
        return int(x)
    return x


def ledger_line(event: dict) -> str:
    return json.dumps(_jsonable(event), sort_keys=True, separators=(",", ":"))


def _trial_seed(seed, rnd, s, rung, slot) -> int:
    return int(np.random.SeedSequence([seed, rnd, s, rung, slot]).generate_state(1)[0])


def run_search(space: SearchSpace, trainer, estimator, rounds, parallelism, seed, *,
               min_budget, max_budget, eta=3, random_fraction=RANDOM_FRACTION,
               good_quantile=GOOD_QUANTILE, source_acc_floor=0.0,
               ledger_path=None) -> SearchResult:
    """Run the full search loop.

    ``trainer(config, budget, seed) -> TrialRecord`` executes one trial;
    ``estimator`` provides score_run(snapshots) and pick_epoch(snapshots).
    Rounds cycle through the bracket plan; within a rung up to ``parallelism``
    trials run concurrently. Target labels stay sealed for the duration.

    Returns the best completed full-budget trial by cross-run score; raises
    AllTrialsDiverged (ledger attached) when there is none.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    brackets = hyperband_brackets(min_budget, max_budget, eta)
    surrogate = Surrogate(space, good_quantile=good_quantile,
                          random_fraction=random_fraction)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))

    events = []
    ledger_file = open(ledger_path, "w") if ledger_path else None

    def emit(event):
        events.append(event)
        if ledger_file is not None:
            ledger_file.write(ledger_line(event) + "\n")
            ledger_file.flush()

    emit({"event": "search-start", "schema": LEDGER_SCHEMA_VERSION, "seed": int(seed),
          "rounds": rounds, "parallelism": parallelism, "eta": eta,
          "min_budget": min_budget, "max_budget": max_budget,
          "random_fraction": random_fraction, "good_quantile": good_quantile,
          "source_acc_floor": source_acc_floor,
          "space": _jsonable(asdict(space))})

    trials: list[SearchTrial] = []
    try:
        with sealed_labels(), ThreadPoolExecutor(max_workers=parallelism) as pool:
            for rnd in range(rounds):
                bracket = brackets[rnd % len(brackets)]
                configs = sample_configs(surrogate, space, bracket.counts[0], rng)
                entrants = []
                for i, cfg in enumerate(configs):
                    cfg_id = f"c{rnd}.{bracket.s}.{i}"
                    entrants.append((cfg_id, cfg))
                    emit({"event": "sampled", "round": rnd, "bracket": bracket.s,
                          "cfg_id": cfg_id, "config": asdict(cfg),
                          "budget": bracket.budgets[0]})

                for rung in range(bracket.n_rungs):
                    budget = bracket.budgets[rung]
                    seeds = [_trial_seed(seed, rnd, bracket.s, rung, i)
                             for i in range(len(entrants))]
                    futures = [pool.submit(trainer, cfg, budget, s)
                               for (_, cfg), s in zip(entrants, seeds)]
                    rung_trials = []
                    for slot, ((cfg_id, cfg), fut) in enumerate(zip(entrants, futures)):
                        rec = fut.result()
                        diverged = rec.diverged or not rec.snapshots
                        if (not diverged and budget >= max_budget
                                and rec.snapshots[-1].source_acc < source_acc_floor):
                            diverged = True
                        score = -math.inf if diverged else estimator.score_run(rec.snapshots)
                        trial = SearchTrial(
                            trial_id=f"t{rnd}.{bracket.s}.{rung}.{slot}",
                            cfg_id=cfg_id, round=rnd, bracket=bracket.s, rung=rung,
                            slot=slot, config=cfg, budget=budget, seed=seeds[slot],
                            status="diverged" if diverged else "completed",
                            ems_score=score, record=rec,
                        )
                        rung_trials.append(trial)
                        trials.append(trial)
                        update(surrogate, trial)
                        emit({"event": "rung-completed", "round": rnd,
                              "bracket": bracket.s, "rung": rung, "slot": slot,
                              "trial_id": trial.trial_id, "cfg_id": cfg_id,
                              "config": asdict(cfg), "budget": budget,
                              "seed": trial.seed, "status": trial.status,
                              "score": trial.ems_score,
                              "completed_iters": rec.completed_iters,
                              "snapshots": [s.as_dict() for s in rec.snapshots]})

                    if rung + 1 < bracket.n_rungs:
                        keep = bracket.counts[rung + 1]
                        ranked = sorted(
                            (t for t in rung_trials if t.status == "completed"),
                            key=lambda t: (-t.ems_score, t.slot))
                        survivors = ranked[:keep]
                        entrants = [(t.cfg_id, t.config) for t in survivors]
                        for t in survivors:
                            emit({"event": "promoted", "round": rnd,
                                  "bracket": bracket.s, "from_rung": rung,
                                  "to_rung": rung + 1, "cfg_id": t.cfg_id,
                                  "trial_id": t.trial_id, "score": t.ems_score,
                                  "budget": bracket.budgets[rung + 1]})
                        if not entrants:
                            break

        eligible = [t for t in trials
                    if t.status == "completed" and t.budget >= max_budget]
        if not eligible:
            emit({"event": "finished", "status": "all-diverged",
                  "n_trials": len(trials)})
            raise AllTrialsDiverged("no full-budget trial completed", events)

        best = max(eligible, key=lambda t: (t.ems_score, -trials.index(t)))
        epoch = estimator.pick_epoch(best.record.snapshots)
        emit({"event": "finished", "status": "ok", "best_trial_id": best.trial_id,
              "best_cfg_id": best.cfg_id, "best_config": asdict(best.config),
              "best_score": best.ems_score, "best_epoch": epoch,
              "n_trials": len(trials)})
    finally:
        if ledger_file is not None:
            ledger_file.close()

    return SearchResult(best=best, best_epoch=epoch, trials=trials, events=events)
