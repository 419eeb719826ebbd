"""Bracket plans, the density-ratio surrogate, and the search loop, driven by
stub trainers so everything here runs in milliseconds."""

import json
import math
from dataclasses import dataclass

import numpy as np
import pytest

from branchsearch.bohb import (
    AllTrialsDiverged,
    Bracket,
    SearchSpace,
    SearchTrial,
    Surrogate,
    _Kde,
    _trial_seed,
    hyperband_brackets,
    ledger_line,
    run_search,
    sample_configs,
    update,
)
from branchsearch.metrics import SnapshotMetrics
from branchsearch.network import BranchConfig

SPACE = SearchSpace()


# -- bracket plans ----------------------------------------------------------


def test_bracket_plan_2000_6000():
    plan = hyperband_brackets(2000, 6000, 3)
    assert plan == [
        Bracket(1, (2000, 6000), (3, 1)),
        Bracket(0, (6000,), (2,)),
    ]


def test_bracket_plan_1_27():
    plan = hyperband_brackets(1, 27, 3)
    assert plan[0].budgets == (1, 3, 9, 27)
    assert plan[0].counts == (27, 9, 3, 1)
    assert [b.s for b in plan] == [3, 2, 1, 0]


def test_bracket_plan_equal_budgets():
    plan = hyperband_brackets(500, 500, 3)
    assert plan == [Bracket(0, (500,), (1,))]


def test_bracket_validation():
    with pytest.raises(ValueError):
        hyperband_brackets(0, 10, 3)
    with pytest.raises(ValueError):
        hyperband_brackets(20, 10, 3)
    with pytest.raises(ValueError):
        hyperband_brackets(1, 10, 1)


def test_bracket_counts_follow_eta_division():
    for min_b, max_b, eta in ((1, 16, 2), (10, 810, 3), (7, 7 * 16, 4)):
        for b in hyperband_brackets(min_b, max_b, eta):
            for a, c in zip(b.counts, b.counts[1:]):
                assert c == a // eta
            assert b.budgets[-1] == max_b


# -- search space -----------------------------------------------------------


def test_sample_uniform_respects_bounds():
    rng = np.random.default_rng(0)
    for _ in range(200):
        cfg = SPACE.sample_uniform(rng)
        assert SPACE.lam_low <= cfg.lam <= SPACE.lam_high
        assert 0.0 <= cfg.dropout_p < SPACE.dropout_max
        assert cfg.n_fc_layers in SPACE.n_fc_choices
        assert cfg.fc_h in SPACE.fc_h_choices
        assert cfg.fc_b in SPACE.fc_b_choices


def test_lambda_sampling_is_log_uniform():
    rng = np.random.default_rng(1)
    lams = np.array([SPACE.sample_uniform(rng).lam for _ in range(4000)])
    geo_mid = math.sqrt(SPACE.lam_low * SPACE.lam_high)
    frac_below = (lams < geo_mid).mean()
    assert 0.45 < frac_below < 0.55


def test_vector_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(50):
        cfg = SPACE.sample_uniform(rng)
        back = SPACE.from_vector(SPACE.to_vector(cfg))
        assert back.lam == pytest.approx(cfg.lam, rel=1e-12)
        assert back.dropout_p == pytest.approx(cfg.dropout_p, rel=1e-12)
        assert (back.n_fc_layers, back.fc_h, back.fc_b) == (
            cfg.n_fc_layers, cfg.fc_h, cfg.fc_b)


def test_space_validation():
    with pytest.raises(ValueError):
        SearchSpace(lam_low=0.0)
    with pytest.raises(ValueError):
        SearchSpace(lam_low=2.0, lam_high=1.0)
    with pytest.raises(ValueError):
        SearchSpace(fc_h_choices=())


# -- kde --------------------------------------------------------------------


def _vectors(rng, n):
    return np.stack([SPACE.to_vector(SPACE.sample_uniform(rng)) for _ in range(n)])


def test_kde_density_positive_and_peaked():
    rng = np.random.default_rng(3)
    pts = _vectors(rng, 12)
    kde = _Kde(pts, SPACE)
    for v in pts:
        assert kde.density(v) > 0.0
    # density at a data point beats a far-away probe on the continuous dims
    probe = pts[0].copy()
    probe[0] = 1.0 - probe[0]
    probe[1] = 1.0 - probe[1]
    assert kde.density(pts[0]) > kde.density(probe)


def test_kde_sample_stays_in_space():
    rng = np.random.default_rng(4)
    kde = _Kde(_vectors(rng, 8), SPACE)
    sizes = SPACE.categorical_sizes()
    for _ in range(200):
        v = kde.sample(rng)
        assert 0.0 <= v[0] <= 1.0 and 0.0 <= v[1] <= 1.0
        for j, m in enumerate(sizes):
            assert v[2 + j] == int(v[2 + j]) and 0 <= v[2 + j] < m
        SPACE.from_vector(v)  # must always decode


def test_kde_bandwidth_floor():
    pts = np.tile(_vectors(np.random.default_rng(5), 1), (10, 1))  # zero variance
    kde = _Kde(pts, SPACE)
    assert (kde.cont_bw >= 1e-3).all()
    assert math.isfinite(kde.density(pts[0]))


# -- surrogate --------------------------------------------------------------


def _observe_n(sur, n, budget=9, rng=None, score_fn=None):
    rng = rng or np.random.default_rng(6)
    for i in range(n):
        cfg = SPACE.sample_uniform(rng)
        score = float(i) if score_fn is None else score_fn(cfg)
        sur.observe(budget, cfg, score, False)


def test_surrogate_cold_start_is_uniform():
    sur = Surrogate(SPACE, random_fraction=0.0)
    rng_a = np.random.default_rng(7)
    rng_b = np.random.default_rng(7)
    got = [sur.sample(rng_a) for _ in range(5)]
    want = []
    for _ in range(5):
        rng_b.random()  # the exploration gate draw happens model or not
        want.append(SPACE.sample_uniform(rng_b))
    assert got == want


def test_surrogate_needs_min_points():
    sur = Surrogate(SPACE)
    assert sur.min_points == 6
    _observe_n(sur, 5)
    assert sur._model() == (None,)
    _observe_n(sur, 1, rng=np.random.default_rng(8))
    assert sur._model()[0] is not None


def test_surrogate_good_set_arithmetic():
    sur = Surrogate(SPACE)
    _observe_n(sur, 10)  # scores 0..9 at budget 9
    good, bad = sur._model()[0]
    # ceil(0.15 * 10) = 2 good points; the rest are bad
    assert good.pts.shape[0] == 2
    assert bad.pts.shape[0] == 8


def test_surrogate_diverged_always_bad():
    sur = Surrogate(SPACE)
    rng = np.random.default_rng(9)
    for i in range(8):
        sur.observe(9, SPACE.sample_uniform(rng), float(i), False)
    for _ in range(4):
        sur.observe(9, SPACE.sample_uniform(rng), 100.0, True)  # score ignored
    good, bad = sur._model()[0]
    assert good.pts.shape[0] == math.ceil(0.15 * 12)
    assert bad.pts.shape[0] == 12 - good.pts.shape[0]


def test_surrogate_uses_largest_ready_budget():
    sur = Surrogate(SPACE)
    _observe_n(sur, 10, budget=3)
    _observe_n(sur, 3, budget=9, rng=np.random.default_rng(10))
    good, _ = sur._model()[0]
    # budget 9 has too few points; the model must come from budget 3
    assert good.pts.shape[0] == math.ceil(0.15 * 10)


def test_random_fraction_one_replays_uniform_search():
    sur = Surrogate(SPACE, random_fraction=1.0)
    _observe_n(sur, 20)
    rng_a = np.random.default_rng(11)
    rng_b = np.random.default_rng(11)
    got = [sur.sample(rng_a) for _ in range(10)]
    want = []
    for _ in range(10):
        rng_b.random()
        want.append(SPACE.sample_uniform(rng_b))
    assert got == want


def test_guided_sampling_concentrates_on_good_region():
    # plant a quadratic peak at lam01 = 0.75, dropout01 = 0.25
    def quality(cfg):
        v = SPACE.to_vector(cfg)
        return -(v[0] - 0.75) ** 2 - (v[1] - 0.25) ** 2

    sur = Surrogate(SPACE, random_fraction=0.0)
    rng = np.random.default_rng(12)
    for _ in range(60):
        cfg = SPACE.sample_uniform(rng)
        sur.observe(27, cfg, quality(cfg), False)

    guided = [SPACE.to_vector(sur.sample(rng)) for _ in range(40)]
    uniform = [SPACE.to_vector(SPACE.sample_uniform(rng)) for _ in range(40)]
    err = lambda vs: np.mean([(v[0] - 0.75) ** 2 + (v[1] - 0.25) ** 2 for v in vs])
    assert err(guided) < 0.5 * err(uniform)


def test_guided_sampling_survives_density_underflow():
    # identical observation vectors floor the bandwidth at 1e-3, so any
    # candidate a short distance away underflows the product kernel to 0.0
    sur = Surrogate(SPACE, random_fraction=0.0)
    far = BranchConfig(SPACE.lam_low, 0.01, 1, SPACE.fc_h_choices[0],
                       SPACE.fc_b_choices[0])
    near = BranchConfig(SPACE.lam_high, SPACE.dropout_max - 0.01, 1,
                        SPACE.fc_h_choices[-1], SPACE.fc_b_choices[-1])
    sur.observe(9, near, 1.0, False)
    for _ in range(7):
        sur.observe(9, far, 0.0, False)
    kde_bad = _Kde(np.stack([SPACE.to_vector(far)] * 7), SPACE)
    assert kde_bad.density(SPACE.to_vector(near)) == 0.0
    rng = np.random.default_rng(14)
    for _ in range(20):
        SPACE.from_vector(SPACE.to_vector(sur.sample(rng)))


def test_sample_configs_guards():
    sur = Surrogate(SPACE)
    rng = np.random.default_rng(13)
    assert len(sample_configs(sur, SPACE, 4, rng)) == 4
    with pytest.raises(ValueError):
        sample_configs(sur, SPACE, 0, rng)
    with pytest.raises(ValueError):
        sample_configs(sur, SearchSpace(), 1, rng)


def test_update_records_observation():
    sur = Surrogate(SPACE)
    cfg = BranchConfig(1.0, 0.2, 2, 128, 64)
    trial = SearchTrial("t", "c", 0, 0, 0, 0, cfg, 27, 1, "completed", 0.5)
    update(sur, trial)
    assert len(sur.observations[27]) == 1
    assert sur.observations[27][0][1] == 0.5


# -- ledger encoding --------------------------------------------------------


def test_ledger_line_is_canonical():
    line = ledger_line({"b": 1, "a": np.float64(2.5)})
    assert line == '{"a":2.5,"b":1}'
    assert ledger_line({"ok": np.True_, "no": False}) == '{"no":false,"ok":true}'


def test_ledger_line_scrubs_non_finite():
    line = ledger_line({"x": math.nan, "y": math.inf, "z": [1, math.nan]})
    assert json.loads(line) == {"x": None, "y": None, "z": [1, None]}


def test_trial_seed_is_stable_and_distinct():
    s = _trial_seed(1, 0, 1, 0, 0)
    assert s == _trial_seed(1, 0, 1, 0, 0)
    others = {_trial_seed(1, r, b, u, i) for r in range(2) for b in range(2)
              for u in range(2) for i in range(3)}
    assert len(others) == 24


# -- the search loop on stub trainers ---------------------------------------


@dataclass
class _FakeRecord:
    diverged: bool
    snapshots: list
    completed_iters: int


def _snap(entropy, source_acc=0.95):
    return SnapshotMetrics(entropy=entropy, diversity=0.1, silhouette=0.2,
                           calinski=5.0, source_loss=0.3, source_acc=source_acc,
                           pseudo_label_acc=0.5)


class _Estimator:
    """Scores a run by the negated entropy of its last snapshot."""

    def score_run(self, snaps):
        return -snaps[-1].entropy

    def pick_epoch(self, snaps):
        return len(snaps) - 1


def _stub_trainer(source_acc=0.95, diverge_when=None):
    def trainer(cfg, budget, seed):
        if diverge_when is not None and diverge_when(cfg, budget, seed):
            return _FakeRecord(True, [], 0)
        # quality improves as lam approaches 1; deterministic in every input
        ent = abs(math.log(cfg.lam)) + 1.0 / budget
        snaps = [_snap(ent + 0.01, source_acc), _snap(ent, source_acc)]
        return _FakeRecord(False, snaps, budget)

    return trainer


def _run(seed=1, rounds=2, parallelism=2, ledger_path=None, trainer=None,
         source_acc_floor=0.0):
    return run_search(
        SPACE, trainer or _stub_trainer(), _Estimator(), rounds, parallelism, seed,
        min_budget=3, max_budget=27, eta=3, source_acc_floor=source_acc_floor,
        ledger_path=ledger_path,
    )


def test_search_returns_full_budget_best():
    res = _run()
    assert res.best.status == "completed"
    assert res.best.budget == 27
    assert res.best_epoch == 1
    assert res.best.ems_score == max(
        t.ems_score for t in res.trials if t.budget == 27 and t.status == "completed")


def test_search_events_are_deterministic():
    a = _run(seed=5)
    b = _run(seed=5)
    assert [ledger_line(e) for e in a.events] == [ledger_line(e) for e in b.events]
    c = _run(seed=6)
    assert [ledger_line(e) for e in a.events] != [ledger_line(e) for e in c.events]


def test_search_parallelism_does_not_change_the_ledger():
    # the start banner records the worker count; every line after it must agree
    a = _run(seed=7, parallelism=1)
    b = _run(seed=7, parallelism=4)
    assert [ledger_line(e) for e in a.events[1:]] == \
        [ledger_line(e) for e in b.events[1:]]


def test_search_ledger_file_matches_events(tmp_path):
    path = tmp_path / "ledger.jsonl"
    res = _run(seed=8, ledger_path=str(path))
    lines = path.read_text().splitlines()
    assert lines == [ledger_line(e) for e in res.events]
    assert json.loads(lines[0])["event"] == "search-start"
    assert json.loads(lines[-1])["event"] == "finished"


def test_search_rounds_cycle_brackets():
    res = _run(rounds=4)
    plan = hyperband_brackets(3, 27, 3)
    starts = [e for e in res.events if e["event"] == "sampled"]
    seen = []
    for e in starts:
        if e["round"] not in [r for r, _ in seen]:
            seen.append((e["round"], e["bracket"]))
    want = [(r, plan[r % len(plan)].s) for r in range(4)]
    assert seen == want


def test_search_promotions_are_top_k_by_score():
    res = _run(seed=9, rounds=2)
    plan = {b.s: b for b in hyperband_brackets(3, 27, 3)}
    by_rung = {}
    for e in res.events:
        if e["event"] == "rung-completed":
            by_rung.setdefault((e["round"], e["bracket"], e["rung"]), []).append(e)
    for e in res.events:
        if e["event"] != "promoted":
            continue
        key = (e["round"], e["bracket"], e["from_rung"])
        rows = by_rung[key]
        keep = plan[e["bracket"]].counts[e["from_rung"] + 1]
        completed = [r for r in rows if r["status"] == "completed"]
        ranked = sorted(completed, key=lambda r: (-r["score"], r["slot"]))
        assert e["cfg_id"] in {r["cfg_id"] for r in ranked[:keep]}


def test_search_all_diverged_raises_with_ledger(tmp_path):
    path = tmp_path / "ledger.jsonl"
    trainer = _stub_trainer(diverge_when=lambda cfg, budget, seed: True)
    with pytest.raises(AllTrialsDiverged) as exc:
        _run(trainer=trainer, ledger_path=str(path))
    assert exc.value.events[-1]["status"] == "all-diverged"
    assert json.loads(path.read_text().splitlines()[-1])["status"] == "all-diverged"


def test_search_source_acc_floor_reclassifies():
    # healthy snapshots except source accuracy below the floor at full budget
    trainer = _stub_trainer(source_acc=0.2)
    with pytest.raises(AllTrialsDiverged):
        _run(trainer=trainer, source_acc_floor=0.5)
    # floor off: the same trainer completes
    res = _run(trainer=trainer, source_acc_floor=0.0)
    assert res.best.status == "completed"


def test_search_divergence_feeds_surrogate_not_winner():
    # diverge every trial whose lam is below 1: search must still finish and
    # the winner must come from the surviving region
    trainer = _stub_trainer(diverge_when=lambda cfg, budget, seed: cfg.lam < 1.0)
    res = _run(trainer=trainer, rounds=3)
    assert res.best.config.lam >= 1.0
    statuses = {t.status for t in res.trials}
    assert "diverged" in statuses and "completed" in statuses


def test_search_validates_arguments():
    with pytest.raises(ValueError):
        _run(rounds=0)
    with pytest.raises(ValueError):
        run_search(SPACE, _stub_trainer(), _Estimator(), 1, 0, 1,
                   min_budget=3, max_budget=27)
