"""Pair generation, the shift geometry, the label seal, and CSV round-trips."""

import numpy as np
import pytest

from branchsearch.synthdata import (
    RING_RADIUS,
    DomainPair,
    ShiftSpec,
    _class_means,
    load_pair,
    make_pair,
    export_pair,
    sealed_labels,
)


def _pair(shift=None, k=3, n=60, dims=5, seed=0):
    return make_pair(shift or ShiftSpec(), k, n, n, dims, seed)


def test_determinism_and_seed_sensitivity():
    a, b, c = _pair(seed=1), _pair(seed=1), _pair(seed=2)
    assert (a.source_x == b.source_x).all()
    assert (a.target_x == b.target_x).all()
    assert (a.source_y == b.source_y).all()
    assert (a.source_x != c.source_x).any()


def test_shapes_and_label_ranges():
    p = _pair(k=4, n=80, dims=7)
    assert p.source_x.shape == (80, 7) and p.target_x.shape == (80, 7)
    assert p.dims == 7 and p.k == 4
    assert set(np.unique(p.source_y)) <= set(range(4))


def test_arrays_are_frozen():
    p = _pair()
    with pytest.raises(ValueError):
        p.source_x[0, 0] = 1.0


def test_validation():
    with pytest.raises(ValueError):
        make_pair(ShiftSpec(), 1, 10, 10, 4, 0)
    with pytest.raises(ValueError):
        make_pair(ShiftSpec(), 3, 10, 10, 1, 0)
    with pytest.raises(ValueError):
        make_pair(ShiftSpec(), 3, 0, 10, 4, 0)
    with pytest.raises(ValueError):
        ShiftSpec(cluster_std=0.0)
    with pytest.raises(ValueError):
        ShiftSpec(prior_skew=1.0)
    with pytest.raises(ValueError):
        ShiftSpec(ring_wobble=-0.1)


def test_class_means_on_ring():
    m = _class_means(5)
    np.testing.assert_allclose(np.linalg.norm(m, axis=1), RING_RADIUS, rtol=1e-12)
    # wobble alternates radii
    mw = _class_means(4, wobble=0.25)
    np.testing.assert_allclose(np.linalg.norm(mw, axis=1), RING_RADIUS * np.array([1.25, 0.75, 1.25, 0.75]))


def test_zero_shift_same_distribution():
    # same seed, no shift: target draws differ sample-wise but share the
    # class geometry; class means should sit within a std of each other
    p = _pair(ShiftSpec(cluster_std=0.1), k=3, n=400, dims=4, seed=5)
    lab = p.labels_for_evaluation()
    for c in range(3):
        mu_s = p.source_x[p.source_y == c].mean(axis=0)
        mu_t = p.target_x[lab == c].mean(axis=0)
        assert np.linalg.norm(mu_s - mu_t) < 0.1


def test_rotation_moves_target_classes():
    still = _pair(ShiftSpec(rotation_deg=0.0, cluster_std=0.05), k=3, n=300, dims=4, seed=6)
    spun = _pair(ShiftSpec(rotation_deg=60.0, cluster_std=0.05), k=3, n=300, dims=4, seed=6)
    lab = spun.labels_for_evaluation()
    gap = 0.0
    for c in range(3):
        mu_a = still.target_x[still.labels_for_evaluation() == c].mean(axis=0)
        mu_b = spun.target_x[lab == c].mean(axis=0)
        gap = max(gap, float(np.linalg.norm(mu_a - mu_b)))
    # 60 degrees on a radius-2 ring moves a mean by 2 units
    assert gap > 1.5


def test_full_turn_is_identity():
    a = _pair(ShiftSpec(rotation_deg=0.0), seed=7)
    b = _pair(ShiftSpec(rotation_deg=360.0), seed=7)
    np.testing.assert_allclose(a.target_x, b.target_x, atol=1e-9)


def test_translation_shifts_every_row():
    a = _pair(ShiftSpec(translation=0.0), seed=8)
    b = _pair(ShiftSpec(translation=2.0), seed=8)
    delta = b.target_x - a.target_x
    norms = np.linalg.norm(delta, axis=1)
    np.testing.assert_allclose(norms, 2.0, rtol=1e-9)
    # source untouched
    np.testing.assert_array_equal(a.source_x, b.source_x)


def test_prior_skew_tilts_target_classes():
    p = _pair(ShiftSpec(prior_skew=0.6), k=4, n=2000, dims=4, seed=9)
    counts = np.bincount(p.labels_for_evaluation(), minlength=4)
    assert counts[0] > counts[1] > counts[2] > counts[3]
    # source priors stay uniform-ish
    s = np.bincount(p.source_y, minlength=4)
    assert s.max() < 2 * s.min()


def test_embedding_is_orthogonal():
    # distances in the embedded space equal latent distances, so class
    # structure survives; verify via the radius of source class means
    p = _pair(ShiftSpec(cluster_std=0.02), k=4, n=800, dims=10, seed=10)
    center = p.source_x.mean(axis=0)
    for c in range(4):
        mu = p.source_x[p.source_y == c].mean(axis=0)
        assert np.linalg.norm(mu - center) == pytest.approx(RING_RADIUS, rel=0.05)


# -- the label seal ---------------------------------------------------------


def test_labels_sealed_inside_context():
    p = _pair()
    with sealed_labels():
        with pytest.raises(RuntimeError, match="sealed"):
            p.labels_for_evaluation()
    assert p.evaluation_reads == 0
    p.labels_for_evaluation()
    assert p.evaluation_reads == 1


def test_seal_nests():
    p = _pair()
    with sealed_labels():
        with sealed_labels():
            pass
        with pytest.raises(RuntimeError):
            p.labels_for_evaluation()
    assert p.labels_for_evaluation().shape == (60,)


def test_seal_covers_worker_threads():
    from concurrent.futures import ThreadPoolExecutor

    p = _pair()
    with sealed_labels():
        with ThreadPoolExecutor(max_workers=2) as ex:
            fut = ex.submit(p.labels_for_evaluation)
            with pytest.raises(RuntimeError):
                fut.result()
    assert p.evaluation_reads == 0


def test_label_copy_is_returned():
    p = _pair()
    lab = p.labels_for_evaluation()
    lab[0] = 99
    assert p.labels_for_evaluation()[0] != 99


# -- export / load ----------------------------------------------------------


def test_export_load_round_trip(tmp_path):
    p = _pair(ShiftSpec(rotation_deg=30, translation=0.5, prior_skew=0.2, ring_wobble=0.1),
              k=3, n=40, dims=4, seed=11)
    prefix = str(tmp_path / "pair")
    export_pair(p, prefix)
    q = load_pair(prefix)
    # repr round-trip keeps floats bit-exact
    np.testing.assert_array_equal(p.source_x, q.source_x)
    np.testing.assert_array_equal(p.target_x, q.target_x)
    np.testing.assert_array_equal(p.source_y, q.source_y)
    np.testing.assert_array_equal(p.labels_for_evaluation(), q.labels_for_evaluation())
    assert q.k == p.k and q.shift == p.shift and q.seed == p.seed


def test_export_refuses_while_sealed(tmp_path):
    p = _pair()
    with sealed_labels():
        with pytest.raises(RuntimeError):
            export_pair(p, str(tmp_path / "pair"))


def test_load_rejects_bad_schema(tmp_path):
    p = _pair()
    prefix = str(tmp_path / "pair")
    export_pair(p, prefix)
    src = tmp_path / "pair_source.csv"
    body = src.read_text().splitlines()
    body[0] = "#schema=99"
    src.write_text("\n".join(body) + "\n")
    with pytest.raises(ValueError, match="schema"):
        load_pair(prefix)
