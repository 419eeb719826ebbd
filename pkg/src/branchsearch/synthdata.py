"""Synthetic labeled-source / unlabeled-target pairs with controllable shift.

Classes are Gaussian clusters centered on a ring in a 2-D signal plane,
padded with noise dimensions and mixed through a seeded random orthogonal
map shared by both domains. The target domain draws from the same generative
process, then rotates the signal plane, translates it, and optionally skews
the class priors.

Target labels exist only for evaluation. They sit behind an accessor that
counts its reads and refuses to answer while a search holds the seal, so
training and model-selection code cannot touch them even by accident.
"""

from __future__ import annotations

import csv
import json
from contextlib import contextmanager
from dataclasses import dataclass, asdict

import numpy as np

RING_RADIUS = 2.0
TRANSLATION_DIR = np.array([1.0, 1.0]) / np.sqrt(2.0)

PAIR_SCHEMA_VERSION = 1

_SEAL_GLOBAL = 0


@contextmanager
def sealed_labels():
    """While active, evaluation label reads raise.

    The depth is process-global on purpose: worker threads spawned inside a
    sealed region must stay sealed too.
    """
    global _SEAL_GLOBAL
    _SEAL_GLOBAL += 1
    try:
        yield
    finally:
        _SEAL_GLOBAL -= 1


@dataclass(frozen=True)
class ShiftSpec:
    """Domain gap description: rotate the signal plane by ``rotation_deg``,
    translate along a fixed diagonal by ``translation``, tilt target class
    priors geometrically by ``prior_skew``; ``cluster_std`` is the common
    within-class standard deviation.

    ``ring_wobble`` alternates class-mean radii by that fraction. At 0 the
    layout is rotationally symmetric; above 0 a rotation has a unique best
    re-alignment, which keeps moderate rotations recoverable even when the
    angle is comparable to the inter-class spacing."""

    rotation_deg: float = 0.0
    translation: float = 0.0
    prior_skew: float = 0.0
    cluster_std: float = 0.35
    ring_wobble: float = 0.0

    def __post_init__(self):
        if not self.cluster_std > 0:
            raise ValueError("cluster_std must be positive")
        if not 0.0 <= self.prior_skew < 1.0:
            raise ValueError("prior_skew must be in [0,1)")
        if not 0.0 <= self.ring_wobble < 1.0:
            raise ValueError("ring_wobble must be in [0,1)")


class DomainPair:
    """Immutable source/target dataset pair with sealed target labels."""

    def __init__(self, source_x, source_y, target_x, target_labels, k, shift, seed):
        self.source_x = np.ascontiguousarray(source_x, dtype=np.float64)
        self.source_y = np.ascontiguousarray(source_y, dtype=np.int64)
        self.target_x = np.ascontiguousarray(target_x, dtype=np.float64)
        self._target_labels = np.ascontiguousarray(target_labels, dtype=np.int64)
        self.k = int(k)
        self.shift = shift
        self.seed = seed
        self.evaluation_reads = 0
        for a in (self.source_x, self.source_y, self.target_x, self._target_labels):
            a.flags.writeable = False

    @property
    def dims(self):
        return self.source_x.shape[1]

    def labels_for_evaluation(self):
        """Target ground truth, for post-hoc evaluation and reports only.

        Raises while a search seal is active; every successful read is
        counted so label-freeness is checkable after the fact.
        """
        if _SEAL_GLOBAL > 0:
            raise RuntimeError("target labels are sealed during search")
        self.evaluation_reads += 1
        return self._target_labels.copy()


def _random_orthogonal(rng, dims):
    q, r = np.linalg.qr(rng.normal(size=(dims, dims)))
    return q * np.sign(np.diag(r))[None, :]


def _class_means(k, wobble=0.0):
    angles = 2.0 * np.pi * np.arange(k) / k
    radii = RING_RADIUS * (1.0 + wobble * (-1.0) ** np.arange(k))
    return radii[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _draw_latent(rng, labels, means, dims, std):
    n = labels.shape[0]
    x = rng.normal(scale=std, size=(n, dims))
    x[:, :2] += means[labels]
    return x


def make_pair(shift: ShiftSpec, k, n_source, n_target, dims, seed) -> DomainPair:
    """Generate one pair deterministically from the seed."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if dims < 2:
        raise ValueError("dims must be >= 2")
    if n_source < 1 or n_target < 1:
        raise ValueError("need at least one sample per domain")
    rng = np.random.default_rng(seed)
    embed = _random_orthogonal(rng, dims)
    means = _class_means(k, shift.ring_wobble)

    y_s = rng.integers(0, k, size=n_source)
    lat_s = _draw_latent(rng, y_s, means, dims, shift.cluster_std)

    priors = (1.0 - shift.prior_skew) ** np.arange(k)
    priors = priors / priors.sum()
    y_t = rng.choice(k, size=n_target, p=priors)
    lat_t = _draw_latent(rng, y_t, means, dims, shift.cluster_std)

    theta = np.deg2rad(shift.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    lat_t[:, :2] = lat_t[:, :2] @ rot.T
    lat_t[:, :2] += shift.translation * TRANSLATION_DIR

    return DomainPair(lat_s @ embed.T, y_s, lat_t @ embed.T, y_t, k, shift, seed)


def _write_rows(path, header_fields, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"#schema={PAIR_SCHEMA_VERSION}"])
        w.writerow(header_fields)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else str(v) for v in row])


def export_pair(pair: DomainPair, prefix) -> None:
    """Write <prefix>_source.csv, <prefix>_target.csv, a separate sealed
    <prefix>_target_labels.csv, and <prefix>_meta.json."""
    d = pair.dims
    feat_cols = [f"f{i}" for i in range(d)]
    _write_rows(
        f"{prefix}_source.csv", feat_cols + ["label"],
        ([float(v) for v in row] + [int(y)] for row, y in zip(pair.source_x, pair.source_y)),
    )
    _write_rows(
        f"{prefix}_target.csv", feat_cols,
        ([float(v) for v in row] for row in pair.target_x),
    )
    _write_rows(
        f"{prefix}_target_labels.csv", ["label"],
        ([int(y)] for y in pair.labels_for_evaluation()),
    )
    meta = {
        "schema": PAIR_SCHEMA_VERSION,
        "k": pair.k,
        "dims": d,
        "seed": pair.seed,
        "shift": asdict(pair.shift),
    }
    with open(f"{prefix}_meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_rows(path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        schema_row = next(r)
        if not schema_row or not schema_row[0].startswith("#schema="):
            raise ValueError(f"{path}: missing schema header")
        if int(schema_row[0].split("=", 1)[1]) != PAIR_SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema {schema_row[0]}")
        header = next(r)
        return header, list(r)


def load_pair(prefix) -> DomainPair:
    with open(f"{prefix}_meta.json") as f:
        meta = json.load(f)
    if meta.get("schema") != PAIR_SCHEMA_VERSION:
        raise ValueError(f"unsupported pair schema {meta.get('schema')}")
    shift = ShiftSpec(**meta["shift"])

    header, rows = _read_rows(f"{prefix}_source.csv")
    d = meta["dims"]
    source_x = np.array([[float(v) for v in row[:d]] for row in rows])
    source_y = np.array([int(row[d]) for row in rows], dtype=np.int64)

    _, rows = _read_rows(f"{prefix}_target.csv")
    target_x = np.array([[float(v) for v in row] for row in rows])

    _, rows = _read_rows(f"{prefix}_target_labels.csv")
    target_labels = np.array([int(row[0]) for row in rows], dtype=np.int64)

    return DomainPair(source_x, source_y, target_x, target_labels, meta["k"], shift, meta["seed"])
