"""Classification and adversarial objectives.

Two adversarial modes: a binary domain discriminator trained with BCE, and
the corrected-vector variant where the branch predicts a per-class confusion
response instead of a domain probability. The BCE printed in some
descriptions of the former as literal reciprocals of the discriminator output
is implemented too, behind ``dann_form="reciprocal"``, for fidelity
experiments; the log form is the default.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .network import Network, TrainSchedule, grl_rho_at, g_forward, c_forward, d_forward


class AdvMode(enum.Enum):
    DANN = "dann"
    ALDA = "alda"


@dataclass(frozen=True)
class Batch:
    """One optimization step's data: labeled source rows, unlabeled target rows."""

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray

    def __post_init__(self):
        if self.source_x.shape[0] != self.source_y.shape[0]:
            raise ValueError("source_x rows and source_y length differ")


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(probs, labels) -> float:
    """Mean negative log-likelihood of integer labels under probability rows."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    with np.errstate(divide="ignore"):
        ll = np.log(probs[np.arange(probs.shape[0]), labels])
    return float(-ll.mean())


def dann_loss(domain_logits, domain_labels, form="log") -> float:
    """Mean domain-discrimination loss over source and target rows.

    ``form="log"`` is binary cross-entropy on sigmoid(logits); "reciprocal"
    evaluates d/sigma + (1-d)/(1-sigma) literally.
    """
    logits = np.ascontiguousarray(np.asarray(domain_logits, dtype=np.float64).reshape(-1))
    labels = np.ascontiguousarray(domain_labels, dtype=np.float64)
    if form == "log":
        loss, _ = kernels.bce_logits_fwd(logits, labels)
    elif form == "reciprocal":
        loss, _ = kernels.dann_recip_fwd(logits, labels, ad.RECIP_EPS)
    else:
        raise ValueError(f"unknown dann form {form!r}")
    return loss


def u_opposite(yhat, k):
    """Uniform distribution over every class except the predicted one."""
    if k < 2:
        raise ValueError("need at least 2 classes")
    yhat = np.asarray(yhat, dtype=np.int64)
    out = np.full((yhat.shape[0], k), 1.0 / (k - 1))
    out[np.arange(yhat.shape[0]), yhat] = 0.0
    return out


def corrected_vectors(xi, yhat):
    """Corrected class vectors c = confusion(xi) x one-hot(yhat), row-wise.

    The confusion matrix implied by xi keeps xi_k of class k's mass and
    spreads the rest uniformly, so column yhat is xi_yhat at the predicted
    class and (1 - xi_yhat)/(K-1) elsewhere.
    """
    xi = np.asarray(xi, dtype=np.float64)
    n, k = xi.shape
    yhat = np.asarray(yhat, dtype=np.int64)
    rows = np.arange(n)
    own = xi[rows, yhat]
    c = np.repeat(((1.0 - own) / (k - 1))[:, None], k, axis=1)
    c[rows, yhat] = own
    return c


def alda_loss(branch_out, source_y, target_pseudo) -> float:
    """Corrected-vector BCE: source rows against their labels, target rows
    against the opposite distribution of their pseudo-labels.

    ``branch_out`` stacks source rows first, then target rows.
    """
    branch_out = np.ascontiguousarray(branch_out, dtype=np.float64)
    source_y = np.asarray(source_y, dtype=np.int64)
    target_pseudo = np.asarray(target_pseudo, dtype=np.int64)
    n, k = branch_out.shape
    if k < 2:
        raise ValueError("need at least 2 classes")
    if n != source_y.shape[0] + target_pseudo.shape[0]:
        raise ValueError("branch_out rows must equal len(source_y) + len(target_pseudo)")
    pseudo = np.ascontiguousarray(np.concatenate([source_y, target_pseudo]))
    tvec = np.ascontiguousarray(np.concatenate([one_hot(source_y, k), u_opposite(target_pseudo, k)]))
    loss, _ = kernels.alda_fwd(branch_out, pseudo, tvec, ad.ALDA_EPS)
    return loss


def total_loss(batch: Batch, net: Network, cfg, mode: AdvMode, p: float,
               schedule: TrainSchedule | None = None, rng=None, dann_form="log"):
    """Build the full training objective on the tape: source CE plus
    lam * adversarial term with the reversal coefficient at progress p.

    Returns (loss node, parameter tape view); call ``autodiff.backward`` on
    the node and read gradients off the view.
    """
    if schedule is None:
        schedule = TrainSchedule()
    k = net.c_layer[0].shape[1]
    head_dim = net.d_layers[-1][0].shape[1]
    if mode is AdvMode.DANN and head_dim != 1:
        raise ValueError(f"domain discriminator needs a 1-wide head, got {head_dim}")
    if mode is AdvMode.ALDA and head_dim != k:
        raise ValueError(f"corrected-vector head must be {k}-wide, got {head_dim}")

    nv = net.tape_vars()
    fs = g_forward(nv, ad.const(batch.source_x))
    ft = g_forward(nv, ad.const(batch.target_x))
    ce = ad.softmax_xent(c_forward(nv, fs), batch.source_y)

    rho = grl_rho_at(schedule, p)
    rev = ad.grl(ad.concat_rows(fs, ft), rho)
    d_out = d_forward(nv, rev, cfg.dropout_p, rng)

    ns = batch.source_x.shape[0]
    nt = batch.target_x.shape[0]
    if mode is AdvMode.DANN:
        dom = np.ascontiguousarray(np.concatenate([np.ones(ns), np.zeros(nt)]))
        if dann_form == "reciprocal":
            adv = ad.dann_reciprocal(d_out, dom)
        elif dann_form == "log":
            adv = ad.bce_logits(d_out, dom)
        else:
            raise ValueError(f"unknown dann form {dann_form!r}")
    else:
        yhat_t = np.argmax(net.class_logits(ft.value), axis=1).astype(np.int64)
        pseudo = np.ascontiguousarray(np.concatenate([batch.source_y, yhat_t]))
        tvec = np.ascontiguousarray(
            np.concatenate([one_hot(batch.source_y, k), u_opposite(yhat_t, k)])
        )
        adv = ad.corrected_vector_bce(d_out, pseudo, tvec)

    return ad.add(ce, ad.scale(adv, cfg.lam)), nv
