"""Reverse-mode autodiff over 2-D float64 arrays, sized for small networks.

A ``Var`` wraps a value and remembers the op that produced it; the graph those
ops build *is* the tape. ``backward()`` on a scalar output walks the tape once
in reverse topological order with a fixed visit order, so gradient
accumulation is deterministic and repeated runs are bit-identical.

Losses with awkward compositional gradients (softmax cross-entropy, BCE on
logits, the corrected-vector adversarial loss) are single fused nodes with
analytic backward functions; everything is checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from . import kernels

RECIP_EPS = 1e-7
ALDA_EPS = 1e-12


def as_matrix(x) -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    return kernels.softmax_rows(as_matrix(m))


class Var:
    """A tape node: a value plus the recipe for its gradient."""

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={np.shape(self.value)})"


def param(value) -> Var:
    return Var(as_matrix(value))


def bias_param(value) -> Var:
    v = np.ascontiguousarray(value, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"bias must be 1-D, got shape {v.shape}")
    return Var(v)


def const(value) -> Var:
    return Var(as_matrix(value))


def _accumulate(var, g):
    var.grad = g if var.grad is None else var.grad + g


def mm(a: Var, b: Var) -> Var:
    value = matmul(a.value, b.value)

    def bwd(up):
        _accumulate(a, up @ b.value.T)
        _accumulate(b, a.value.T @ up)

    return Var(value, (a, b), bwd)


def add_bias(x: Var, b: Var) -> Var:
    value = x.value + b.value[None, :]

    def bwd(up):
        _accumulate(x, up)
        _accumulate(b, up.sum(axis=0))

    return Var(value, (x, b), bwd)


def relu(x: Var) -> Var:
    value = kernels.relu(x.value)

    def bwd(up):
        _accumulate(x, kernels.relu_grad(up, x.value))

    return Var(value, (x,), bwd)


def dropout(x: Var, mask: np.ndarray) -> Var:
    """Multiply by a caller-supplied inverted-dropout mask (0 or 1/(1-p))."""
    value = x.value * mask

    def bwd(up):
        _accumulate(x, up * mask)

    return Var(value, (x,), bwd)


def grl(x: Var, rho: float) -> Var:
    """Gradient reversal: identity forward, upstream scaled by -rho backward."""
    if rho < 0:
        raise ValueError("rho must be >= 0")

    def bwd(up):
        _accumulate(x, -rho * up)

    return Var(x.value, (x,), bwd)


def concat_rows(a: Var, b: Var) -> Var:
    value = np.concatenate([a.value, b.value], axis=0)
    split = a.value.shape[0]

    def bwd(up):
        _accumulate(a, up[:split])
        _accumulate(b, up[split:])

    return Var(value, (a, b), bwd)


def scale(x: Var, s: float) -> Var:
    def bwd(up):
        _accumulate(x, s * up)

    return Var(s * x.value, (x,), bwd)


def add(a: Var, b: Var) -> Var:
    def bwd(up):
        _accumulate(a, up)
        _accumulate(b, up)

    return Var(a.value + b.value, (a, b), bwd)


def softmax_xent(logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    loss, probs = kernels.softmax_xent_fwd(logits.value, labels)

    def bwd(up):
        _accumulate(logits, kernels.softmax_xent_bwd(probs, labels, float(up)))

    return Var(np.float64(loss), (logits,), bwd)


def bce_logits(logits: Var, targets: np.ndarray) -> Var:
    """Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].

    ``logits`` is an (n, 1) column; targets a length-n vector.
    """
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    flat = np.ascontiguousarray(logits.value.reshape(-1))
    loss, sig = kernels.bce_logits_fwd(flat, targets)

    def bwd(up):
        g = kernels.bce_logits_bwd(sig, targets, float(up))
        _accumulate(logits, g.reshape(logits.value.shape))

    return Var(np.float64(loss), (logits,), bwd)


def dann_reciprocal(logits: Var, targets: np.ndarray) -> Var:
    """Mean of d/sigma(z) + (1-d)/(1-sigma(z)), the literal reciprocal form."""
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    flat = np.ascontiguousarray(logits.value.reshape(-1))
    loss, sig = kernels.dann_recip_fwd(flat, targets, RECIP_EPS)

    def bwd(up):
        g = kernels.dann_recip_bwd(sig, targets, float(up))
        _accumulate(logits, g.reshape(logits.value.shape))

    return Var(np.float64(loss), (logits,), bwd)


def corrected_vector_bce(logits: Var, pseudo: np.ndarray, targets: np.ndarray) -> Var:
    """BCE of confusion-corrected class vectors against per-sample targets.

    Row i of ``logits`` parameterizes a per-class confusion response
    xi = sigmoid(logits[i]); the corrected vector c places xi[pseudo[i]] on
    the predicted class and spreads (1 - xi[pseudo[i]])/(K-1) elsewhere.
    The loss is elementwise BCE of c against ``targets`` row i, averaged over
    classes and samples.
    """
    pseudo = np.ascontiguousarray(pseudo, dtype=np.int64)
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    loss, xi = kernels.alda_fwd(logits.value, pseudo, targets, ALDA_EPS)

    def bwd(up):
        _accumulate(logits, kernels.alda_bwd(xi, pseudo, targets, float(up), ALDA_EPS))

    return Var(np.float64(loss), (logits,), bwd)


def backward(out: Var) -> None:
    """Run reverse-mode accumulation from a scalar output.

    Visits every reachable node exactly once, children before parents, in a
    deterministic order. Raises on non-scalar outputs.
    """
    if np.size(out.value) != 1:
        raise ValueError(f"backward requires a scalar output, got shape {np.shape(out.value)}")

    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))

    out.grad = np.ones_like(out.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
