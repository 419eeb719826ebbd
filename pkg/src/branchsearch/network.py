"""Three-part architecture: extractor G, classifier C, auxiliary branch D.

G is a small two-layer ReLU MLP (input_dim -> feature_dim -> feature_dim), C a
linear head on G's features, and D a bottleneck plus a stack of equal-width
hidden layers behind a gradient reversal, with dropout on the hidden
activations. D's shape is what the search tunes: bottleneck width, hidden
width, and layer count, plus the loss weight and dropout rate.

Parameters live in plain float64 arrays owned by the Network; tape nodes wrap
them without copying, so gradients land next to the arrays they update.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import kernels

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BranchConfig:
    """Searchable description of the auxiliary branch."""

    lam: float
    dropout_p: float
    n_fc_layers: int
    fc_h: int
    fc_b: int

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if int(self.n_fc_layers) != self.n_fc_layers or self.n_fc_layers < 1:
            raise ValueError(f"n_fc_layers must be an integer >= 1, got {self.n_fc_layers}")
        if int(self.fc_h) != self.fc_h or self.fc_h < 1:
            raise ValueError(f"fc_h must be a positive integer, got {self.fc_h}")
        if int(self.fc_b) != self.fc_b or self.fc_b < 1:
            raise ValueError(f"fc_b must be a positive integer, got {self.fc_b}")


@dataclass(frozen=True)
class TrainSchedule:
    """Optimizer schedule; defaults follow the protocol we reproduce."""

    mu0: float = 0.001
    alpha: float = 10.0
    beta: float = 0.75
    gamma: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 36
    head_lr_multiplier: float = 10.0
    head_weight_decay: float = 0.001

    def __post_init__(self):
        if not self.mu0 > 0:
            raise ValueError("mu0 must be positive")
        for name in ("alpha", "beta", "gamma", "momentum", "weight_decay", "head_weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.head_lr_multiplier > 0:
            raise ValueError("head_lr_multiplier must be positive")


def _check_progress(p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must be in [0,1], got {p}")


def lr_at(schedule: TrainSchedule, p: float) -> float:
    """Annealed learning rate mu0 / (1 + alpha*p)^beta."""
    _check_progress(p)
    return schedule.mu0 / (1.0 + schedule.alpha * p) ** schedule.beta


def grl_rho_at(schedule: TrainSchedule, p: float) -> float:
    """Reversal coefficient 2/(1 + exp(-gamma*p)) - 1, ramping 0 -> 1."""
    _check_progress(p)
    return 2.0 / (1.0 + np.exp(-schedule.gamma * p)) - 1.0


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Network:
    """Parameter container with forward passes for training and evaluation.

    Layers are (W, b) pairs; ``g_layers`` and the classifier belong to the
    base optimizer group, the whole branch (bottleneck included) to the head
    group, which trains with a larger learning rate and its own weight decay.
    """

    def __init__(self, cfg, g_layers, c_layer, d_layers, velocities=None):
        self.cfg = cfg
        self.g_layers = g_layers
        self.c_layer = c_layer
        self.d_layers = d_layers
        if velocities is None:
            velocities = [np.zeros_like(a) for _, a in self.flat_params()]
        self.velocities = velocities

    def flat_params(self):
        """Flattened (group, array) list in a fixed traversal order."""
        out = []
        for w, b in self.g_layers:
            out.append(("base", w))
            out.append(("base", b))
        out.append(("base", self.c_layer[0]))
        out.append(("base", self.c_layer[1]))
        for w, b in self.d_layers:
            out.append(("head", w))
            out.append(("head", b))
        return out

    def param_count(self):
        return sum(a.size for _, a in self.flat_params())

    def d_param_count(self):
        return sum(w.size + b.size for w, b in self.d_layers)

    # no-tape evaluation path; dropout is off here by construction
    def features(self, x):
        h = np.ascontiguousarray(x, dtype=np.float64)
        for w, b in self.g_layers:
            h = kernels.relu(h @ w + b[None, :])
        return h

    def class_logits(self, feats):
        w, b = self.c_layer
        return feats @ w + b[None, :]

    def predict(self, x):
        """Class probabilities and features for a batch, deterministically."""
        feats = self.features(x)
        probs = kernels.softmax_rows(self.class_logits(feats))
        return probs, feats

    def branch_logits(self, feats):
        h = np.ascontiguousarray(feats, dtype=np.float64)
        for w, b in self.d_layers[:-1]:
            h = kernels.relu(h @ w + b[None, :])
        w, b = self.d_layers[-1]
        return h @ w + b[None, :]

    def tape_vars(self):
        """Wrap every parameter in a tape node, aliasing the stored arrays."""
        g = [(ad.param(w), ad.bias_param(b)) for w, b in self.g_layers]
        c = (ad.param(self.c_layer[0]), ad.bias_param(self.c_layer[1]))
        d = [(ad.param(w), ad.bias_param(b)) for w, b in self.d_layers]
        return NetVars(g, c, d)


@dataclass
class NetVars:
    """Tape-node view of a Network's parameters for one training step."""

    g: list
    c: tuple
    d: list

    def flat(self):
        out = []
        for w, b in self.g:
            out.append(w)
            out.append(b)
        out.append(self.c[0])
        out.append(self.c[1])
        for w, b in self.d:
            out.append(w)
            out.append(b)
        return out

    def grads(self):
        """Gradients aligned with Network.flat_params; zeros where unused."""
        return [np.zeros_like(v.value) if v.grad is None else v.grad for v in self.flat()]


def g_forward(nv: NetVars, x: ad.Var) -> ad.Var:
    h = x
    for w, b in nv.g:
        h = ad.relu(ad.add_bias(ad.mm(h, w), b))
    return h


def c_forward(nv: NetVars, feats: ad.Var) -> ad.Var:
    return ad.add_bias(ad.mm(feats, nv.c[0]), nv.c[1])


def d_forward(nv: NetVars, feats: ad.Var, dropout_p: float, rng=None) -> ad.Var:
    """Branch forward. ``rng`` draws dropout masks; None means evaluation."""
    h = ad.relu(ad.add_bias(ad.mm(feats, nv.d[0][0]), nv.d[0][1]))
    for w, b in nv.d[1:-1]:
        h = ad.relu(ad.add_bias(ad.mm(h, w), b))
        if rng is not None and dropout_p > 0.0:
            keep = (rng.random(h.value.shape) >= dropout_p) / (1.0 - dropout_p)
            h = ad.dropout(h, keep)
    w, b = nv.d[-1]
    return ad.add_bias(ad.mm(h, w), b)


def build_network(cfg: BranchConfig, input_dim, feature_dim, n_classes, branch_out_dim, seed) -> Network:
    """Initialize all three parts with Glorot-uniform weights, zero biases."""
    for name, v in (("input_dim", input_dim), ("feature_dim", feature_dim),
                    ("n_classes", n_classes), ("branch_out_dim", branch_out_dim)):
        if v < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    rng = np.random.default_rng(seed)

    g_dims = [input_dim, feature_dim, feature_dim]
    g_layers = []
    for fi, fo in zip(g_dims[:-1], g_dims[1:]):
        g_layers.append((_glorot(rng, fi, fo), np.zeros(fo)))

    c_layer = (_glorot(rng, feature_dim, n_classes), np.zeros(n_classes))

    d_dims = [feature_dim, cfg.fc_b] + [cfg.fc_h] * cfg.n_fc_layers + [branch_out_dim]
    d_layers = []
    for fi, fo in zip(d_dims[:-1], d_dims[1:]):
        d_layers.append((_glorot(rng, fi, fo), np.zeros(fo)))

    return Network(cfg, g_layers, c_layer, d_layers)


def sgd_step(net: Network, grads, schedule: TrainSchedule, p: float) -> None:
    """Momentum SGD update in place; branch parameters use the head group."""
    params = net.flat_params()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradients, got {len(grads)}")
    lr = lr_at(schedule, p)
    for (group, arr), vel, g in zip(params, net.velocities, grads):
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {arr.shape}")
        if group == "head":
            lr_g = lr * schedule.head_lr_multiplier
            wd = schedule.head_weight_decay
        else:
            lr_g = lr
            wd = schedule.weight_decay
        kernels.sgd_update(
            arr.reshape(-1), np.ascontiguousarray(g.reshape(-1)), vel.reshape(-1),
            lr_g, schedule.momentum, wd,
        )


def save_checkpoint(net: Network, path) -> None:
    """Write parameters, velocities and config to one npz; bit-exact restore."""
    arrays = {}
    for i, (_, a) in enumerate(net.flat_params()):
        arrays[f"p{i}"] = a
    for i, v in enumerate(net.velocities):
        arrays[f"v{i}"] = v
    meta = {
        "version": CHECKPOINT_VERSION,
        "cfg": asdict(net.cfg),
        "g_shapes": [[list(w.shape), list(b.shape)] for w, b in net.g_layers],
        "c_shape": [list(net.c_layer[0].shape), list(net.c_layer[1].shape)],
        "d_shapes": [[list(w.shape), list(b.shape)] for w, b in net.d_layers],
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with io.BytesIO() as buf:
        np.savez(buf, **arrays)
        data = buf.getvalue()
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path) -> Network:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = BranchConfig(**meta["cfg"])
        flat = []
        i = 0
        while f"p{i}" in z:
            flat.append(np.ascontiguousarray(z[f"p{i}"]))
            i += 1
        velocities = [np.ascontiguousarray(z[f"v{j}"]) for j in range(i)]
    pos = 0

    def take(n):
        nonlocal pos
        chunk = flat[pos:pos + n]
        pos += n
        return chunk

    g_layers = [tuple(take(2)) for _ in meta["g_shapes"]]
    c_layer = tuple(take(2))
    d_layers = [tuple(take(2)) for _ in meta["d_shapes"]]
    if pos != len(flat):
        raise ValueError("checkpoint parameter count does not match its shape table")
    return Network(cfg, g_layers, c_layer, d_layers, velocities)
