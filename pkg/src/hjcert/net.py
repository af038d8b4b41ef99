"""Dense ReLU networks with hand-written backpropagation.

Three model kinds share the :class:`Mlp` building block:

* :class:`QNetwork` -- the multiplicative action-value network,
  ``Q(x, u) = <Z1(x), Z2(x, u)>`` with an X branch on the state and a U branch
  on the concatenated state and control.
* :class:`BaselineQNetwork` -- a plain MLP on ``(x, u)`` used for comparison.
* :class:`PolicyNetwork` -- a state-to-control MLP whose output is squashed
  into the control box by ``tanh``.

Everything is float64 and batched along the leading axis.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


class Mlp:
    """Affine layers with ReLU between them and an identity output layer."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ContractError("an Mlp needs one bias per weight matrix and at least one layer")
        self.weights = [np.array(w, dtype=float, ndmin=2) for w in weights]
        self.biases = [np.array(b, dtype=float, ndmin=1) for b in biases]
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise ContractError(f"layer {j}: weight rows {w.shape[0]} != bias size {b.shape[0]}")
            if j and w.shape[1] != self.weights[j - 1].shape[0]:
                raise ContractError(f"layer {j}: input size {w.shape[1]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractError(f"layer {j}: non-finite parameters")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, final_scale: float = 0.1) -> "Mlp":
        """Kaiming-uniform weights, zero biases, last layer scaled down."""
        weights, biases = [], []
        for j, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            if j == len(sizes) - 2:
                w *= final_scale
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, z):
        """Return ``(output, cache)``; the cache holds each layer's input and pre-activation."""
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.sizes[0]:
            raise ContractError(f"expected input size {self.sizes[0]}, got {z.shape[-1]}")
        cache = []
        last = len(self.weights) - 1
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = z @ w.T + b
            cache.append((z, pre))
            z = pre if j == last else np.maximum(pre, 0.0)
        return z, cache

    def __call__(self, z):
        return self.forward(z)[0]

    def backward(self, cache, upstream):
        """Gradients of ``sum(upstream * output)``: ``(param_grads, input_grad)``."""
        g = np.asarray(upstream, dtype=float)
        grads = [None] * (2 * len(self.weights))
        last = len(self.weights) - 1
        for j in range(last, -1, -1):
            z, pre = cache[j]
            if j != last:
                g = g * (pre > 0)
            g2 = g.reshape(-1, g.shape[-1])
            grads[2 * j] = g2.T @ z.reshape(-1, z.shape[-1])
            grads[2 * j + 1] = g2.sum(axis=0)
            g = g @ self.weights[j]
        return grads, g

    def to_layers(self) -> list:
        return [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(self.weights, self.biases)]

    @classmethod
    def from_layers(cls, layers) -> "Mlp":
        return cls([l["w"] for l in layers], [l["b"] for l in layers])


class QNetwork:
    kind = "qnet"

    def __init__(self, x_branch: Mlp, u_branch: Mlp, state_dim: int, control_dim: int):
        if x_branch.sizes[-1] != u_branch.sizes[-1]:
            raise ContractError("branch embeddings must have equal size")
        if x_branch.sizes[0] != state_dim or u_branch.sizes[0] != state_dim + control_dim:
            raise ContractError("branch input sizes do not match state/control dims")
        self.x_branch = x_branch
        self.u_branch = u_branch
        self.state_dim = state_dim
        self.control_dim = control_dim

    @classmethod
    def init(cls, state_dim, control_dim, rng, hidden=(32, 32), embed_dim=8) -> "QNetwork":
        xb = Mlp.init([state_dim, *hidden, embed_dim], rng)
        ub = Mlp.init([state_dim + control_dim, *hidden, embed_dim], rng)
        return cls(xb, ub, state_dim, control_dim)

    @property
    def embed_dim(self) -> int:
        return self.x_branch.sizes[-1]

    @property
    def n_params(self) -> int:
        return self.x_branch.n_params + self.u_branch.n_params

    def params(self) -> list:
        return self.x_branch.params() + self.u_branch.params()

    def copy(self) -> "QNetwork":
        return QNetwork(self.x_branch.copy(), self.u_branch.copy(), self.state_dim, self.control_dim)

    def embeddings(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        z1, c1 = self.x_branch.forward(x)
        z2, c2 = self.u_branch.forward(np.concatenate([x, u], axis=-1))
        return z1, z2, (c1, c2)

    def forward(self, x, u):
        z1, z2, (c1, c2) = self.embeddings(x, u)
        return np.sum(z1 * z2, axis=-1), (z1, z2, c1, c2)

    def __call__(self, x, u):
        return self.forward(x, u)[0]

    def backward(self, cache, upstream):
        """Returns ``(param_grads, dQ/dx, dQ/du)`` for ``sum(upstream * Q)``."""
        z1, z2, c1, c2 = cache
        up = np.asarray(upstream, dtype=float)[..., None]
        g1, dx1 = self.x_branch.backward(c1, up * z2)
        g2, dxu = self.u_branch.backward(c2, up * z1)
        m = self.state_dim
        return g1 + g2, dx1 + dxu[..., :m], dxu[..., m:]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dims": {"state_dim": self.state_dim, "control_dim": self.control_dim,
                     "x_branch": self.x_branch.sizes, "u_branch": self.u_branch.sizes},
            "layers": self.x_branch.to_layers() + self.u_branch.to_layers(),
        }


class BaselineQNetwork:
    """Fully connected comparison network ``Q(x, u) = MLP([x, u])``."""

    kind = "baseline"

    def __init__(self, net: Mlp, state_dim: int, control_dim: int):
        if net.sizes[0] != state_dim + control_dim or net.sizes[-1] != 1:
            raise ContractError("baseline network must map state+control to a scalar")
        self.net = net
        self.state_dim = state_dim
        self.control_dim = control_dim

    @classmethod
    def init(cls, state_dim, control_dim, rng, hidden=(32, 32)) -> "BaselineQNetwork":
        return cls(Mlp.init([state_dim + control_dim, *hidden, 1], rng), state_dim, control_dim)

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def params(self) -> list:
        return self.net.params()

    def copy(self) -> "BaselineQNetwork":
        return BaselineQNetwork(self.net.copy(), self.state_dim, self.control_dim)

    def forward(self, x, u):
        out, cache = self.net.forward(np.concatenate([np.asarray(x, float), np.asarray(u, float)], axis=-1))
        return out[..., 0], cache

    def __call__(self, x, u):
        return self.forward(x, u)[0]

    def backward(self, cache, upstream):
        grads, dxu = self.net.backward(cache, np.asarray(upstream, dtype=float)[..., None])
        m = self.state_dim
        return grads, dxu[..., :m], dxu[..., m:]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dims": {"state_dim": self.state_dim, "control_dim": self.control_dim, "sizes": self.net.sizes},
            "layers": self.net.to_layers(),
        }


class PolicyNetwork:
    """``pi(x) = center + halfwidth * tanh(MLP(x))``, always inside the control box."""

    kind = "policy"

    def __init__(self, net: Mlp, control_lo, control_hi):
        self.net = net
        self.control_lo = np.asarray(control_lo, dtype=float)
        self.control_hi = np.asarray(control_hi, dtype=float)
        if net.sizes[-1] != self.control_lo.size:
            raise ContractError("policy output size must equal control dimension")
        self.center = 0.5 * (self.control_lo + self.control_hi)
        self.halfwidth = 0.5 * (self.control_hi - self.control_lo)

    @classmethod
    def init(cls, state_dim, control_lo, control_hi, rng, hidden=(32, 32)) -> "PolicyNetwork":
        n = np.asarray(control_lo).size
        return cls(Mlp.init([state_dim, *hidden, n], rng), control_lo, control_hi)

    @property
    def state_dim(self) -> int:
        return self.net.sizes[0]

    @property
    def n_params(self) -> int:
        return self.net.n_params

    def params(self) -> list:
        return self.net.params()

    def copy(self) -> "PolicyNetwork":
        return PolicyNetwork(self.net.copy(), self.control_lo, self.control_hi)

    def squash(self, raw):
        u = self.center + self.halfwidth * np.tanh(raw)
        return np.clip(u, self.control_lo, self.control_hi)

    def forward(self, x):
        raw, cache = self.net.forward(x)
        t = np.tanh(raw)
        u = np.clip(self.center + self.halfwidth * t, self.control_lo, self.control_hi)
        return u, (t, cache)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, upstream):
        """Returns ``(param_grads, du/dx^T upstream)``."""
        t, net_cache = cache
        g = np.asarray(upstream, dtype=float) * self.halfwidth * (1.0 - t * t)
        return self.net.backward(net_cache, g)

    def input_jacobian(self, x):
        """``(N, control_dim, state_dim)`` Jacobian of the policy output."""
        raw, cache = self.net.forward(np.atleast_2d(x))
        t = np.tanh(raw)
        rows = []
        for k in range(raw.shape[-1]):
            e = np.zeros_like(raw)
            e[:, k] = 1.0
            _, g = self.backward((t, cache), e)
            rows.append(g)
        return np.stack(rows, axis=1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dims": {"sizes": self.net.sizes, "control_lo": self.control_lo.tolist(),
                     "control_hi": self.control_hi.tolist()},
            "layers": self.net.to_layers(),
        }


def model_from_dict(d: dict):
    kind = d.get("kind")
    dims = d.get("dims", {})
    layers = d.get("layers", [])
    try:
        if kind == "qnet":
            nx = len(dims["x_branch"]) - 1
            xb = Mlp.from_layers(layers[:nx])
            ub = Mlp.from_layers(layers[nx:])
            if xb.sizes != list(dims["x_branch"]) or ub.sizes != list(dims["u_branch"]):
                raise ContractError("layer shapes disagree with declared dims")
            return QNetwork(xb, ub, int(dims["state_dim"]), int(dims["control_dim"]))
        if kind == "baseline":
            net = Mlp.from_layers(layers)
            if net.sizes != list(dims["sizes"]):
                raise ContractError("layer shapes disagree with declared dims")
            return BaselineQNetwork(net, int(dims["state_dim"]), int(dims["control_dim"]))
        if kind == "policy":
            net = Mlp.from_layers(layers)
            if net.sizes != list(dims["sizes"]):
                raise ContractError("layer shapes disagree with declared dims")
            return PolicyNetwork(net, dims["control_lo"], dims["control_hi"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ContractError):
            raise
        raise ContractError(f"malformed model file: {exc}") from exc
    raise ContractError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    with open(path, "w") as f:
        json.dump(model.to_dict(), f)


def load_model(path):
    with open(path) as f:
        return model_from_dict(json.load(f))


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """In-place Adam update of ``params``; returns ``(params, state)``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise ContractError("gradient list does not match parameter list")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
