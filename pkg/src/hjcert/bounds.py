"""Sound output bounds for the networks over input boxes.

Two methods are available:

``"interval"``
    plain interval arithmetic through every layer, and the four-corner rule
    for the embedding inner product.
``"linear"``
    backward linear symbolic propagation (triangle relaxation of unstable
    ReLUs) for every layer, followed by McCormick envelopes on each
    embedding-coordinate product.  Every bound is intersected with the
    interval result, so it is never looser.

All routines are batched: a batch of ``N`` boxes over the joint input
``y = (x, u)`` is given as ``lo, hi`` arrays of shape ``(N, d)``.  Results
are padded outward by a relative ``1e-12`` of the running magnitude of the
layer values so that floating-point rounding cannot break containment.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .envs import Box
from .errors import ContractError
from .net import BaselineQNetwork, Mlp, PolicyNetwork, QNetwork

METHODS = ("interval", "linear")
_PAD = 1e-12


@dataclass
class Interval:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape:
            raise ContractError("interval endpoints must have equal shapes")
        if np.any(self.lo > self.hi) or not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ContractError("invalid interval")

    @property
    def width(self):
        return self.hi - self.lo

    def contains(self, v, tol: float = 0.0):
        return (v >= self.lo - tol) & (v <= self.hi + tol)


@dataclass
class LinearBounds:
    """``A_l y + c_l <= g(y) <= A_u y + c_u`` for all ``y`` in the box."""

    A_l: np.ndarray  # (N, k, d)
    c_l: np.ndarray  # (N, k)
    A_u: np.ndarray
    c_u: np.ndarray

    def evaluate(self, y):
        y = np.asarray(y, dtype=float)
        lower = np.einsum("nkd,nd->nk", self.A_l, y) + self.c_l
        upper = np.einsum("nkd,nd->nk", self.A_u, y) + self.c_u
        return lower, upper

    def concretize(self, lo, hi):
        return _concretize(self.A_l, self.c_l, lo, hi, lower=True), _concretize(self.A_u, self.c_u, lo, hi, lower=False)


# ------------------------------------------------------------ primitives


def interval_affine(W, b, lo, hi):
    """Exact interval image of ``W z + b`` over a box (batched over leading axes)."""
    W = np.asarray(W, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
    out_lo = lo @ Wp.T + hi @ Wn.T + b
    out_hi = hi @ Wp.T + lo @ Wn.T + b
    return out_lo, out_hi


def interval_relu(lo, hi):
    return np.maximum(lo, 0.0), np.maximum(hi, 0.0)


def product_interval(alo, ahi, blo, bhi):
    """Enclosure of ``<a, b>`` for ``a, b`` in boxes: sum of four-corner products."""
    c = np.stack([alo * blo, alo * bhi, ahi * blo, ahi * bhi])
    return c.min(axis=0).sum(axis=-1), c.max(axis=0).sum(axis=-1)


def _concretize(A, c, lo, hi, lower: bool):
    Ap, An = np.maximum(A, 0.0), np.minimum(A, 0.0)
    if lower:
        return np.einsum("nkd,nd->nk", Ap, lo) + np.einsum("nkd,nd->nk", An, hi) + c
    return np.einsum("nkd,nd->nk", Ap, hi) + np.einsum("nkd,nd->nk", An, lo) + c


def _pad(lo, hi, mag):
    p = _PAD * mag
    return lo - p, hi + p


def _relu_relaxation(lo, hi):
    """Triangle relaxation ``alpha_l z <= relu(z) <= alpha_u z + beta_u``."""
    on = lo >= 0
    off = hi <= 0
    unstable = ~(on | off)
    denom = np.where(unstable, hi - lo, 1.0)
    a_u = np.where(on, 1.0, np.where(unstable, hi / denom, 0.0))
    b_u = np.where(unstable, -lo * hi / denom, 0.0)
    a_l = np.where(on, 1.0, np.where(unstable & (hi >= -lo), 1.0, 0.0))
    return a_l, a_u, b_u


# ------------------------------------------------------------ MLP bounds


@dataclass
class MlpBounds:
    pre: list                     # per layer (lo, hi) of pre-activations, (N, width)
    out_lo: np.ndarray            # (N, out)
    out_hi: np.ndarray
    linear: LinearBounds | None = None

    def status(self):
        """Per hidden layer: +1 always-on, -1 always-off, 0 unstable."""
        return [np.where(lo >= 0, 1, np.where(hi <= 0, -1, 0)) for lo, hi in self.pre[:-1]]


def _first_weight(net: Mlp, select):
    W = net.weights[0]
    if select is None:
        return W
    full = np.zeros((W.shape[0], select[1]))
    full[:, select[0]] = W
    return full


def mlp_bounds(net: Mlp, lo, hi, method: str = "linear", select=None) -> MlpBounds:
    """Bounds for every layer of ``net`` over boxes ``[lo, hi]`` of shape ``(N, d)``.

    ``select=(indices, d)`` feeds the network only the given coordinates of
    the ``d``-dimensional box, which keeps linear bounds expressed in the
    joint input space.
    """
    if method not in METHODS:
        raise ContractError(f"unknown bound method {method!r}")
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    weights = [_first_weight(net, select)] + net.weights[1:]
    biases = net.biases
    n_layers = len(weights)

    mag = np.maximum(np.abs(lo), np.abs(hi))
    pre = []
    a_lo, a_hi = lo, hi
    relax = []
    lin = None
    for k in range(n_layers):
        W, b = weights[k], biases[k]
        mag = mag @ np.abs(W).T + np.abs(b)
        z_lo, z_hi = interval_affine(W, b, a_lo, a_hi)
        if method == "linear" and k > 0:
            lin = _backward(weights, biases, relax, k, lo.shape[0])
            l_lo, l_hi = lin.concretize(lo, hi)
            z_lo = np.maximum(z_lo, l_lo)
            z_hi = np.minimum(z_hi, l_hi)
        z_lo, z_hi = _pad(z_lo, z_hi, mag)
        pre.append((z_lo, z_hi))
        if k < n_layers - 1:
            relax.append(_relu_relaxation(z_lo, z_hi))
            a_lo, a_hi = interval_relu(z_lo, z_hi)
            mag = np.maximum(mag, 0.0)
    if method == "linear":
        if n_layers == 1:
            A = np.broadcast_to(weights[0], (lo.shape[0],) + weights[0].shape).copy()
            c = np.broadcast_to(biases[0], (lo.shape[0], biases[0].size)).copy()
            lin = LinearBounds(A, c, A.copy(), c.copy())
        # widen the final linear functions by the rounding pad as well
        p = _PAD * mag
        lin = LinearBounds(lin.A_l, lin.c_l - p, lin.A_u, lin.c_u + p)
    return MlpBounds(pre, pre[-1][0], pre[-1][1], lin)


def _backward(weights, biases, relax, k, n):
    """Linear bounds of layer ``k`` pre-activations in terms of the input."""
    W = weights[k]
    L_u = np.broadcast_to(W, (n,) + W.shape).copy()
    L_l = L_u.copy()
    c_u = np.broadcast_to(biases[k], (n, W.shape[0])).copy()
    c_l = c_u.copy()
    for j in range(k - 1, -1, -1):
        a_l, a_u, b_u = relax[j]
        Up, Un = np.maximum(L_u, 0.0), np.minimum(L_u, 0.0)
        Lp, Ln = np.maximum(L_l, 0.0), np.minimum(L_l, 0.0)
        c_u = c_u + np.einsum("nkj,nj->nk", Up, b_u)
        c_l = c_l + np.einsum("nkj,nj->nk", Ln, b_u)
        coef_u = Up * a_u[:, None, :] + Un * a_l[:, None, :]
        coef_l = Lp * a_l[:, None, :] + Ln * a_u[:, None, :]
        c_u = c_u + coef_u @ biases[j]
        c_l = c_l + coef_l @ biases[j]
        L_u = coef_u @ weights[j]
        L_l = coef_l @ weights[j]
    return LinearBounds(L_l, c_l, L_u, c_u)


# ------------------------------------------------------------ Q bounds


@dataclass
class BoundsResult:
    """Bounds of a Q model over a batch of boxes.

    ``branches`` maps a branch name (``"x"``, ``"u"`` or ``"net"`` for the
    baseline) to its :class:`MlpBounds`.  ``q`` is the enclosure of the
    output; ``q_coef_lo``/``q_coef_hi`` are the input coefficients of the
    linear functions bounding ``Q`` from below/above (linear method only).
    """

    branches: dict
    q: Interval
    q_coef_lo: np.ndarray | None = None
    q_coef_hi: np.ndarray | None = None

    def status(self) -> dict:
        return {name: b.status() for name, b in self.branches.items()}

    def unstable_count(self, index: int = 0) -> int:
        return int(sum(np.sum(s[index] == 0) for st in self.status().values() for s in st))

    def to_json(self, index: int = 0) -> str:
        out = {"q": [float(self.q.lo[index]), float(self.q.hi[index])], "branches": {}}
        for name, b in self.branches.items():
            out["branches"][name] = [
                {"lo": lo[index].tolist(), "hi": hi[index].tolist()} for lo, hi in b.pre
            ]
        return json.dumps(out)


def _mccormick(z1, z2, lo, hi, upper: bool):
    """Linear McCormick bound on ``sum_k z1_k z2_k``; returns ``(value, coef)``."""
    L1, U1 = z1.out_lo, z1.out_hi
    L2, U2 = z2.out_lo, z2.out_hi
    l1, l2 = z1.linear, z2.linear
    if upper:
        planes = [(U2, L1, -L1 * U2), (L2, U1, -U1 * L2)]
    else:
        planes = [(L2, L1, -L1 * L2), (U2, U1, -U1 * U2)]

    def plane_linear(a, bb, c):
        ap, an = np.maximum(a, 0.0)[..., None], np.minimum(a, 0.0)[..., None]
        bp, bn = np.maximum(bb, 0.0)[..., None], np.minimum(bb, 0.0)[..., None]
        if upper:
            A = ap * l1.A_u + an * l1.A_l + bp * l2.A_u + bn * l2.A_l
            c0 = (ap[..., 0] * l1.c_u + an[..., 0] * l1.c_l + bp[..., 0] * l2.c_u + bn[..., 0] * l2.c_l + c)
        else:
            A = ap * l1.A_l + an * l1.A_u + bp * l2.A_l + bn * l2.A_u
            c0 = (ap[..., 0] * l1.c_l + an[..., 0] * l1.c_u + bp[..., 0] * l2.c_l + bn[..., 0] * l2.c_u + c)
        return A, c0

    A0, c0 = plane_linear(*planes[0])
    A1, c1 = plane_linear(*planes[1])
    v0 = _concretize(A0, c0, lo, hi, lower=not upper)
    v1 = _concretize(A1, c1, lo, hi, lower=not upper)
    pick = (v1 < v0) if upper else (v1 > v0)
    A = np.where(pick[..., None], A1, A0).sum(axis=1)
    c = np.where(pick, c1, c0).sum(axis=1)
    val = _concretize(A[:, None, :], c[:, None], lo, hi, lower=not upper)[:, 0]
    return val, A


def q_bounds_batch(model, lo, hi, method: str = "linear") -> BoundsResult:
    """Bounds of a Q model (multiplicative or baseline) over ``(N, m+n)`` boxes."""
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    d = model.state_dim + model.control_dim
    if lo.shape[-1] != d or hi.shape != lo.shape:
        raise ContractError(f"boxes must have shape (N, {d})")
    if isinstance(model, BaselineQNetwork):
        b = mlp_bounds(model.net, lo, hi, method)
        q = Interval(b.out_lo[:, 0], b.out_hi[:, 0])
        if method == "linear":
            return BoundsResult({"net": b}, q, b.linear.A_l[:, 0], b.linear.A_u[:, 0])
        return BoundsResult({"net": b}, q)
    if not isinstance(model, QNetwork):
        raise ContractError(f"unsupported model type {type(model).__name__}")
    m = model.state_dim
    z1 = mlp_bounds(model.x_branch, lo, hi, method, select=(np.arange(m), d))
    z2 = mlp_bounds(model.u_branch, lo, hi, method)
    q_lo, q_hi = product_interval(z1.out_lo, z1.out_hi, z2.out_lo, z2.out_hi)
    mag = np.sum(np.maximum(np.abs(z1.out_lo), np.abs(z1.out_hi)) * np.maximum(np.abs(z2.out_lo), np.abs(z2.out_hi)), axis=-1)
    coef_lo = coef_hi = None
    if method == "linear":
        mc_lo, coef_lo = _mccormick(z1, z2, lo, hi, upper=False)
        mc_hi, coef_hi = _mccormick(z1, z2, lo, hi, upper=True)
        q_lo = np.maximum(q_lo, mc_lo)
        q_hi = np.minimum(q_hi, mc_hi)
    q_lo, q_hi = _pad(q_lo, q_hi, mag)
    return BoundsResult({"x": z1, "u": z2}, Interval(q_lo, q_hi), coef_lo, coef_hi)


def qnet_bounds(model, x_box: Box, u_box: Box, method: str = "linear") -> BoundsResult:
    y = x_box.product(u_box)
    return q_bounds_batch(model, y.lo[None], y.hi[None], method)


def policy_bounds_batch(policy: PolicyNetwork, lo, hi, method: str = "linear"):
    """Enclosure of the squashed policy output over ``(N, m)`` state boxes."""
    b = mlp_bounds(policy.net, lo, hi, method)
    return policy.squash(b.out_lo), policy.squash(b.out_hi)


def min_ia_q(model, x_next_box: Box, u_box: Box, method: str = "interval") -> float:
    """Sound lower bound on ``min_{u'} Q(x', u')`` over every ``x'`` in the box."""
    return float(qnet_bounds(model, x_next_box, u_box, method).q.lo[0])


def min_ia_q_points(model, x_next, u_lo, u_hi, method: str = "interval") -> np.ndarray:
    """Batched :func:`min_ia_q` for degenerate (point) next-state boxes."""
    x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
    n = x_next.shape[0]
    lo = np.concatenate([x_next, np.broadcast_to(u_lo, (n, len(u_lo)))], axis=1)
    hi = np.concatenate([x_next, np.broadcast_to(u_hi, (n, len(u_hi)))], axis=1)
    return q_bounds_batch(model, lo, hi, method).q.lo
