"""Pretraining, policy fitting and counterexample fine-tuning of Q models."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import envs
from .errors import ContractError, DivergenceError
from .net import AdamState, PolicyNetwork, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    h_x: float


@dataclass
class Transitions:
    """Struct-of-arrays batch of :class:`Transition` records."""

    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    h_x: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Transition(self.x[i], self.u[i], self.x_next[i], float(self.h_x[i]))
        return Transitions(self.x[i], self.u[i], self.x_next[i], self.h_x[i])


@dataclass
class TrainConfig:
    gamma_start: float = 0.85
    gamma_end: float = 0.9999
    anneal_steps: int = 6000
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 60
    seed: int = 0
    cex_weight: float = 10.0
    replay_capacity: int = 50_000
    target_refresh: int = 200
    policy_steps: int = 300
    # warm start of the policy by regression onto the best grid control
    policy_distill_steps: int = 300
    # next-state value in the fine-tuning anchor: "policy" uses Q(x', pi(x'))
    # only, "grid" also takes the minimum over a coarse control grid
    finetune_next: str = "policy"
    finetune_steps: int = 400
    # margins under which a counterexample still counts as unrepaired
    repair_margin: float = 0.02
    # fine-tuning anchor: "margin" (contracted target, see margin_target) or
    # "discounted" (the pretraining target at gamma_end)
    anchor: str = "margin"
    anchor_gamma: float = 0.5
    anchor_margin: float = 0.05
    con_margin: float = 0.02
    anchor_cap: float = 0.5
    # weight on squared errors where Q sits below its target
    under_weight: float = 4.0
    # hinge penalties on fresh random pairs each fine-tuning step (0 = off)
    dense_weight: float = 0.0
    dense_batch: int = 2048
    # share of the dense batch with one coordinate pinned to a box face
    dense_edge: float = 0.25
    dense_con_margin: float = 0.02
    dense_inv_margin: float = 0.02
    dense_next_margin: float = 0.02
    # per-round geometric lr decay factor reached after lr_decay_rounds
    lr_end: float = 1.0
    lr_decay_rounds: int = 40

    def __post_init__(self):
        if not 0 < self.gamma_start <= self.gamma_end < 1:
            raise ContractError("need 0 < gamma_start <= gamma_end < 1")
        if self.cex_weight < 0:
            raise ContractError("cex_weight must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be positive and epochs non-negative")
        if self.finetune_next not in ("policy", "grid"):
            raise ContractError(f"unknown finetune_next {self.finetune_next!r}")
        if self.anchor not in ("margin", "discounted"):
            raise ContractError(f"unknown anchor {self.anchor!r}")
        if not 0 < self.anchor_gamma <= 1 or self.under_weight <= 0:
            raise ContractError("need 0 < anchor_gamma <= 1 and under_weight > 0")
        if self.dense_weight < 0 or not 0 <= self.dense_edge <= 1 or self.dense_batch < 1:
            raise ContractError("need dense_weight >= 0, 0 <= dense_edge <= 1 and dense_batch >= 1")
        if not 0 < self.lr_end <= 1 or self.lr_decay_rounds < 1:
            raise ContractError("need 0 < lr_end <= 1 and lr_decay_rounds >= 1")

    def gamma(self, step: int) -> float:
        if self.anneal_steps <= 0:
            return self.gamma_end
        a = min(step / self.anneal_steps, 1.0)
        return self.gamma_start + a * (self.gamma_end - self.gamma_start)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CounterexampleSet:
    """Pairs that violate constraint satisfaction (``con``) or forward invariance (``inv``)."""

    con_x: np.ndarray
    con_u: np.ndarray
    inv_x: np.ndarray
    inv_u: np.ndarray
    con_residual: np.ndarray = None   # (Q, h) at discovery
    inv_residual: np.ndarray = None   # (Q, next value) at discovery

    @classmethod
    def empty(cls, state_dim: int, control_dim: int) -> "CounterexampleSet":
        z = lambda d: np.zeros((0, d))
        return cls(z(state_dim), z(control_dim), z(state_dim), z(control_dim), z(2), z(2))

    def __post_init__(self):
        if self.con_residual is None:
            self.con_residual = np.full((len(self.con_x), 2), np.nan)
        if self.inv_residual is None:
            self.inv_residual = np.full((len(self.inv_x), 2), np.nan)

    @property
    def n_con(self) -> int:
        return self.con_x.shape[0]

    @property
    def n_inv(self) -> int:
        return self.inv_x.shape[0]

    def __len__(self):
        return self.n_con + self.n_inv

    def _checked(self, x, u, residual):
        x, u = np.atleast_2d(x), np.atleast_2d(u)
        if x.shape[1] != self.con_x.shape[1] or u.shape[1] != self.con_u.shape[1] or len(x) != len(u):
            raise ContractError(f"counterexample shapes {x.shape}, {u.shape} do not fit the set")
        r = np.full((len(x), 2), np.nan) if residual is None else np.atleast_2d(residual)
        return x, u, r

    def add_con(self, x, u, residual=None):
        x, u, r = self._checked(x, u, residual)
        self.con_x = np.concatenate([self.con_x, x])
        self.con_u = np.concatenate([self.con_u, u])
        self.con_residual = np.concatenate([self.con_residual, r])

    def add_inv(self, x, u, residual=None):
        x, u, r = self._checked(x, u, residual)
        self.inv_x = np.concatenate([self.inv_x, x])
        self.inv_u = np.concatenate([self.inv_u, u])
        self.inv_residual = np.concatenate([self.inv_residual, r])

    def extend(self, other: "CounterexampleSet", cap: int | None = None):
        self.add_con(other.con_x, other.con_u, other.con_residual)
        self.add_inv(other.inv_x, other.inv_u, other.inv_residual)
        if cap is not None:
            keep_c = slice(max(0, self.n_con - cap), None)
            keep_i = slice(max(0, self.n_inv - cap), None)
            self.con_x, self.con_u, self.con_residual = self.con_x[keep_c], self.con_u[keep_c], self.con_residual[keep_c]
            self.inv_x, self.inv_u, self.inv_residual = self.inv_x[keep_i], self.inv_u[keep_i], self.inv_residual[keep_i]

    def select(self, con_mask, inv_mask) -> "CounterexampleSet":
        return CounterexampleSet(self.con_x[con_mask], self.con_u[con_mask], self.inv_x[inv_mask],
                                 self.inv_u[inv_mask], self.con_residual[con_mask], self.inv_residual[inv_mask])


# ---------------------------------------------------------------- data


def collect_transitions(env: envs.EnvSpec, behavior: PolicyNetwork | None, n: int, seed: int) -> Transitions:
    """``n`` transitions from uniform states; controls are 50/50 behaviour or uniform.

    One row of uniforms is drawn per sample, so a run with ``n`` samples is a
    prefix of any longer run with the same seed.
    """
    if n <= 0:
        raise ContractError("n must be positive")
    m, k = env.state_dim, env.control_dim
    r = np.random.default_rng(seed).random((n, m + k + 1))
    sb, cb = env.state_box, env.control_box
    x = sb.lo + sb.width * r[:, :m]
    u = cb.lo + cb.width * r[:, m:m + k]
    if behavior is not None:
        use_pi = r[:, -1] < 0.5
        u = np.where(use_pi[:, None], behavior(x), u)
    x_next = envs.step(env, x, u, check=False)
    return Transitions(x, u, x_next, envs.constraint(env, x))


def control_grid(env: envs.EnvSpec, per_dim: int | None = None) -> np.ndarray:
    if per_dim is None:
        per_dim = 9 if env.control_dim == 1 else 5
    cb = env.control_box
    axes = [np.linspace(cb.lo[d], cb.hi[d], per_dim) for d in range(env.control_dim)]
    return np.array(list(itertools.product(*axes)))


def fine_control_grid(env: envs.EnvSpec) -> np.ndarray:
    """Denser grid used to warm-start the policy."""
    return control_grid(env, 33 if env.control_dim == 1 else 9)


def pretrain_target(h_x, q_next, gamma):
    """Discounted safety Bellman target ``(1 - g) h + g max(h, q_next)``."""
    if not np.all((np.asarray(gamma) > 0) & (np.asarray(gamma) < 1)):
        raise ContractError("gamma must lie in (0, 1)")
    h_x = np.asarray(h_x, dtype=float)
    return (1.0 - gamma) * h_x + gamma * np.maximum(h_x, q_next)


def margin_target(h_x, q_next, gamma, margin, con_margin, cap=np.inf):
    """Contracted target ``min(cap, max(h + con_margin, q_next / gamma + margin))``.

    A function with ``Q >= margin_target(h, min_u' Q(x', u'))`` everywhere has
    ``Q >= h + con_margin`` and, wherever ``Q <= 0``, a next value of at most
    ``gamma * (Q - margin) < 0``.  Its zero-sublevel set therefore satisfies
    both certificate conditions with slack, which is what lets interval
    branch and bound close the boxes straddling the boundary.
    """
    h_x = np.asarray(h_x, dtype=float)
    return np.minimum(cap, np.maximum(h_x + con_margin, np.asarray(q_next) / gamma + margin))


def next_values(q, policy: PolicyNetwork, x_next, grid: np.ndarray | None = None, chunk: int = 8192):
    """``min(Q(x', pi(x')), min_g Q(x', u_g))`` over an optional control grid."""
    out = np.empty(len(x_next))
    for s in range(0, len(x_next), chunk):
        xs = x_next[s:s + chunk]
        v = q(xs, policy(xs))
        if grid is not None and len(grid):
            xg = np.repeat(xs, len(grid), axis=0)
            ug = np.tile(grid, (len(xs), 1))
            v = np.minimum(v, q(xg, ug).reshape(len(xs), len(grid)).min(axis=1))
        out[s:s + chunk] = v
    return out


# ---------------------------------------------------------------- losses


def bellman_loss(q, x, u, target, under_weight: float = 1.0):
    """Mean squared error and its parameter gradients.

    With ``under_weight > 1`` errors where ``Q`` lies below the target are
    weighted more, which biases the fit towards an upper envelope.
    """
    val, cache = q.forward(x, u)
    err = val - target
    w = np.where(err < 0, under_weight, 1.0) if under_weight != 1.0 else 1.0
    grads, _, _ = q.backward(cache, 2.0 * w * err / len(err))
    return float(np.mean(w * err * err)), grads


def policy_loss(policy: PolicyNetwork, q, x):
    """Mean ``Q(x, pi(x))`` and its gradients with respect to the policy parameters."""
    u, pcache = policy.forward(x)
    val, qcache = q.forward(x, u)
    _, _, dqdu = q.backward(qcache, np.full(len(x), 1.0 / len(x)))
    grads, _ = policy.backward(pcache, dqdu)
    return float(np.mean(val)), grads


def finetune_losses(q, policy: PolicyNetwork, cex: CounterexampleSet, env: envs.EnvSpec):
    """``L_con = -sum Q(x_con, u_con)`` and ``L_inv = sum(-Q(x, u) + Q(x', pi(x')))``.

    The minimum over next controls in ``L_inv`` is replaced by the policy
    output so that gradients reach both networks.  Returns
    ``(L_con, L_inv, q_grads, policy_grads)`` where the gradients belong to
    ``L_con + L_inv``.
    """
    if len(cex) == 0:
        raise ContractError("fine-tuning needs at least one counterexample")
    q_grads = [np.zeros_like(p) for p in q.params()]
    p_grads = [np.zeros_like(p) for p in policy.params()]
    l_con = l_inv = 0.0
    if cex.n_con:
        val, cache = q.forward(cex.con_x, cex.con_u)
        l_con = -float(np.sum(val))
        g, _, _ = q.backward(cache, -np.ones(len(val)))
        _accumulate(q_grads, g)
    if cex.n_inv:
        val, cache = q.forward(cex.inv_x, cex.inv_u)
        g, _, _ = q.backward(cache, -np.ones(len(val)))
        _accumulate(q_grads, g)
        xn = envs.step(env, cex.inv_x, cex.inv_u, check=False)
        un, pcache = policy.forward(xn)
        nval, ncache = q.forward(xn, un)
        g, _, dqdu = q.backward(ncache, np.ones(len(nval)))
        _accumulate(q_grads, g)
        gp, _ = policy.backward(pcache, dqdu)
        _accumulate(p_grads, gp)
        l_inv = float(np.sum(-val + nval))
    return l_con, l_inv, q_grads, p_grads


def _accumulate(acc, grads, scale=1.0):
    for a, g in zip(acc, grads):
        a += scale * g


# ---------------------------------------------------------------- loops


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, **kw):
        self.rows.append(kw)

    def to_csv(self, path, columns=("step", "loss_bellman", "loss_con", "loss_inv", "repair_rate")):
        with open(path, "w") as f:
            f.write(",".join(columns) + "\n")
            for r in self.rows:
                f.write(",".join("" if r.get(c) is None else repr(r.get(c)) for c in columns) + "\n")


def pretrain(q, policy: PolicyNetwork, data: Transitions, cfg: TrainConfig, env: envs.EnvSpec | None = None,
             log_to: TrainLog | None = None):
    """Fitted value iteration on the discounted target with a frozen target copy.

    The next-state value is the smaller of ``Q(x', pi(x'))`` and the minimum
    over a coarse control grid; the policy is refitted to the current Q at
    every target refresh.  Returns ``(q, curve)`` with one mean loss per
    epoch.
    """
    if len(data) == 0:
        raise ContractError("pretraining needs data")
    rng = np.random.default_rng(cfg.seed)
    grid = control_grid(env) if env is not None else None
    opt = AdamState(lr=cfg.lr)
    n = len(data)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    frozen = q.copy()
    q_next = next_values(frozen, policy, data.x_next, grid)
    step = 0
    curve = []
    first = None
    strikes = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            target = pretrain_target(data.h_x[idx], q_next[idx], cfg.gamma(step))
            loss, grads = bellman_loss(q, data.x[idx], data.u[idx], target)
            adam_step(q.params(), grads, opt)
            losses.append(loss)
            step += 1
            if step % cfg.target_refresh == 0:
                if env is not None:
                    train_policy(policy, q, data.x_next[rng.integers(0, n, 4096)], cfg,
                                 steps=max(1, cfg.policy_steps // 10), seed=int(rng.integers(1 << 31)),
                                 grid=fine_control_grid(env))
                frozen = q.copy()
                q_next = next_values(frozen, policy, data.x_next, grid)
        epoch_loss = float(np.mean(losses))
        curve.append(epoch_loss)
        if log_to is not None:
            log_to.add(step=step, loss_bellman=epoch_loss)
        if first is None:
            first = epoch_loss
        strikes = strikes + 1 if epoch_loss > 10 * first else 0
        if strikes >= 3:
            raise DivergenceError(f"pretraining diverged at epoch {epoch}: loss {epoch_loss:.3g} vs {first:.3g}")
    return q, curve


def bellman_residual(q, policy, data: Transitions, gamma: float, env=None) -> np.ndarray:
    grid = control_grid(env) if env is not None else None
    qn = next_values(q, policy, data.x_next, grid)
    return q(data.x, data.u) - pretrain_target(data.h_x, qn, gamma)


def grid_argmin(q, states, grid, chunk: int = 4096):
    """Best control of ``grid`` for each state, and its Q value."""
    best_u = np.empty((len(states), grid.shape[1]))
    best_q = np.empty(len(states))
    for s in range(0, len(states), chunk):
        xs = states[s:s + chunk]
        qg = q(np.repeat(xs, len(grid), axis=0), np.tile(grid, (len(xs), 1))).reshape(len(xs), len(grid))
        k = np.argmin(qg, axis=1)
        best_u[s:s + chunk] = grid[k]
        best_q[s:s + chunk] = qg[np.arange(len(xs)), k]
    return best_u, best_q


def distill_policy(policy: PolicyNetwork, q, states, grid, cfg: TrainConfig, steps: int, rng) -> float:
    """Regress the pre-squash policy output onto the best grid control.

    Targets are mapped through ``artanh`` after clipping to 95% of the
    half-width, so saturated (bang-bang) targets keep a usable gradient.
    Returns the final mean squared error in pre-squash units.
    """
    u_star, _ = grid_argmin(q, states, grid)
    z = np.clip((u_star - policy.center) / policy.halfwidth, -0.95, 0.95)
    raw_star = np.arctanh(z)
    opt = AdamState(lr=cfg.lr)
    bs = min(cfg.batch_size, len(states))
    loss = 0.0
    for _ in range(steps):
        idx = rng.integers(0, len(states), bs)
        raw, cache = policy.net.forward(states[idx])
        err = raw - raw_star[idx]
        loss = float(np.mean(err * err))
        grads, _ = policy.net.backward(cache, 2.0 * err / len(idx))
        adam_step(policy.params(), grads, opt)
    return loss


def train_policy(policy: PolicyNetwork, q, states, cfg: TrainConfig, steps: int | None = None,
                 seed: int | None = None, grid=None) -> dict:
    """Gradient descent of ``mean Q(x, pi(x))`` over ``states`` with ``q`` frozen.

    With a control ``grid`` the policy is first warm-started by
    :func:`distill_policy`, which escapes the saturated local minima that
    plain gradient descent through the squashing tends to get stuck in.
    Returns a report comparing the final policy against 32 uniform controls
    per state on a held-out split.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    steps = cfg.policy_steps if steps is None else steps
    n_hold = max(1, len(states) // 10)
    hold, train = states[:n_hold], states[n_hold:] if len(states) > 1 else states
    if grid is not None and cfg.policy_distill_steps > 0:
        distill_policy(policy, q, train, np.asarray(grid, dtype=float), cfg, cfg.policy_distill_steps, rng)
    opt = AdamState(lr=cfg.lr)
    bs = min(cfg.batch_size, len(train))
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(train), bs)
        loss, grads = policy_loss(policy, q, train[idx])
        adam_step(policy.params(), grads, opt)
        losses.append(loss)
    lo, hi = policy.control_lo, policy.control_hi
    rand_u = lo + (hi - lo) * rng.random((len(hold), 32, len(lo)))
    rand_q = q(np.repeat(hold[:, None, :], 32, axis=1), rand_u).mean()
    pol_q = q(hold, policy(hold)).mean()
    return {"losses": losses, "policy_q": float(pol_q), "random_q": float(rand_q),
            "beats_random": bool(pol_q <= rand_q)}


def violation_scores(q, policy, env, x, u):
    """``(Q(x,u), h(x), Q(x', pi(x')))`` for a batch of pairs."""
    qv = q(x, u)
    h = envs.constraint(env, x)
    xn = envs.step(env, x, u, check=False)
    nv = q(xn, policy(xn))
    return qv, h, nv


def revalidate(q, policy, env, cex: CounterexampleSet, margin: float = 0.0) -> CounterexampleSet:
    """Keep only counterexamples still violating (within ``margin``) under the current networks."""
    con_keep = np.zeros(cex.n_con, dtype=bool)
    inv_keep = np.zeros(cex.n_inv, dtype=bool)
    if cex.n_con:
        qv, h, _ = violation_scores(q, policy, env, cex.con_x, cex.con_u)
        con_keep = (qv < margin) & (h > -margin)
    if cex.n_inv:
        qv, _, nv = violation_scores(q, policy, env, cex.inv_x, cex.inv_u)
        inv_keep = (qv < margin) & (nv > -margin)
    return cex.select(con_keep, inv_keep)


def edge_biased_pairs(env: envs.EnvSpec, rng, n: int, edge: float):
    """Uniform pairs where a share ``edge`` has one coordinate pinned to a box face.

    Counterexamples concentrate on the faces of the domain, which uniform
    sampling reaches with probability zero.
    """
    dom = env.domain
    y = dom.sample(rng, n)
    k = int(round(edge * n))
    if k:
        dim = rng.integers(0, dom.dim, k)
        side = rng.integers(0, 2, k).astype(bool)
        y[np.arange(k), dim] = np.where(side, dom.hi[dim], dom.lo[dim])
    return y[:, :env.state_dim], y[:, env.state_dim:]


def dense_penalty(q, policy: PolicyNetwork, env: envs.EnvSpec, x, u, cfg: TrainConfig):
    """Hinge penalties on both certificate conditions at the pairs ``(x, u)``.

    ``L = mean(relu(h + c - Q)) + mean([Q < d][Q' > -m] (Q' - Q + d + m))``
    with ``Q' = Q(x', pi(x'))``: pushes ``Q`` up where it undercuts the
    constraint and, on pairs near the boundary whose successor is not
    clearly inside, pushes ``Q`` up and the successor value down.  The
    policy is held fixed.  Returns ``(loss, n_con, n_inv, grads)``.
    """
    n = x.shape[0]
    c, d, m = cfg.dense_con_margin, cfg.dense_inv_margin, cfg.dense_next_margin
    qv, cache = q.forward(x, u)
    h = envs.constraint(env, x)
    xn = envs.step(env, x, u, check=False)
    nv, ncache = q.forward(xn, policy(xn))
    con = qv < h + c
    inv = (qv < d) & (nv > -m)
    loss = float(np.sum(np.where(con, h + c - qv, 0.0)) + np.sum(np.where(inv, nv - qv + d + m, 0.0))) / n
    g, _, _ = q.backward(cache, -(con.astype(float) + inv) / n)
    gn, _, _ = q.backward(ncache, inv / n)
    _accumulate(g, gn)
    return loss, int(con.sum()), int(inv.sum()), g


def finetune_round(q, policy: PolicyNetwork, cex: CounterexampleSet, data: Transitions, cfg: TrainConfig,
                   env: envs.EnvSpec, log_to: TrainLog | None = None, seed: int | None = None,
                   step0: int = 0, round_index: int = 0):
    """One round of counterexample fine-tuning followed by a policy refit.

    Minimises ``cex_weight * (L_con + L_inv)`` over the counterexamples that
    are still unrepaired (with ``cfg.repair_margin``) plus an anchor error on
    replayed pretraining data.  The anchor is either the discounted
    pretraining target or the asymmetric fit to :func:`margin_target`.
    Returns ``(q, policy, report)``.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    grid = control_grid(env) if cfg.finetune_next == "grid" else None
    opt = AdamState(lr=cfg.lr * cfg.lr_end ** min(1.0, round_index / cfg.lr_decay_rounds))
    frozen = q.copy()
    n = len(data)
    bs = min(cfg.batch_size, n)
    m = cfg.repair_margin
    n_total = len(cex)
    gamma = cfg.gamma_end
    row = {}
    for s in range(cfg.finetune_steps):
        idx = rng.integers(0, n, bs)
        q_next = next_values(frozen, policy, data.x_next[idx], grid)
        if cfg.anchor == "margin":
            target = margin_target(data.h_x[idx], q_next, cfg.anchor_gamma, cfg.anchor_margin,
                                   cfg.con_margin, cfg.anchor_cap)
            loss_b, grads = bellman_loss(q, data.x[idx], data.u[idx], target, cfg.under_weight)
        else:
            target = pretrain_target(data.h_x[idx], q_next, gamma)
            loss_b, grads = bellman_loss(q, data.x[idx], data.u[idx], target)
        l_con = l_inv = 0.0
        active = revalidate(q, policy, env, cex, margin=m) if n_total else cex
        if len(active) and cfg.cex_weight > 0:
            l_con, l_inv, gq, _ = finetune_losses(q, policy, active, env)
            _accumulate(grads, gq, cfg.cex_weight / max(1, n_total))
        if cfg.dense_weight > 0:
            x, u = edge_biased_pairs(env, rng, cfg.dense_batch, cfg.dense_edge)
            _, _, _, gd = dense_penalty(q, policy, env, x, u, cfg)
            _accumulate(grads, gd, cfg.dense_weight)
        adam_step(q.params(), grads, opt)
        if (s + 1) % cfg.target_refresh == 0:
            frozen = q.copy()
        row = dict(step=step0 + s + 1, loss_bellman=loss_b, loss_con=l_con, loss_inv=l_inv)
    repaired = 1.0 - len(revalidate(q, policy, env, cex)) / n_total if n_total else 1.0
    states = np.concatenate([data.x_next[rng.integers(0, n, 4096)], cex.con_x, cex.inv_x,
                             envs.step(env, cex.inv_x, cex.inv_u, check=False)])
    train_policy(policy, q, states, cfg, seed=int(rng.integers(1 << 31)), grid=fine_control_grid(env))
    if log_to is not None:
        row["repair_rate"] = repaired
        log_to.add(**row)
    return q, policy, {"repair_rate": repaired, "n_cex": n_total}
