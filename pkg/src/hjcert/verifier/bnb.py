"""Native branch and bound over (state, control) boxes.

Each box is pruned when the linear/McCormick lower bound of ``Q`` shows
``Q >= -eps`` everywhere, or when the upper bound of the violation term shows
``viol <= eps``.  Boxes that survive are checked at their center and a few
projected-gradient steps, then split.  Boxes are processed from a LIFO stack in
fixed batches; every per-box computation is a pure function of the box, so the
verdict for a given budget is a prefix of the verdict for any larger budget.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .. import envs
from ..bounds import policy_bounds_batch, q_bounds_batch
from ..errors import ContractError
from .attack import attack, pgd
from .tasks import Counterexample, Status, TaskKind, Verdict, VerifyTask, is_violation


@dataclass
class BnBConfig:
    max_boxes: int = 200000
    min_box_width: float = 1e-4
    certify_margin: float = 1e-9
    attack_restarts: int = 64
    attack_steps: int = 30
    batch_size: int = 512
    box_attack_steps: int = 5
    max_near_misses: int = 512

    def __post_init__(self):
        if self.certify_margin < 0:
            raise ContractError("certify_margin must be >= 0")
        if self.min_box_width <= 0:
            raise ContractError("min_box_width must be > 0")
        if self.max_boxes < 1 or self.batch_size < 1:
            raise ContractError("max_boxes and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "BnBConfig":
        return cls(**d)


def violation_upper(task: VerifyTask, lo, hi, method: str = "linear"):
    """Sound upper bound of the violation term over each joint box."""
    m = task.state_dim
    xlo, xhi = lo[:, :m], hi[:, :m]
    if task.kind is TaskKind.CON:
        return envs.constraint_interval(task.env, xlo, xhi)[1]
    out = np.full(lo.shape[0], -np.inf)
    for plo, phi, valid in envs.step_interval_pieces(task.env, xlo, xhi, lo[:, m:], hi[:, m:]):
        idx = np.flatnonzero(valid)
        if not idx.size:
            continue
        ulo, uhi = policy_bounds_batch(task.policy, plo[idx], phi[idx], method)
        r = q_bounds_batch(task.q, np.concatenate([plo[idx], ulo], 1), np.concatenate([phi[idx], uhi], 1), method)
        out[idx] = np.maximum(out[idx], r.q.hi)
    return out


def _box_attack(task, lo, hi, coef, steps):
    """Deterministic per-box search from the center and the corner minimising
    the lower linear bound of ``Q``."""
    center = 0.5 * (lo + hi)
    corner = np.where(coef > 0, lo, hi) if coef is not None else center
    y0 = np.concatenate([center, corner])
    blo, bhi = np.concatenate([lo, lo]), np.concatenate([hi, hi])
    qv, viol = task.scores(y0)
    y = y0
    if steps > 0:
        y, _, _, _ = pgd(task, y0, blo, bhi, steps, step0=0.25, step1=0.02)
        qv, viol = task.scores(y)
    n = lo.shape[0]
    hit = is_violation(qv, viol).reshape(2, n).any(axis=0)
    s = np.minimum(-qv, viol).reshape(2, n)
    best = np.argmax(s, axis=0)
    return hit, y.reshape(2, n, -1)[best, np.arange(n)], qv.reshape(2, n)[best, np.arange(n)], viol.reshape(2, n)[best, np.arange(n)]


def _split_dim(task, lo, hi, coef, scale):
    """Coordinate with the largest ``width * |sensitivity|`` score.

    Sensitivity is the magnitude of the lower linear ``Q`` coefficient plus
    the magnitude of the violation gradient at the box center, floored at a
    tenth of the largest sensitivity so that no coordinate starves.  Ties go
    to the lowest index; coordinates of zero width are never chosen.
    """
    w = (hi - lo) / scale
    center = 0.5 * (lo + hi)
    _, g, _, _ = task.score_and_grad(center)
    sens = np.abs(g) * scale
    if coef is not None:
        sens = sens + np.abs(coef) * scale
    score = w * np.maximum(sens, 0.1 * sens.max(axis=1, keepdims=True) + 1e-12)
    score[w <= 0] = -1.0
    return np.argmax(score, axis=1)


def certify(task: VerifyTask, cfg: BnBConfig | None = None, seed: int = 0) -> Verdict:
    """Certify, falsify or give up on one condition over ``task.domain``."""
    cfg = cfg or BnBConfig()
    t0 = time.perf_counter()
    eps = cfg.certify_margin
    stats = {"boxes": 0, "max_depth": 0, "pruned_q": 0, "pruned_viol": 0, "unresolved": 0}

    def done(status, cex=None, witnesses=None, near=None):
        stats["wall_time"] = time.perf_counter() - t0
        return Verdict(status, cex, dict(stats), witnesses, near)

    hit = attack(task, cfg, seed)
    if hit is not None:
        return done(Status.FALSIFIED, hit, np.concatenate([hit.x, hit.u])[None])

    dom = task.domain
    scale = np.where(dom.width > 0, dom.width, 1.0)
    d = dom.dim
    # stack as parallel arrays; the end of the arrays is the top
    s_lo, s_hi, s_depth = dom.lo[None].copy(), dom.hi[None].copy(), np.zeros(1, dtype=int)
    leaves = []
    while s_lo.shape[0]:
        room = cfg.max_boxes - stats["boxes"]
        if room <= 0:
            near = np.concatenate(leaves + [0.5 * (s_lo + s_hi)])[::-1][: cfg.max_near_misses]
            stats["unresolved"] += s_lo.shape[0]
            return done(Status.UNKNOWN, near=near)
        k = min(cfg.batch_size, room, s_lo.shape[0])
        lo, hi, depth = s_lo[-k:][::-1], s_hi[-k:][::-1], s_depth[-k:][::-1]
        s_lo, s_hi, s_depth = s_lo[:-k], s_hi[:-k], s_depth[:-k]
        stats["boxes"] += k
        stats["max_depth"] = max(stats["max_depth"], int(depth.max()))

        qb = q_bounds_batch(task.q, lo, hi, "linear")
        pq = qb.q.lo >= -eps
        stats["pruned_q"] += int(pq.sum())
        keep = np.flatnonzero(~pq)
        if keep.size:
            vu = violation_upper(task, lo[keep], hi[keep])
            pv = vu <= eps
            stats["pruned_viol"] += int(pv.sum())
            keep = keep[~pv]
        if not keep.size:
            continue
        lo, hi, depth = lo[keep], hi[keep], depth[keep]
        coef = qb.q_coef_lo[keep] if qb.q_coef_lo is not None else None

        found, y, qv, viol = _box_attack(task, lo, hi, coef, cfg.box_attack_steps)
        if found.any():
            i = int(np.flatnonzero(found)[0])
            x, u = task.split(y[i])
            return done(Status.FALSIFIED, Counterexample(x, u, float(qv[i]), float(viol[i])), y[found])

        tiny = np.max((hi - lo) / scale, axis=1) < cfg.min_box_width
        if tiny.any():
            leaves.append(0.5 * (lo[tiny] + hi[tiny]))
            stats["unresolved"] += int(tiny.sum())
        big = np.flatnonzero(~tiny)
        if not big.size:
            continue
        lo, hi, depth = lo[big], hi[big], depth[big]
        dim = _split_dim(task, lo, hi, None if coef is None else coef[big], scale)
        rows = np.arange(big.size)
        mid = 0.5 * (lo[rows, dim] + hi[rows, dim])
        lo_a, hi_a = lo.copy(), hi.copy()
        hi_a[rows, dim] = mid
        lo_b, hi_b = lo.copy(), hi.copy()
        lo_b[rows, dim] = mid
        # push so that the first box of the batch, lower half first, pops next
        new_lo = np.stack([lo_b, lo_a], 1)[::-1].reshape(-1, d)
        new_hi = np.stack([hi_b, hi_a], 1)[::-1].reshape(-1, d)
        s_lo = np.concatenate([s_lo, new_lo])
        s_hi = np.concatenate([s_hi, new_hi])
        s_depth = np.concatenate([s_depth, np.repeat(depth[::-1] + 1, 2)])

    if leaves:
        return done(Status.UNKNOWN, near=np.concatenate(leaves)[: cfg.max_near_misses])
    return done(Status.CERTIFIED)
