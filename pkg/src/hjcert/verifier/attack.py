"""Gradient-based counterexample search.

Projected sign-gradient ascent on the violation score
``s(x, u) = min(-Q(x, u), viol(x, u))``, which is positive exactly on
counterexamples.  Restarts are taken from the best of a uniform sample, so
they start near the ``Q = 0`` level set where the score is largest.
"""
from __future__ import annotations

import numpy as np

from .. import envs
from ..bounds import min_ia_q_points
from .tasks import Counterexample, TaskKind, VerifyTask, is_violation


def _restarts(task: VerifyTask, rng, n_restarts: int, lo, hi, oversample: int = 16):
    y = lo + (hi - lo) * rng.random((n_restarts * oversample, lo.size))
    qv, viol = task.scores(y)
    s = np.minimum(-qv, viol)
    return y[np.argsort(-s, kind="stable")[:n_restarts]]


def pgd(task: VerifyTask, y, lo, hi, steps: int, step0: float = 0.1, step1: float = 0.002):
    """Run projected sign-gradient ascent from ``y`` inside ``[lo, hi]``.

    ``lo, hi`` broadcast against ``y``.  Returns ``(y_best, s_best, q, viol)``
    of the best iterate per start.
    """
    y = np.clip(np.array(y, dtype=float), lo, hi)
    width = hi - lo
    s, grad, qv, viol = task.score_and_grad(y)
    best_y, best_s, best_q, best_v = y.copy(), s.copy(), qv.copy(), viol.copy()
    rates = np.geomspace(step0, step1, max(steps, 1))
    for k in range(steps):
        y = np.clip(y + rates[k] * width * np.sign(grad), lo, hi)
        s, grad, qv, viol = task.score_and_grad(y)
        better = s > best_s
        best_y[better], best_s[better] = y[better], s[better]
        best_q[better], best_v[better] = qv[better], viol[better]
    return best_y, best_s, best_q, best_v


def attack(task: VerifyTask, cfg, seed: int = 0, lo=None, hi=None) -> Counterexample | None:
    """Search for one validated counterexample; ``None`` if the search fails."""
    rng = np.random.default_rng(seed)
    lo = task.domain.lo if lo is None else np.asarray(lo, float)
    hi = task.domain.hi if hi is None else np.asarray(hi, float)
    y0 = _restarts(task, rng, cfg.attack_restarts, lo, hi)
    y, s, qv, viol = pgd(task, y0, lo, hi, cfg.attack_steps)
    # exact recheck at the returned points
    qv, viol = task.scores(y)
    ok = np.flatnonzero(is_violation(qv, viol))
    if not ok.size:
        return None
    i = ok[0]
    x, u = task.split(y[i])
    return Counterexample(x, u, float(qv[i]), float(viol[i]))


def search_counterexamples(task: VerifyTask, rng, n_samples: int, steps: int, margin: float = 0.0,
                           interval_next: bool = False, keep: int = 256):
    """Collect many violating pairs for fine-tuning.

    A pair counts when ``Q < margin`` and ``viol > -margin``; with
    ``margin = 0`` these are genuine counterexamples.  With
    ``interval_next`` the forward-invariance violation is the interval lower
    bound of ``min_u' Q(f(x, u), u')``, so every hit violates the condition
    for every next control.  Returns joint points ``(k, d)`` ordered by score.
    """
    lo, hi = task.domain.lo, task.domain.hi
    y = lo + (hi - lo) * rng.random((n_samples, lo.size))
    y, s, qv, viol = pgd(task, y, lo, hi, steps)
    if interval_next and task.kind is TaskKind.INV:
        x, u = task.split(y)
        xn = envs.step(task.env, x, u, check=False)
        cb = task.env.control_box
        viol = min_ia_q_points(task.q, xn, cb.lo, cb.hi, method="interval")
    else:
        qv, viol = task.scores(y)
    s = np.minimum(-qv, viol)
    hit = (qv < margin) & (viol > -margin)
    if margin == 0.0:
        hit = is_violation(qv, viol)
    idx = np.flatnonzero(hit)
    idx = idx[np.argsort(-s[idx], kind="stable")][:keep]
    return y[idx], qv[idx], viol[idx]
