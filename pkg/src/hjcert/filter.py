"""Runtime safety filter built from the learned action-value function.

A nominal control passes through untouched whenever ``Q(x, u_nom) <= 0``.
Otherwise the filter picks the candidate closest to ``u_nom`` among the
fallback policy's control and a fixed Halton set of controls that ``Q``
deems safe.  Rollouts are simulated in batches across seeds; each rollout
draws its nominal stream from its own generator, so a batched rollout is
identical to running the seeds one at a time.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import envs
from .errors import ContractError
from .net import PolicyNetwork

# flagged rows are resampled once with this many times more candidates
DENSE_FACTOR = 16


def halton_controls(control_box: envs.Box, n: int) -> np.ndarray:
    """``n`` deterministic low-discrepancy controls inside ``control_box``."""
    pts = qmc.Halton(d=control_box.dim, scramble=False).random(n + 1)[1:]
    return control_box.lo + pts * control_box.width


@dataclass
class FilterPolicy:
    q: object
    fallback: PolicyNetwork
    projection_samples: int = 64
    _samples: np.ndarray | None = field(default=None, repr=False, compare=False)
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if int(self.projection_samples) < 1:
            raise ContractError("projection_samples must be >= 1")
        box = envs.Box(self.fallback.control_lo, self.fallback.control_hi)
        self._samples = halton_controls(box, self.projection_samples)
        self._dense = halton_controls(box, self.projection_samples * DENSE_FACTOR)


def _project(q, x, u_nom, cands):
    """Nearest candidate with ``Q <= 0`` per row, or ``-1`` when none is safe."""
    n, k = x.shape[0], cands.shape[0]
    qv = q(np.repeat(x, k, axis=0), np.tile(cands, (n, 1))).reshape(n, k)
    dist = np.sum((cands[None] - u_nom[:, None]) ** 2, axis=2)
    dist[qv > 0] = np.inf
    j = np.argmin(dist, axis=1)
    ok = np.isfinite(dist[np.arange(n), j])
    return np.where(ok, j, -1), dist[np.arange(n), j]


def filter_controls(fp: FilterPolicy, x, u_nom):
    """Batched filter.  Returns ``(u, intervened, flagged)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u_nom = np.atleast_2d(np.asarray(u_nom, dtype=float))
    u = u_nom.copy()
    intervened = fp.q(x, u_nom) > 0
    flagged = np.zeros(x.shape[0], dtype=bool)
    rows = np.flatnonzero(intervened)
    if not rows.size:
        return u, intervened, flagged
    xr, nr = x[rows], u_nom[rows]
    fb = fp.fallback(xr)
    fb_safe = fp.q(xr, fb) <= 0
    fb_dist = np.where(fb_safe, np.sum((fb - nr) ** 2, axis=1), np.inf)
    j, d = _project(fp.q, xr, nr, fp._samples)
    pick = fp._samples[np.maximum(j, 0)]
    miss = (j < 0) & ~fb_safe
    if miss.any():
        # one denser resample before giving up on the step
        jd, dd = _project(fp.q, xr[miss], nr[miss], fp._dense)
        pick[miss] = fp._dense[np.maximum(jd, 0)]
        j[miss], d[miss] = jd, dd
    use_sample = (j >= 0) & (d < fb_dist)
    out = np.where(use_sample[:, None], pick, fb)
    flagged[rows] = (j < 0) & ~fb_safe
    u[rows] = out
    return u, intervened, flagged


def filter_control(fp: FilterPolicy, x, u_nom):
    """Filter one control.  Returns ``(u, flagged)``.

    ``u`` is ``u_nom`` itself (same values) whenever ``Q(x, u_nom) <= 0``.
    """
    x = np.asarray(x, dtype=float)
    u_nom = np.asarray(u_nom, dtype=float)
    u, _, flagged = filter_controls(fp, x[None], u_nom[None])
    return u[0], bool(flagged[0])


@dataclass
class RolloutReport:
    steps: int
    violations: int
    interventions: int
    flagged: int = 0
    seed: int | None = None
    filtered: bool = True
    trajectory: dict | None = None

    def to_dict(self, with_trajectory: bool = False) -> dict:
        d = asdict(self)
        if not with_trajectory:
            d.pop("trajectory")
        elif self.trajectory is not None:
            d["trajectory"] = {k: np.asarray(v).tolist() for k, v in self.trajectory.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write_trajectory_csv(self, path) -> Path:
        if self.trajectory is None:
            raise ContractError("rollout was run without storing the trajectory")
        tr = self.trajectory
        x, u = tr["x"], tr["u"]
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t"] + [f"x{i}" for i in range(x.shape[1])] + [f"u{i}" for i in range(u.shape[1])]
                       + ["q", "h", "intervened"])
            for t in range(u.shape[0]):
                w.writerow([t] + [repr(float(v)) for v in x[t]] + [repr(float(v)) for v in u[t]]
                           + [repr(float(tr["q"][t])), repr(float(tr["h"][t])), int(tr["intervened"][t])])
        return path


def nominal_stream(env: envs.EnvSpec, nominal, T: int, seed: int) -> np.ndarray:
    """Materialise a nominal control source as a ``(T, m)`` array.

    ``nominal`` is ``"uniform"`` (uniform over the control box), an array
    of shape ``(T, m)``, or a callable ``f(rng, T) -> (T, m)``.
    """
    rng = np.random.default_rng(seed)
    if isinstance(nominal, str):
        if nominal != "uniform":
            raise ContractError(f"unknown nominal source {nominal!r}")
        return env.control_box.sample(rng, T)
    if callable(nominal):
        out = np.asarray(nominal(rng, T), dtype=float)
    else:
        out = np.asarray(nominal, dtype=float)
    if out.shape != (T, env.control_dim):
        raise ContractError(f"nominal stream must have shape {(T, env.control_dim)}, got {out.shape}")
    return out


def rollout_batch(fp: FilterPolicy, env: envs.EnvSpec, x0, u0, seeds, T: int, nominal="uniform",
                  filtered: bool = True, store: bool = False) -> list[RolloutReport]:
    """Simulate one rollout per seed from the pairs ``(x0[i], u0[i])``.

    The first applied control is ``u0``; afterwards the nominal stream is
    filtered (or applied raw when ``filtered`` is false).  Violations count
    the steps ``t = 1..T`` with ``h(x_t) > 0``.
    """
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    u_first = np.atleast_2d(np.asarray(u0, dtype=float))
    seeds = list(seeds)
    n = x.shape[0]
    if u_first.shape[0] != n or len(seeds) != n:
        raise ContractError("x0, u0 and seeds must have matching lengths")
    if T < 0:
        raise ContractError("T must be >= 0")
    envs._check(env, x, u_first)
    q0 = fp.q(x, u_first)
    if np.any(q0 > 0):
        bad = int(np.flatnonzero(q0 > 0)[0])
        raise ContractError(f"rollout must start in the safe set: Q(x0, u0) = {q0[bad]:.4g} > 0 for pair {bad}")
    noms = np.stack([nominal_stream(env, nominal, T, s) for s in seeds], axis=1) if T else None
    viol = np.zeros(n, dtype=int)
    inter = np.zeros(n, dtype=int)
    flag = np.zeros(n, dtype=int)
    if store:
        xs = np.empty((T + 1, n, env.state_dim))
        us = np.empty((T, n, env.control_dim))
        qs = np.empty((T, n))
        hs = np.empty((T + 1, n))
        iv = np.zeros((T, n), dtype=bool)
        xs[0], hs[0] = x, envs.constraint(env, x)
    for t in range(T):
        u_nom = u_first if t == 0 else noms[t]
        if filtered:
            u, it, fl = filter_controls(fp, x, u_nom)
            inter += it
            flag += fl
        else:
            u, it = u_nom, np.zeros(n, dtype=bool)
        if store:
            us[t], qs[t], iv[t] = u, fp.q(x, u), it
        x = envs.step(env, x, u, check=False)
        h = envs.constraint(env, x)
        viol += h > 0
        if store:
            xs[t + 1], hs[t + 1] = x, h
    reports = []
    for i in range(n):
        traj = None
        if store:
            traj = {"x": xs[:T, i], "u": us[:, i], "q": qs[:, i], "h": hs[:T, i], "intervened": iv[:, i],
                    "x_final": xs[T, i]}
        reports.append(RolloutReport(T, int(viol[i]), int(inter[i]), int(flag[i]), int(seeds[i]), filtered, traj))
    return reports


def rollout(fp: FilterPolicy, env: envs.EnvSpec, x0, u0, nominal="uniform", T: int = 500, seed: int = 0,
            filtered: bool = True, store: bool = False) -> RolloutReport:
    """Closed-loop rollout of the filtered system from the pair ``(x0, u0)``."""
    return rollout_batch(fp, env, np.asarray(x0, float)[None], np.asarray(u0, float)[None], [seed], T,
                         nominal, filtered, store)[0]


def sample_safe_pairs(q, env: envs.EnvSpec, n: int, seed: int, oversample: int = 20, tol: float = 0.0):
    """Uniformly sample ``n`` pairs with ``Q(x, u) <= tol``.

    Raises ``ContractError`` when the set is too small to hit by sampling.
    """
    rng = np.random.default_rng(seed)
    xs, us, got = [], [], 0
    for _ in range(50):
        x = env.state_box.sample(rng, n * oversample)
        u = env.control_box.sample(rng, n * oversample)
        ok = q(x, u) <= tol
        xs.append(x[ok])
        us.append(u[ok])
        got += int(ok.sum())
        if got >= n:
            break
    if got < n:
        raise ContractError(f"found only {got} of {n} pairs with Q <= {tol}")
    return np.concatenate(xs)[:n], np.concatenate(us)[:n]
