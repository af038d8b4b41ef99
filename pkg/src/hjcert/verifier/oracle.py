"""Grid value iteration for the undiscounted safety Bellman equation.

    V(x) = max{ h(x), min_u V(f(x, u)) }

solved on a regular state grid with nearest-neighbour lookup of successor
states.  Successors outside the state box are clamped to the boundary cell,
whose ``h`` is already positive through the domain-exit term.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .. import envs
from ..errors import ContractError, ConvergenceError


@dataclass
class OracleGrid:
    env: envs.EnvSpec
    state_res: int
    control_res: int
    axes: list            # per state dimension grid coordinates
    controls: np.ndarray  # (C, control_dim)
    h: np.ndarray         # flat (S,)
    V: np.ndarray         # flat (S,)
    successor: np.ndarray  # (S, C) flat successor indices
    sweeps: int

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def states(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def safe(self) -> np.ndarray:
        """Boolean mask of the zero-sublevel set ``S_max`` (flat)."""
        return self.V <= 0

    def safe_controls(self) -> np.ndarray:
        """``(S, C)`` mask of controls whose successor stays in ``S_max``."""
        return self.V[self.successor] <= 0

    def lookup(self, x) -> np.ndarray:
        return self.V[_nearest_index(self.axes, np.asarray(x, dtype=float))]

    def bellman_residual(self) -> float:
        target = np.maximum(self.h, self.V[self.successor].min(axis=1))
        return float(np.max(np.abs(target - self.V)))


def _nearest_index(axes, x):
    flat = np.zeros(x.shape[:-1], dtype=np.int64)
    for d, ax in enumerate(axes):
        lo, hi, n = ax[0], ax[-1], len(ax)
        i = np.rint((x[..., d] - lo) / (hi - lo) * (n - 1)).astype(np.int64)
        flat = flat * n + np.clip(i, 0, n - 1)
    return flat


def value_iteration_oracle(env: envs.EnvSpec, state_res: int, control_res: int,
                           tol: float = 1e-6, max_sweeps: int = 100_000) -> OracleGrid:
    if env.state_dim > 3:
        raise ContractError("value iteration oracle is limited to state_dim <= 3")
    if state_res < 2 or control_res < 2:
        raise ContractError("grid resolutions must be at least 2")
    sb, cb = env.state_box, env.control_box
    axes = [np.linspace(sb.lo[d], sb.hi[d], state_res) for d in range(env.state_dim)]
    cax = [np.linspace(cb.lo[d], cb.hi[d], control_res) for d in range(env.control_dim)]
    controls = np.array(list(itertools.product(*cax)), dtype=float)

    mesh = np.meshgrid(*axes, indexing="ij")
    states = np.stack([m.ravel() for m in mesh], axis=-1)
    h = envs.constraint(env, states)
    nxt = envs.step(env, states[:, None, :], controls[None, :, :], check=False)
    successor = _nearest_index(axes, nxt)

    V = h.copy()
    for sweep in range(1, max_sweeps + 1):
        V_new = np.maximum(h, V[successor].min(axis=1))
        change = np.max(np.abs(V_new - V))
        V = V_new
        if change < tol:
            return OracleGrid(env, state_res, control_res, axes, controls, h, V, successor, sweep)
    raise ConvergenceError(f"value iteration did not converge in {max_sweeps} sweeps")
