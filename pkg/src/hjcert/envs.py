"""Discrete-time benchmark systems: dynamics, constraint functions and domains.

All four systems use an explicit Euler update with ``dt = 0.1``.  Every
function here accepts batched inputs: states have shape ``(..., state_dim)``
and controls ``(..., control_dim)``.

The constraint ``h`` is positive exactly on violating states.  Besides the
task hazard, leaving the state box counts as a violation, so ``h`` is the
maximum of the task term and a domain-exit term::

    h(x) = max(h_task(x), max_i |x_i - c_i| / b_i - 1 + margin)

where the exit term runs over the non-angular coordinates only.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

TWO_PI = 2.0 * math.pi
# slack on trig ranges and wrapped angle pieces; np.cos/np.sin are faithfully
# rounded, not monotone to the last ulp
_TRIG_PAD = 4e-16
_WRAP_PAD = 1e-12


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size == 0:
            raise ContractError(f"box bounds must be equal-length vectors, got {lo.shape} and {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ContractError("box bounds must be finite")
        if np.any(lo > hi):
            raise ContractError(f"box has lo > hi: {lo} vs {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.lo - tol) & (points <= self.hi + tol), axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))

    def product(self, other: "Box") -> "Box":
        return Box(np.concatenate([self.lo, other.lo]), np.concatenate([self.hi, other.hi]))

    def is_subset(self, other: "Box", tol: float = 0.0) -> bool:
        return bool(np.all(self.lo >= other.lo - tol) and np.all(self.hi <= other.hi + tol))

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(d["lo"], d["hi"])

    def __eq__(self, other):
        return isinstance(other, Box) and np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __repr__(self):
        return f"Box(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


class EnvName(str, enum.Enum):
    DOUBLE_INTEGRATOR = "double_integrator"
    DOUBLE_INTEGRATOR_2D = "double_integrator_2d"
    UNICYCLE = "unicycle"
    ROBOT_ARM = "robot_arm"


_DIMS = {
    EnvName.DOUBLE_INTEGRATOR: (2, 1),
    EnvName.DOUBLE_INTEGRATOR_2D: (4, 2),
    EnvName.UNICYCLE: (3, 1),
    EnvName.ROBOT_ARM: (4, 2),
}

_ANGULAR = {
    EnvName.DOUBLE_INTEGRATOR: (),
    EnvName.DOUBLE_INTEGRATOR_2D: (),
    EnvName.UNICYCLE: (2,),
    EnvName.ROBOT_ARM: (0, 1),
}


@dataclass(frozen=True, eq=False)
class EnvSpec:
    name: EnvName
    dt: float
    state_box: Box
    control_box: Box
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "name", EnvName(self.name))
        m, n = _DIMS[self.name]
        if self.state_box.dim != m or self.control_box.dim != n:
            raise ContractError(
                f"{self.name.value} needs state/control dims ({m},{n}), "
                f"got ({self.state_box.dim},{self.control_box.dim})"
            )
        if not self.dt > 0:
            raise ContractError("dt must be positive")
        for i in self.angular:
            if self.state_box.lo[i] < -math.pi or self.state_box.hi[i] > math.pi:
                raise ContractError("angular coordinates must lie in [-pi, pi]")

    @property
    def state_dim(self) -> int:
        return self.state_box.dim

    @property
    def control_dim(self) -> int:
        return self.control_box.dim

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.control_dim

    @property
    def angular(self) -> tuple:
        return _ANGULAR[self.name]

    @property
    def linear_coords(self) -> tuple:
        return tuple(i for i in range(self.state_dim) if i not in self.angular)

    @property
    def domain(self) -> Box:
        return self.state_box.product(self.control_box)

    def to_dict(self) -> dict:
        return {
            "name": self.name.value,
            "dt": self.dt,
            "state_box": self.state_box.to_dict(),
            "control_box": self.control_box.to_dict(),
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(
            name=EnvName(d["name"]),
            dt=float(d["dt"]),
            state_box=Box.from_dict(d["state_box"]),
            control_box=Box.from_dict(d["control_box"]),
            params={k: float(v) for k, v in d.get("params", {}).items()},
        )

    def __eq__(self, other):
        return isinstance(other, EnvSpec) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.name)


def make_env(name) -> EnvSpec:
    """Build one of the four benchmark systems with its default parameters."""
    try:
        name = EnvName(name)
    except ValueError:
        raise ContractError(f"unknown env {name!r}; choose from {[e.value for e in EnvName]}") from None
    pi = math.pi
    if name is EnvName.DOUBLE_INTEGRATOR:
        return EnvSpec(name, 0.1, Box([-1, -1], [1, 1]), Box([-1], [1]),
                       {"wall": 0.9, "exit_margin": 0.02})
    if name is EnvName.DOUBLE_INTEGRATOR_2D:
        return EnvSpec(name, 0.1, Box([-1] * 4, [1] * 4), Box([-1, -1], [1, 1]),
                       {"hazard_radius": 0.4, "exit_margin": 0.02})
    if name is EnvName.UNICYCLE:
        # |omega| <= 4 gives a 0.225 m turning radius; with |omega| <= 1 the 0.9 m
        # radius leaves no robust orbit inside the box
        return EnvSpec(name, 0.1, Box([-1, -1, -pi], [1, 1, pi]), Box([-4], [4]),
                       {"speed": 0.9, "hazard_radius": 0.4, "exit_margin": 0.02})
    return EnvSpec(name, 0.1, Box([-pi, -pi, -1, -1], [pi, pi, 1, 1]), Box([-1, -1], [1, 1]),
                   {"l1": 0.5, "l2": 0.5, "reach": 0.85, "exit_margin": 0.02})


def wrap_angle(a):
    return np.mod(np.asarray(a) + math.pi, TWO_PI) - math.pi


def _check(env: EnvSpec, x, u=None, tol: float = 1e-9):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (env.state_dim,):
        raise ContractError(f"state must have {env.state_dim} entries, got shape {x.shape}")
    if not np.all(env.state_box.contains(x, tol)):
        raise ContractError("state outside state box")
    if u is None:
        return x, None
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (env.control_dim,):
        raise ContractError(f"control must have {env.control_dim} entries, got shape {u.shape}")
    if not np.all(env.control_box.contains(u, tol)):
        raise ContractError("control outside control box")
    return x, u


def step(env: EnvSpec, x, u, check: bool = True) -> np.ndarray:
    """One explicit Euler step ``f(x, u)``."""
    if check:
        x, u = _check(env, x, u)
    else:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
    dt = env.dt
    out = np.empty(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (env.state_dim,))
    if env.name is EnvName.DOUBLE_INTEGRATOR:
        out[..., 0] = x[..., 0] + x[..., 1] * dt
        out[..., 1] = x[..., 1] + u[..., 0] * dt
    elif env.name is EnvName.DOUBLE_INTEGRATOR_2D:
        out[..., 0:2] = x[..., 0:2] + x[..., 2:4] * dt
        out[..., 2:4] = x[..., 2:4] + u * dt
    elif env.name is EnvName.UNICYCLE:
        v = env.params["speed"]
        th = x[..., 2]
        out[..., 0] = x[..., 0] + v * np.cos(th) * dt
        out[..., 1] = x[..., 1] + v * np.sin(th) * dt
        out[..., 2] = wrap_angle(th + u[..., 0] * dt)
    else:
        out[..., 0:2] = wrap_angle(x[..., 0:2] + x[..., 2:4] * dt)
        out[..., 2:4] = x[..., 2:4] + u * dt
    return out


def _exit_term(env: EnvSpec, x):
    idx = list(env.linear_coords)
    c = env.state_box.center[idx]
    b = 0.5 * env.state_box.width[idx]
    return np.max(np.abs(x[..., idx] - c) / b, axis=-1) - 1.0 + env.params["exit_margin"]


def _reach(env: EnvSpec, th1, th2):
    l1, l2 = env.params["l1"], env.params["l2"]
    ex = l1 * np.cos(th1) + l2 * np.cos(th1 + th2)
    ey = l1 * np.sin(th1) + l2 * np.sin(th1 + th2)
    return ex, ey


def task_constraint(env: EnvSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if env.name is EnvName.DOUBLE_INTEGRATOR:
        return np.abs(x[..., 0]) - env.params["wall"]
    if env.name in (EnvName.DOUBLE_INTEGRATOR_2D, EnvName.UNICYCLE):
        return env.params["hazard_radius"] - np.hypot(x[..., 0], x[..., 1])
    ex, ey = _reach(env, x[..., 0], x[..., 1])
    return np.hypot(ex, ey) - env.params["reach"]


def constraint(env: EnvSpec, x) -> np.ndarray:
    """Constraint value ``h(x)``; positive means violating."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (env.state_dim,):
        raise ContractError(f"state must have {env.state_dim} entries, got shape {x.shape}")
    return np.maximum(task_constraint(env, x), _exit_term(env, x))


def jacobians(env: EnvSpec, x, u, check: bool = True):
    """Analytic Jacobians ``(df/dx, df/du, dh/dx)``.

    The angle wrap is locally the identity, so it does not appear.  Where ``h``
    is not differentiable a fixed subgradient is returned: ``sign(0) = 0`` for
    absolute values and norms at the origin, and the first maximising branch
    of each ``max``.
    """
    if check:
        x, u = _check(env, x, u)
    else:
        x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, batch + (env.state_dim,))
    m, n, dt = env.state_dim, env.control_dim, env.dt
    fx = np.zeros(batch + (m, m))
    fu = np.zeros(batch + (m, n))
    for i in range(m):
        fx[..., i, i] = 1.0
    if env.name is EnvName.DOUBLE_INTEGRATOR:
        fx[..., 0, 1] = dt
        fu[..., 1, 0] = dt
    elif env.name in (EnvName.DOUBLE_INTEGRATOR_2D, EnvName.ROBOT_ARM):
        fx[..., 0, 2] = dt
        fx[..., 1, 3] = dt
        fu[..., 2, 0] = dt
        fu[..., 3, 1] = dt
    else:
        v, th = env.params["speed"], x[..., 2]
        fx[..., 0, 2] = -v * np.sin(th) * dt
        fx[..., 1, 2] = v * np.cos(th) * dt
        fu[..., 2, 0] = dt

    g_task = np.zeros(batch + (m,))
    if env.name is EnvName.DOUBLE_INTEGRATOR:
        g_task[..., 0] = np.sign(x[..., 0])
    elif env.name in (EnvName.DOUBLE_INTEGRATOR_2D, EnvName.UNICYCLE):
        r = np.hypot(x[..., 0], x[..., 1])
        safe_r = np.where(r > 0, r, 1.0)
        g_task[..., 0] = np.where(r > 0, -x[..., 0] / safe_r, 0.0)
        g_task[..., 1] = np.where(r > 0, -x[..., 1] / safe_r, 0.0)
    else:
        l1, l2 = env.params["l1"], env.params["l2"]
        th1, th2 = x[..., 0], x[..., 1]
        ex, ey = _reach(env, th1, th2)
        r = np.hypot(ex, ey)
        safe_r = np.where(r > 0, r, 1.0)
        # d/dth1 of ee is (-ey, ex): norm unchanged by base rotation
        dex2 = -l2 * np.sin(th1 + th2)
        dey2 = l2 * np.cos(th1 + th2)
        g_task[..., 1] = np.where(r > 0, (ex * dex2 + ey * dey2) / safe_r, 0.0)

    idx = list(env.linear_coords)
    c = env.state_box.center[idx]
    b = 0.5 * env.state_box.width[idx]
    scaled = np.abs(x[..., idx] - c) / b
    k = np.argmax(scaled, axis=-1)
    g_exit = np.zeros(batch + (m,))
    xk = np.take_along_axis(x[..., idx] - c, k[..., None], axis=-1)[..., 0]
    bk = b[k]
    np.put_along_axis(g_exit, np.asarray(idx)[k][..., None], (np.sign(xk) / bk)[..., None], axis=-1)

    use_task = task_constraint(env, x) >= _exit_term(env, x)
    hx = np.where(use_task[..., None], g_task, g_exit)
    return fx, fu, hx


# ---------------------------------------------------------------- intervals


def cos_range(lo, hi):
    """Exact range of cos over ``[lo, hi]`` (elementwise, any real interval)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    clo = np.minimum(np.cos(lo), np.cos(hi))
    chi = np.maximum(np.cos(lo), np.cos(hi))
    # an interior maximum at 2k*pi, minimum at (2k+1)*pi
    has_max = np.floor(hi / TWO_PI) >= np.ceil(lo / TWO_PI)
    has_min = np.floor((hi - math.pi) / TWO_PI) >= np.ceil((lo - math.pi) / TWO_PI)
    chi = np.where(has_max, 1.0, chi)
    clo = np.where(has_min, -1.0, clo)
    full = (hi - lo) >= TWO_PI
    clo = np.where(full, -1.0, clo)
    chi = np.where(full, 1.0, chi)
    return np.maximum(clo - _TRIG_PAD, -1.0), np.minimum(chi + _TRIG_PAD, 1.0)


def sin_range(lo, hi):
    return cos_range(np.asarray(lo) - 0.5 * math.pi, np.asarray(hi) - 0.5 * math.pi)


def _mul_interval(alo, ahi, blo, bhi):
    c = np.stack([alo * blo, alo * bhi, ahi * blo, ahi * bhi])
    return c.min(axis=0), c.max(axis=0)


def _next_unwrapped(env: EnvSpec, xlo, xhi, ulo, uhi):
    """Interval Euler update before any angle wrapping (batched arrays)."""
    dt = env.dt
    lo = np.empty_like(xlo)
    hi = np.empty_like(xhi)
    if env.name is EnvName.DOUBLE_INTEGRATOR:
        lo[..., 0] = xlo[..., 0] + xlo[..., 1] * dt
        hi[..., 0] = xhi[..., 0] + xhi[..., 1] * dt
        lo[..., 1] = xlo[..., 1] + ulo[..., 0] * dt
        hi[..., 1] = xhi[..., 1] + uhi[..., 0] * dt
    elif env.name in (EnvName.DOUBLE_INTEGRATOR_2D, EnvName.ROBOT_ARM):
        lo[..., 0:2] = xlo[..., 0:2] + xlo[..., 2:4] * dt
        hi[..., 0:2] = xhi[..., 0:2] + xhi[..., 2:4] * dt
        lo[..., 2:4] = xlo[..., 2:4] + ulo * dt
        hi[..., 2:4] = xhi[..., 2:4] + uhi * dt
    else:
        v = env.params["speed"]
        clo, chi = cos_range(xlo[..., 2], xhi[..., 2])
        slo, shi = sin_range(xlo[..., 2], xhi[..., 2])
        # v * cos(th) * dt evaluated left to right as in step()
        lo[..., 0] = xlo[..., 0] + v * clo * dt
        hi[..., 0] = xhi[..., 0] + v * chi * dt
        lo[..., 1] = xlo[..., 1] + v * slo * dt
        hi[..., 1] = xhi[..., 1] + v * shi * dt
        lo[..., 2] = xlo[..., 2] + ulo[..., 0] * dt
        hi[..., 2] = xhi[..., 2] + uhi[..., 0] * dt
    return lo, hi


def step_interval_pieces(env: EnvSpec, xlo, xhi, ulo, uhi):
    """Sound enclosure of ``f`` over boxes, as a list of ``(lo, hi, valid)``.

    Inputs are batched arrays ``(N, dim)``.  Angle coordinates whose image
    crosses ``+-pi`` are split into the in-range part and the wrapped part,
    so up to ``2**len(angular)`` pieces are returned; ``valid`` masks the
    pieces that exist for each box.  The union of valid pieces contains
    ``step(x, u)`` for every ``(x, u)`` in the input boxes.
    """
    xlo = np.atleast_2d(np.asarray(xlo, dtype=float))
    xhi = np.atleast_2d(np.asarray(xhi, dtype=float))
    ulo = np.atleast_2d(np.asarray(ulo, dtype=float))
    uhi = np.atleast_2d(np.asarray(uhi, dtype=float))
    lo, hi = _next_unwrapped(env, xlo, xhi, ulo, uhi)
    pieces = [(lo, hi, np.ones(lo.shape[0], dtype=bool))]
    pi = math.pi
    for a in env.angular:
        alo, ahi = lo[:, a], hi[:, a]
        over = ahi >= pi
        under = alo < -pi
        full = (over & under) | (ahi - alo >= TWO_PI)
        # the in-range part is empty when the whole image lies past +-pi
        main_valid = full | ((alo <= pi) & (ahi >= -pi))
        main_lo = np.where(full, -pi, np.clip(alo, -pi, pi))
        main_hi = np.where(full, pi, np.clip(ahi, main_lo, pi))
        alt_valid = (over | under) & ~full
        alt_lo = np.where(over, np.maximum(alo, pi) - TWO_PI - _WRAP_PAD, alo + TWO_PI - _WRAP_PAD)
        alt_hi = np.where(over, ahi - TWO_PI + _WRAP_PAD, np.minimum(ahi, -pi) + TWO_PI + _WRAP_PAD)
        alt_lo = np.clip(alt_lo, -pi, pi)
        alt_hi = np.clip(alt_hi, -pi, pi)
        new = []
        for plo, phi, pv in pieces:
            m_lo, m_hi = plo.copy(), phi.copy()
            m_lo[:, a] = main_lo
            m_hi[:, a] = main_hi
            new.append((m_lo, m_hi, pv & main_valid))
            w_lo, w_hi = plo.copy(), phi.copy()
            w_lo[:, a] = alt_lo
            w_hi[:, a] = alt_hi
            new.append((w_lo, w_hi, pv & alt_valid))
        pieces = new
    return pieces


def step_interval(env: EnvSpec, x_box: Box, u_box: Box) -> Box:
    """Single-box enclosure of ``f`` over ``x_box x u_box``.

    Wrapped angle pieces are merged into their hull, which is the full
    ``[-pi, pi]`` whenever the image crosses the wrap point.
    """
    if not x_box.is_subset(env.state_box, 1e-9) or not u_box.is_subset(env.control_box, 1e-9):
        raise ContractError("input boxes must lie inside the environment domain")
    pieces = step_interval_pieces(env, x_box.lo[None], x_box.hi[None], u_box.lo[None], u_box.hi[None])
    los = np.stack([p[0][0] for p in pieces if p[2][0]])
    his = np.stack([p[1][0] for p in pieces if p[2][0]])
    return Box(los.min(axis=0), his.max(axis=0))


def constraint_interval(env: EnvSpec, xlo, xhi):
    """Exact range of ``h`` over state boxes (batched ``(N, m)`` arrays)."""
    xlo = np.atleast_2d(np.asarray(xlo, dtype=float))
    xhi = np.atleast_2d(np.asarray(xhi, dtype=float))
    if env.name is EnvName.DOUBLE_INTEGRATOR:
        alo, ahi = _abs_range(xlo[:, 0], xhi[:, 0])
        tlo, thi = alo - env.params["wall"], ahi - env.params["wall"]
    elif env.name in (EnvName.DOUBLE_INTEGRATOR_2D, EnvName.UNICYCLE):
        nlo, nhi = _norm_range(xlo[:, :2], xhi[:, :2])
        r = env.params["hazard_radius"]
        tlo, thi = r - nhi, r - nlo
    else:
        l1, l2 = env.params["l1"], env.params["l2"]
        clo, chi = cos_range(xlo[:, 1], xhi[:, 1])
        sq_lo = np.maximum(l1 * l1 + l2 * l2 + 2 * l1 * l2 * clo, 0.0)
        sq_hi = np.maximum(l1 * l1 + l2 * l2 + 2 * l1 * l2 * chi, 0.0)
        tlo = np.sqrt(sq_lo) * (1 - 1e-15) - env.params["reach"]
        thi = np.sqrt(sq_hi) * (1 + 1e-15) + 1e-15 - env.params["reach"]
    idx = list(env.linear_coords)
    c = env.state_box.center[idx]
    b = 0.5 * env.state_box.width[idx]
    slo, shi = _abs_range(xlo[:, idx] - c, xhi[:, idx] - c)
    elo = np.max(slo / b, axis=-1) - 1.0 + env.params["exit_margin"]
    ehi = np.max(shi / b, axis=-1) - 1.0 + env.params["exit_margin"]
    return np.maximum(tlo, elo), np.maximum(thi, ehi)


def _abs_range(lo, hi):
    alo = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(np.abs(lo), np.abs(hi)))
    ahi = np.maximum(np.abs(lo), np.abs(hi))
    return alo, ahi


def _norm_range(lo, hi):
    near = np.clip(0.0, lo, hi)
    far = np.maximum(np.abs(lo), np.abs(hi))
    nlo = np.sqrt(np.sum(near * near, axis=-1)) * (1 - 1e-15)
    nhi = np.sqrt(np.sum(far * far, axis=-1)) * (1 + 1e-15)
    return nlo, nhi
