"""Verification tasks, verdicts and exact violation scores."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .. import envs
from ..errors import ContractError
from ..net import PolicyNetwork

# counterexamples need Q < -STRICT and violation > +STRICT
STRICT = 1e-9


class TaskKind(str, enum.Enum):
    CON = "constraint_satisfaction"
    INV = "forward_invariance"


class Status(str, enum.Enum):
    CERTIFIED = "certified"
    FALSIFIED = "falsified"
    UNKNOWN = "unknown"


@dataclass
class VerifyTask:
    kind: TaskKind
    q: object
    env: envs.EnvSpec
    policy: PolicyNetwork | None = None
    domain: envs.Box | None = None

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if self.domain is None:
            self.domain = self.env.domain
        if self.domain.dim != self.env.input_dim or not self.domain.is_subset(self.env.domain, 1e-12):
            raise ContractError("task domain must lie inside state_box x control_box")
        if self.kind is TaskKind.INV and self.policy is None:
            raise ContractError("forward invariance needs a policy network")

    @property
    def state_dim(self) -> int:
        return self.env.state_dim

    def split(self, y):
        y = np.asarray(y, dtype=float)
        return y[..., :self.state_dim], y[..., self.state_dim:]

    def scores(self, y):
        """Exact ``(Q, violation)`` at joint points ``y = (x, u)``."""
        x, u = self.split(y)
        qv = self.q(x, u)
        if self.kind is TaskKind.CON:
            return qv, envs.constraint(self.env, x)
        xn = envs.step(self.env, x, u, check=False)
        return qv, self.q(xn, self.policy(xn))

    def score_and_grad(self, y):
        """``s = min(-Q, viol)`` and its (sub)gradient with respect to ``y``."""
        x, u = self.split(y)
        qv, qcache = self.q.forward(x, u)
        _, dqdx, dqdu = self.q.backward(qcache, np.ones(len(qv)))
        dq = np.concatenate([dqdx, dqdu], axis=-1)
        fx, fu, hx = envs.jacobians(self.env, x, u, check=False)
        if self.kind is TaskKind.CON:
            viol = envs.constraint(self.env, x)
            dv = np.concatenate([hx, np.zeros_like(u)], axis=-1)
        else:
            xn = envs.step(self.env, x, u, check=False)
            un, pcache = self.policy.forward(xn)
            viol, ncache = self.q.forward(xn, un)
            _, dndx, dndu = self.q.backward(ncache, np.ones(len(viol)))
            _, dpi = self.policy.backward(pcache, dndu)
            g = dndx + dpi
            dv = np.concatenate([np.einsum("ni,nij->nj", g, fx), np.einsum("ni,nij->nj", g, fu)], axis=-1)
        use_q = -qv <= viol
        s = np.where(use_q, -qv, viol)
        grad = np.where(use_q[:, None], -dq, dv)
        return s, grad, qv, viol


def is_violation(qv, viol):
    return (np.asarray(qv) < -STRICT) & (np.asarray(viol) > STRICT)


@dataclass
class Counterexample:
    x: np.ndarray
    u: np.ndarray
    q: float
    violation: float

    def to_dict(self) -> dict:
        return {"x": np.asarray(self.x).tolist(), "u": np.asarray(self.u).tolist(),
                "q": float(self.q), "violation": float(self.violation)}

    @classmethod
    def from_dict(cls, d) -> "Counterexample":
        return cls(np.asarray(d["x"], float), np.asarray(d["u"], float), float(d["q"]), float(d["violation"]))


@dataclass
class Verdict:
    status: Status
    counterexample: Counterexample | None = None
    stats: dict = field(default_factory=dict)
    # extra validated witnesses and near misses for fine-tuning; not serialised
    witnesses: np.ndarray | None = field(default=None, repr=False)
    near_misses: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"status": self.status.value,
                "counterexample": None if self.counterexample is None else self.counterexample.to_dict(),
                "stats": self.stats}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d) -> "Verdict":
        cex = d.get("counterexample")
        return cls(Status(d["status"]), None if cex is None else Counterexample.from_dict(cex), dict(d.get("stats", {})))
