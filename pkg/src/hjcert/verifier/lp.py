"""Export of a verification task as a mixed-integer QCP in LP file format.

The model is a feasibility problem over one box: ReLU nodes use the big-M
encoding with the pre-activation bounds of a :class:`BoundsResult` (stable
nodes need no binary), the embedding inner product is a quadratic equality
row, and the two condition rows are ``Q <= 0`` and ``viol >= 0``.  The
constraint function is written with ``ABS``/``MAX`` general constraints and,
for disc hazards, a nonconvex quadratic row.  A small reader for the same
grammar is included so exports can be checked without a solver.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import envs
from ..bounds import BoundsResult
from ..errors import ContractError
from ..net import BaselineQNetwork, Mlp, QNetwork
from .tasks import TaskKind, VerifyTask


def _num(v: float) -> str:
    return repr(float(v) + 0.0)


def _lin(terms, const: float = 0.0) -> tuple[str, float]:
    """Format ``sum c*v`` and return it with the constant moved to the right."""
    parts = []
    for c, v in terms:
        if c == 0:
            continue
        sign = "-" if c < 0 else "+"
        parts.append(f"{sign} {_num(abs(c))} {v}")
    if not parts:
        parts = ["+ 0 " + terms[0][1]]
    s = " ".join(parts)
    return (s[2:] if s.startswith("+ ") else s), -const


class _Writer:
    def __init__(self):
        self.rows: list[str] = []
        self.bounds: list[str] = []
        self.binaries: list[str] = []
        self.general: list[str] = []

    def row(self, name, terms, sense, rhs, const=0.0, quad: str | None = None):
        if terms:
            lhs, shift = _lin(terms, const)
            lhs = lhs + (f" + [ {quad} ]" if quad else "")
        else:
            lhs, shift = f"[ {quad} ]", -const
        self.rows.append(f" {name}: {lhs} {sense} {_num(rhs + shift)}")

    def bound(self, v, lo=None, hi=None):
        if lo is None and hi is None:
            self.bounds.append(f" {v} free")
        elif hi is None:
            self.bounds.append(f" {v} >= {_num(lo)}")
        elif lo is None:
            self.bounds.append(f" -inf <= {v} <= {_num(hi)}")
        else:
            self.bounds.append(f" {_num(lo)} <= {v} <= {_num(hi)}")


def _encode_mlp(w: _Writer, net: Mlp, inputs: list[str], pre_bounds, tag: str) -> list[str]:
    """Big-M encoding of ``net``; returns the output (last affine) variables."""
    prev = inputs
    n_layers = len(net.weights)
    for k in range(n_layers):
        W, b = net.weights[k], net.biases[k]
        lo, hi = pre_bounds[k]
        last = k == n_layers - 1
        out = []
        for j in range(W.shape[0]):
            zh = f"{tag}_h{k}_{j}"
            w.row(f"{tag}_aff{k}_{j}", [(1.0, zh)] + [(-W[j, i], prev[i]) for i in range(len(prev))], "=", b[j])
            w.bound(zh, lo[j], hi[j])
            if last:
                out.append(zh)
                continue
            z = f"{tag}_z{k}_{j}"
            if lo[j] >= 0:
                w.row(f"{tag}_on{k}_{j}", [(1.0, z), (-1.0, zh)], "=", 0.0)
                w.bound(z, 0.0, max(hi[j], 0.0))
            elif hi[j] <= 0:
                w.bound(z, 0.0, 0.0)
            else:
                d = f"{tag}_d{k}_{j}"
                w.binaries.append(d)
                w.row(f"{tag}_ge{k}_{j}", [(1.0, z), (-1.0, zh)], ">=", 0.0)
                # z <= zh - lo (1 - d)  and  z <= hi d
                w.row(f"{tag}_m1{k}_{j}", [(1.0, z), (-1.0, zh), (-lo[j], d)], "<=", -lo[j])
                w.row(f"{tag}_m2{k}_{j}", [(1.0, z), (-hi[j], d)], "<=", 0.0)
                w.bound(z, 0.0, hi[j])
            out.append(z)
        prev = out
    return prev


def _encode_constraint(w: _Writer, env: envs.EnvSpec, xs: list[str]) -> str:
    """Write ``h(x)`` as general constraints; returns the variable holding it."""
    terms = []
    idx = list(env.linear_coords)
    c = env.state_box.center
    half = 0.5 * env.state_box.width
    margin = env.params["exit_margin"]
    for i in idx:
        # t = |x_i - c_i| / b_i - 1 + margin
        s, a, t = f"hs{i}", f"ha{i}", f"ht{i}"
        w.row(f"hs_def{i}", [(1.0, s), (-1.0, xs[i])], "=", -c[i])
        w.bound(s)
        w.general.append(f" habs{i}: {a} = ABS ( {s} )")
        w.bound(a, 0.0)
        w.row(f"ht_def{i}", [(1.0, t), (-1.0 / half[i], a)], "=", margin - 1.0)
        w.bound(t)
        terms.append(t)
    name = env.name
    if name is envs.EnvName.DOUBLE_INTEGRATOR:
        w.row("htask_def", [(1.0, "htask"), (-1.0, "ha0")], "=", -env.params["wall"])
    elif name in (envs.EnvName.DOUBLE_INTEGRATOR_2D, envs.EnvName.UNICYCLE):
        # htask = radius - r with r^2 = x0^2 + x1^2, r >= 0
        w.row("hr_def", [], "=", 0.0, quad=f"hr ^ 2 - {xs[0]} ^ 2 - {xs[1]} ^ 2")
        w.bound("hr", 0.0)
        w.row("htask_def", [(1.0, "htask"), (1.0, "hr")], "=", env.params["hazard_radius"])
    else:
        raise ContractError("the arm constraint uses trigonometric terms and has no MIQCP encoding here")
    w.bound("htask")
    w.general.append(" hmax: hval = MAX ( " + " , ".join(["htask"] + terms) + " )")
    w.bound("hval")
    return "hval"


def export_miqcp(task: VerifyTask, bounds: BoundsResult, path, index: int = 0) -> Path:
    """Write the feasibility model for ``task`` over its domain to ``path``.

    ``bounds`` must come from :func:`hjcert.bounds.qnet_bounds` (or the batch
    version at ``index``) over ``task.domain``; its pre-activation bounds are
    the big-M constants and decide which nodes need a binary.
    """
    if task.kind is not TaskKind.CON:
        raise ContractError("only constraint satisfaction can be exported: the policy's tanh output "
                            "is not representable in an MIQCP")
    model = task.q
    env = task.env
    dom = task.domain
    m, d = env.state_dim, dom.dim
    w = _Writer()
    ys = [f"y{i}" for i in range(d)]
    for i, v in enumerate(ys):
        w.bound(v, dom.lo[i], dom.hi[i])
    pre = lambda mb: [(lo[index], hi[index]) for lo, hi in mb.pre]
    if isinstance(model, QNetwork):
        if set(bounds.branches) != {"x", "u"}:
            raise ContractError("bounds do not belong to a multiplicative Q network")
        e1 = _encode_mlp(w, model.x_branch, ys[:m], pre(bounds.branches["x"]), "x")
        e2 = _encode_mlp(w, model.u_branch, ys, pre(bounds.branches["u"]), "u")
        quad = " ".join(f"- {a} * {b}" for a, b in zip(e1, e2))
        w.row("qdef", [(1.0, "q")], "=", 0.0, quad=quad)
    elif isinstance(model, BaselineQNetwork):
        out = _encode_mlp(w, model.net, ys, pre(bounds.branches["net"]), "n")
        w.row("qdef", [(1.0, "q"), (-1.0, out[0])], "=", 0.0)
    else:
        raise ContractError(f"unsupported model {type(model).__name__}")
    w.bound("q")
    w.row("cond_q", [(1.0, "q")], "<=", 0.0)
    h = _encode_constraint(w, env, ys[:m])
    w.row("cond_viol", [(1.0, h)], ">=", 0.0)

    lines = ["\\ feasibility model: Q <= 0 and h >= 0 over one input box",
             f"\\ env {env.name.value}, {len(w.binaries)} binaries",
             "Minimize", " obj:", "Subject To", *w.rows, "Bounds", *w.bounds]
    if w.binaries:
        lines += ["Binaries", *(" " + b for b in w.binaries)]
    if w.general:
        lines += ["General Constraints", *w.general]
    lines.append("End")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- reader


@dataclass
class LpRow:
    name: str
    linear: dict
    quadratic: list           # (coef, var_a, var_b); squares have var_a == var_b
    sense: str
    rhs: float


@dataclass
class LpModel:
    rows: list = field(default_factory=list)
    bounds: dict = field(default_factory=dict)
    binaries: list = field(default_factory=list)
    general: list = field(default_factory=list)

    def row(self, name) -> LpRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def variables(self) -> set:
        out = set(self.bounds) | set(self.binaries)
        for r in self.rows:
            out |= set(r.linear)
            for _, a, b in r.quadratic:
                out |= {a, b}
        return out


_SECTIONS = {
    "minimize": "obj", "maximize": "obj", "minimise": "obj", "maximise": "obj",
    "subject to": "st", "such that": "st", "st": "st", "s.t.": "st",
    "bounds": "bounds", "binaries": "bin", "binary": "bin", "bin": "bin",
    "generals": "gen", "general": "gen", "general constraints": "genc", "end": "end",
}
_NAME = r"[A-Za-z_][A-Za-z0-9_.]*"
_NUMBER = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|[+-]?inf(?:inity)?"


class LpParseError(ValueError):
    pass


def _parse_expr(text: str, lineno: int):
    linear, quad = {}, []
    toks = re.findall(rf"\[|\]|\^|\*|[+-]|{_NAME}|(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?", text)
    if "".join(toks).replace(" ", "") != re.sub(r"\s+", "", text):
        raise LpParseError(f"line {lineno}: unexpected characters in {text!r}")
    i, inside = 0, False
    while i < len(toks):
        t = toks[i]
        if t == "[":
            if inside:
                raise LpParseError(f"line {lineno}: nested brackets")
            inside, i = True, i + 1
            continue
        if t == "]":
            if not inside:
                raise LpParseError(f"line {lineno}: unmatched bracket")
            inside, i = False, i + 1
            continue
        sign = 1.0
        while i < len(toks) and toks[i] in "+-":
            sign *= -1.0 if toks[i] == "-" else 1.0
            i += 1
        if i < len(toks) and toks[i] == "[":
            if sign < 0:
                raise LpParseError(f"line {lineno}: a bracket may only be added")
            continue
        coef = 1.0
        if i < len(toks) and re.fullmatch(_NUMBER, toks[i]):
            coef, i = float(toks[i]), i + 1
        if i >= len(toks) or not re.fullmatch(_NAME, toks[i]):
            raise LpParseError(f"line {lineno}: expected a variable in {text!r}")
        v, i = toks[i], i + 1
        if inside:
            if i < len(toks) and toks[i] == "^":
                if i + 1 >= len(toks) or toks[i + 1] != "2":
                    raise LpParseError(f"line {lineno}: only squares are allowed")
                quad.append((sign * coef, v, v))
                i += 2
            elif i < len(toks) and toks[i] == "*":
                if i + 1 >= len(toks) or not re.fullmatch(_NAME, toks[i + 1]):
                    raise LpParseError(f"line {lineno}: bad product term")
                quad.append((sign * coef, v, toks[i + 1]))
                i += 2
            else:
                raise LpParseError(f"line {lineno}: linear term inside brackets")
        else:
            linear[v] = linear.get(v, 0.0) + sign * coef
    if inside:
        raise LpParseError(f"line {lineno}: unclosed bracket")
    return linear, quad


def parse_lp(text: str) -> LpModel:
    """Parse the subset of the LP format written by :func:`export_miqcp`.

    Raises :class:`LpParseError` on anything outside the grammar.
    """
    model = LpModel()
    section = None
    seen_end = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("\\", 1)[0].strip()
        if not line:
            continue
        key = line.lower()
        if key in _SECTIONS:
            section = _SECTIONS[key]
            if section == "end":
                seen_end = True
            continue
        if seen_end:
            raise LpParseError(f"line {lineno}: content after End")
        if section is None:
            raise LpParseError(f"line {lineno}: content before the objective section")
        if section == "obj":
            m = re.fullmatch(rf"(?:({_NAME})\s*:)?\s*(.*)", line)
            if m.group(2):
                _parse_expr(m.group(2), lineno)
        elif section == "st":
            m = re.fullmatch(rf"({_NAME})\s*:\s*(.+?)\s*(<=|>=|=<|=>|=|<|>)\s*({_NUMBER})", line)
            if not m:
                raise LpParseError(f"line {lineno}: malformed constraint {line!r}")
            lin, quad = _parse_expr(m.group(2), lineno)
            sense = {"=<": "<=", "<": "<=", "=>": ">=", ">": ">="}.get(m.group(3), m.group(3))
            model.rows.append(LpRow(m.group(1), lin, quad, sense, float(m.group(4))))
        elif section == "bounds":
            if re.fullmatch(rf"({_NAME})\s+free", line):
                model.bounds[line.split()[0]] = (-np.inf, np.inf)
                continue
            m = re.fullmatch(rf"({_NUMBER})\s*<=\s*({_NAME})\s*<=\s*({_NUMBER})", line)
            if m:
                model.bounds[m.group(2)] = (float(m.group(1)), float(m.group(3)))
                continue
            m = re.fullmatch(rf"({_NAME})\s*(>=|<=)\s*({_NUMBER})", line)
            if not m:
                raise LpParseError(f"line {lineno}: malformed bound {line!r}")
            lo, hi = model.bounds.get(m.group(1), (0.0, np.inf))
            val = float(m.group(3))
            model.bounds[m.group(1)] = (val, hi) if m.group(2) == ">=" else (lo, val)
        elif section == "bin":
            for v in line.split():
                if not re.fullmatch(_NAME, v):
                    raise LpParseError(f"line {lineno}: bad binary name {v!r}")
                model.binaries.append(v)
        elif section == "genc":
            m = re.fullmatch(rf"({_NAME})\s*:\s*({_NAME})\s*=\s*(ABS|MAX|MIN)\s*\(\s*(.+?)\s*\)", line)
            if not m:
                raise LpParseError(f"line {lineno}: malformed general constraint {line!r}")
            args = [a.strip() for a in m.group(4).split(",")]
            if m.group(3) == "ABS" and len(args) != 1:
                raise LpParseError(f"line {lineno}: ABS takes one argument")
            model.general.append((m.group(1), m.group(2), m.group(3), args))
        else:
            raise LpParseError(f"line {lineno}: unsupported section")
    if not seen_end:
        raise LpParseError("missing End")
    return model
