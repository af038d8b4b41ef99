"""The full train / fine-tune / verify loop and the safe-set metrics."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import envs
from .errors import ContractError
from .net import BaselineQNetwork, PolicyNetwork, QNetwork, save_model
from .training import (CounterexampleSet, TrainConfig, TrainLog, collect_transitions, fine_control_grid, finetune_round, pretrain,
                       revalidate, train_policy)
from .verifier.attack import search_counterexamples
from .verifier.bnb import BnBConfig, certify
from .verifier.tasks import Status, TaskKind, Verdict, VerifyTask

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "verify")


@dataclass
class PipelineConfig:
    env: envs.EnvSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    bnb: BnBConfig = field(default_factory=BnBConfig)
    max_finetune_rounds: int = 40
    max_verify_rounds: int = 10
    grid_metric_res: int = 101
    seed: int = 0
    model: str = "qnet"
    n_transitions: int = 50_000
    attack_samples: int = 20_000
    attack_steps: int = 10
    # a pair is fed back while Q < attack_margin and viol > -attack_margin
    attack_margin: float = 0.01
    max_cex: int = 20_000

    def __post_init__(self):
        if self.max_finetune_rounds < 1 or self.max_verify_rounds < 1:
            raise ContractError("round limits must be >= 1")
        if self.grid_metric_res < 11:
            raise ContractError("grid_metric_res must be >= 11")
        if self.model not in ("qnet", "baseline"):
            raise ContractError(f"unknown model {self.model!r}")
        if self.attack_margin < 0:
            raise ContractError("attack_margin must be >= 0")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["env"] = self.env.name.value
        d["train"] = self.train.to_dict()
        d["bnb"] = self.bnb.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown pipeline config keys: {sorted(unknown)}")
        if "env" not in d:
            raise ContractError("pipeline config needs an env")
        env = d["env"]
        d["env"] = env if isinstance(env, envs.EnvSpec) else (
            envs.EnvSpec.from_dict(env) if isinstance(env, dict) else envs.make_env(env))
        try:
            if not isinstance(d.get("train"), TrainConfig):
                d["train"] = TrainConfig(**d.get("train", {}))
            if not isinstance(d.get("bnb"), BnBConfig):
                d["bnb"] = BnBConfig(**d.get("bnb", {}))
            return cls(**d)
        except TypeError as e:
            raise ContractError(f"bad pipeline config: {e}") from None

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- metrics


def state_grid(env: envs.EnvSpec, res: int) -> np.ndarray:
    sb = env.state_box
    axes = [np.linspace(sb.lo[d], sb.hi[d], res) for d in range(env.state_dim)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, env.state_dim)


def eval_safe_set_size(q, policy, env: envs.EnvSpec, res: int, chunk: int = 65536) -> float:
    """Fraction of grid states with ``Q(x, pi(x)) <= 0``."""
    if res < 11:
        raise ContractError("res must be >= 11")
    states = state_grid(env, res)
    hits = 0
    for s in range(0, len(states), chunk):
        xs = states[s:s + chunk]
        hits += int(np.count_nonzero(q(xs, policy(xs)) <= 0))
    return hits / len(states)


def eval_safe_control_size(q, env: envs.EnvSpec, res_x: int, res_u: int, chunk: int = 4096) -> float:
    """Mean fraction of grid controls with ``Q <= 0`` over states that have one."""
    if res_x < 11 or res_u < 11:
        raise ContractError("resolutions must be >= 11")
    states = state_grid(env, res_x)
    cb = env.control_box
    caxes = [np.linspace(cb.lo[d], cb.hi[d], res_u) for d in range(env.control_dim)]
    controls = np.stack(np.meshgrid(*caxes, indexing="ij"), axis=-1).reshape(-1, env.control_dim)
    nu = len(controls)
    fractions = []
    for s in range(0, len(states), chunk):
        xs = states[s:s + chunk]
        qv = q(np.repeat(xs, nu, axis=0), np.tile(controls, (len(xs), 1))).reshape(len(xs), nu)
        frac = np.mean(qv <= 0, axis=1)
        fractions.append(frac[frac > 0])
    fractions = np.concatenate(fractions)
    return float(fractions.mean()) if fractions.size else 0.0


def audit_certificate(q, policy, env: envs.EnvSpec, n: int, seed: int = 0, chunk: int = 100_000,
                      tol: float = 1e-9) -> dict:
    """Count sampled pairs breaking either certificate condition.

    Returns counts of ``Q < -tol`` with ``h > tol`` (``con``) and of
    ``Q < -tol`` with ``Q(f(x,u), pi(f(x,u))) > tol`` (``inv``).
    """
    rng = np.random.default_rng(seed)
    con = inv = 0
    for s in range(0, n, chunk):
        k = min(chunk, n - s)
        x, u = env.state_box.sample(rng, k), env.control_box.sample(rng, k)
        qv = q(x, u)
        inside = qv < -tol
        con += int(np.count_nonzero(inside & (envs.constraint(env, x) > tol)))
        xn = envs.step(env, x[inside], u[inside], check=False)
        inv += int(np.count_nonzero(q(xn, policy(xn)) > tol))
    return {"samples": n, "con": con, "inv": inv}


def emit_safe_set_grid(q, policy, env: envs.EnvSpec, slice_spec: dict | None, res: int, path) -> Path:
    """Write ``c1,c2,q,h`` rows over a 2-D slice of the state box.

    ``slice_spec`` is ``{"axes": [i, j], "fixed": {k: value}}``; coordinates
    not plotted and not fixed are held at the box center.
    """
    spec = slice_spec or {}
    i, j = spec.get("axes", (0, 1))
    fixed = {int(k): float(v) for k, v in spec.get("fixed", {}).items()}
    sb = env.state_box
    if i == j or not (0 <= i < env.state_dim and 0 <= j < env.state_dim):
        raise ContractError(f"bad slice axes {(i, j)}")
    base = sb.center.copy()
    for k, v in fixed.items():
        base[k] = v
    a = np.linspace(sb.lo[i], sb.hi[i], res)
    b = np.linspace(sb.lo[j], sb.hi[j], res)
    A, B = np.meshgrid(a, b, indexing="ij")
    x = np.tile(base, (res * res, 1))
    x[:, i], x[:, j] = A.ravel(), B.ravel()
    qv = q(x, policy(x))
    h = envs.constraint(env, x)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["c1", "c2", "q", "h"])
        for row in zip(x[:, i], x[:, j], qv, h):
            w.writerow([repr(float(v)) for v in row])
    return path


def default_slices(env: envs.EnvSpec) -> dict:
    """Slices that reproduce the usual two-dimensional safe-set pictures."""
    name = env.name
    if name is envs.EnvName.DOUBLE_INTEGRATOR:
        return {"position_velocity": {"axes": [0, 1]}}
    if name is envs.EnvName.DOUBLE_INTEGRATOR_2D:
        return {"position": {"axes": [0, 1]}}
    if name is envs.EnvName.UNICYCLE:
        return {f"heading_{k}": {"axes": [0, 1], "fixed": {2: th}}
                for k, th in (("0", 0.0), ("pi2", np.pi / 2))}
    return {"joint_angles": {"axes": [0, 1]}}


# ---------------------------------------------------------------- artifact


@dataclass
class CertifiedArtifact:
    q: object
    policy: PolicyNetwork
    verdicts: dict
    metrics: dict
    provenance: dict
    config: PipelineConfig | None = None
    train_log: TrainLog | None = None

    @property
    def certified(self) -> bool:
        return all(v.status is Status.CERTIFIED for v in self.verdicts.values()) and len(self.verdicts) == 2

    @property
    def label(self) -> str:
        return "certified" if self.certified else "uncertified"

    def verdicts_json(self) -> dict:
        return {"label": self.label, **{k: v.to_dict() for k, v in self.verdicts.items()}}

    def save(self, run_dir, grid_res: int = 101) -> Path:
        """Write the run directory; an uncertified run is marked as such."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        if self.config is not None:
            (run_dir / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2))
        save_model(self.q, run_dir / "qnet.json")
        save_model(self.policy, run_dir / "policy.json")
        (run_dir / "verdicts.json").write_text(json.dumps(self.verdicts_json(), indent=2))
        (run_dir / "provenance.json").write_text(json.dumps(self.provenance, indent=2))
        write_metrics(self.metrics, run_dir / "metrics.csv")
        if self.train_log is not None:
            self.train_log.to_csv(run_dir / "train_log.csv")
        env = self.config.env if self.config is not None else None
        if env is not None:
            for name, spec in default_slices(env).items():
                emit_safe_set_grid(self.q, self.policy, env, spec, grid_res, run_dir / "grids" / f"{name}.csv")
        marker = run_dir / "UNCERTIFIED"
        if not self.certified:
            marker.write_text("verification did not certify both conditions\n")
        elif marker.exists():
            marker.unlink()
        return run_dir

    def export_certified(self, path) -> Path:
        """Save the networks as a certified pair; refused for uncertified runs."""
        if not self.certified:
            raise ContractError("artifact is uncertified and cannot be exported as certified")
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_model(self.q, path / "certified_qnet.json")
        save_model(self.policy, path / "certified_policy.json")
        return path


def write_metrics(metrics: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "safe_set_size", "safe_control_size"])
        for stage in STAGES:
            if stage in metrics:
                m = metrics[stage]
                w.writerow([stage, repr(float(m["safe_set_size"])), repr(float(m["safe_control_size"]))])


def read_metrics(path) -> dict:
    with open(path) as f:
        return {r["stage"]: {"safe_set_size": float(r["safe_set_size"]),
                             "safe_control_size": float(r["safe_control_size"])} for r in csv.DictReader(f)}


# ---------------------------------------------------------------- loop


def stage_metrics(q, policy, env, res) -> dict:
    res_x = {2: 41, 3: 21}.get(env.state_dim, 11)
    res_u = 21 if env.control_dim == 1 else 11
    return {"safe_set_size": eval_safe_set_size(q, policy, env, res),
            "safe_control_size": eval_safe_control_size(q, env, res_x, res_u)}


def metric_res(env, res):
    """Grid resolution used for state-space metrics; capped to keep 4-D grids tractable."""
    cap = {2: 201, 3: 61, 4: 25}.get(env.state_dim, 11)
    return max(11, min(res, cap))


def init_models(cfg: PipelineConfig, rng):
    env = cfg.env
    if cfg.model == "baseline":
        q = BaselineQNetwork.init(env.state_dim, env.control_dim, rng)
    else:
        q = QNetwork.init(env.state_dim, env.control_dim, rng)
    policy = PolicyNetwork.init(env.state_dim, env.control_box.lo, env.control_box.hi, rng)
    return q, policy


def find_counterexamples(q, policy, env, rng, n, steps, margin, keep) -> CounterexampleSet:
    """Margin-inflated counterexamples of both conditions found by sampling and ascent."""
    cex = CounterexampleSet.empty(env.state_dim, env.control_dim)
    for kind in (TaskKind.CON, TaskKind.INV):
        task = VerifyTask(kind, q, env, policy)
        y, qv, viol = search_counterexamples(task, rng, n, steps, margin=margin, keep=keep)
        x, u = task.split(y)
        (cex.add_con if kind is TaskKind.CON else cex.add_inv)(x, u, np.stack([qv, viol], axis=1))
    return cex


def _add_points(cex, kind, task, y):
    if y is None or not len(y):
        return
    x, u = task.split(np.atleast_2d(y))
    (cex.add_con if kind is TaskKind.CON else cex.add_inv)(x, u)


def run_pipeline(cfg: PipelineConfig, q=None, policy=None, progress=None) -> CertifiedArtifact:
    """Pretrain, fine-tune on counterexamples, fit the policy and verify.

    ``q``/``policy`` may be given to skip initialisation; pretraining still
    runs unless ``cfg.train.epochs`` is 0.  The returned artifact always
    carries metrics for every stage reached; check ``artifact.certified``.
    """
    env, tc = cfg.env, cfg.train
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    say = progress or (lambda msg: log.info(msg))
    if q is None or policy is None:
        q0, p0 = init_models(cfg, rng)
        q = q if q is not None else q0
        policy = policy if policy is not None else p0
    res = metric_res(env, cfg.grid_metric_res)
    train_log = TrainLog()
    data = collect_transitions(env, None, cfg.n_transitions, cfg.seed)

    # (1) pretraining
    if tc.epochs > 0:
        q, _ = pretrain(q, policy, data, replace(tc, seed=cfg.seed), env, log_to=train_log)
    train_policy(policy, q, data.x, tc, seed=cfg.seed, grid=fine_control_grid(env))
    metrics = {"pretrain": stage_metrics(q, policy, env, res)}
    say(f"pretrain done: {metrics['pretrain']}")

    # (2) adversarial fine-tuning until an attack round comes back empty
    cex = CounterexampleSet.empty(env.state_dim, env.control_dim)
    ft_rounds = 0
    step = len(train_log.rows)
    for r in range(cfg.max_finetune_rounds):
        found = find_counterexamples(q, policy, env, rng, cfg.attack_samples, cfg.attack_steps,
                                     cfg.attack_margin, cfg.max_cex // 10)
        if len(found) == 0:
            break
        ft_rounds += 1
        cex = revalidate(q, policy, env, cex, margin=tc.repair_margin)
        cex.extend(found, cap=cfg.max_cex)
        q, policy, rep = finetune_round(q, policy, cex, data, tc, env, train_log,
                                        seed=cfg.seed * 7919 + r, step0=step, round_index=r)
        step += tc.finetune_steps
        say(f"finetune round {r}: {len(found)} new, {len(cex)} held, repair {rep['repair_rate']:.3f}")
    metrics["finetune"] = stage_metrics(q, policy, env, res)

    # (3) policy approximation against the fine-tuned Q
    train_policy(policy, q, np.concatenate([data.x, data.x_next]), tc, seed=cfg.seed + 1,
                 grid=fine_control_grid(env))

    # (4) verification with counterexample feedback
    verdicts = {}
    v_rounds = 0
    for r in range(cfg.max_verify_rounds):
        v_rounds += 1
        verdicts = {}
        feedback = CounterexampleSet.empty(env.state_dim, env.control_dim)
        for kind in (TaskKind.CON, TaskKind.INV):
            task = VerifyTask(kind, q, env, policy)
            v = certify(task, cfg.bnb, seed=cfg.seed + r)
            verdicts[kind.value] = v
            say(f"verify round {r} {kind.value}: {v.status.value} {v.stats}")
            if v.status is Status.FALSIFIED:
                _add_points(feedback, kind, task, v.witnesses)
            elif v.status is Status.UNKNOWN:
                _add_points(feedback, kind, task, v.near_misses)
            if v.status is not Status.CERTIFIED:
                break
        if all(v.status is Status.CERTIFIED for v in verdicts.values()) and len(verdicts) == 2:
            break
        if r == cfg.max_verify_rounds - 1:
            break
        more = find_counterexamples(q, policy, env, rng, cfg.attack_samples, cfg.attack_steps,
                                    cfg.attack_margin, cfg.max_cex // 10)
        feedback.extend(more)
        cex = revalidate(q, policy, env, cex, margin=tc.repair_margin)
        cex.extend(feedback, cap=cfg.max_cex)
        q, policy, _ = finetune_round(q, policy, cex, data, tc, env, train_log,
                                      seed=cfg.seed * 104729 + r, step0=step,
                                      round_index=ft_rounds + r)
        step += tc.finetune_steps

    art = CertifiedArtifact(q, policy, verdicts, metrics, {}, cfg, train_log)
    if art.certified:
        metrics["verify"] = stage_metrics(q, policy, env, res)
    else:
        metrics["verify"] = {"safe_set_size": 0.0, "safe_control_size": 0.0}
    art.provenance = {"config_hash": cfg.digest(), "seed": cfg.seed, "finetune_rounds": ft_rounds,
                      "verify_rounds": v_rounds, "n_cex": len(cex), "label": art.label,
                      "wall_time": time.perf_counter() - t0}
    return art
