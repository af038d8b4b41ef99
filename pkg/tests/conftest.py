import numpy as np
import pytest

from hjcert import envs
from hjcert.net import Mlp, PolicyNetwork, QNetwork

ENV_NAMES = [e.value for e in envs.EnvName]


def constant_q(env, value, embed_dim=8):
    """QNetwork with ``Q(x, u) = value`` everywhere."""
    rng = np.random.default_rng(0)
    q = QNetwork.init(env.state_dim, env.control_dim, rng, embed_dim=embed_dim)
    for w in q.x_branch.weights + q.u_branch.weights:
        w[...] = 0.0
    for b in q.x_branch.biases + q.u_branch.biases:
        b[...] = 0.0
    q.x_branch.biases[-1][0] = 1.0
    q.u_branch.biases[-1][0] = value
    return q


def zero_policy(env):
    rng = np.random.default_rng(0)
    pi = PolicyNetwork.init(env.state_dim, env.control_box.lo, env.control_box.hi, rng)
    for w in pi.net.weights:
        w[...] = 0.0
    for b in pi.net.biases:
        b[...] = 0.0
    return pi


def random_qnet(state_dim, control_dim, rng, hidden=(8, 8), embed_dim=4, scale=1.0):
    q = QNetwork.init(state_dim, control_dim, rng, hidden=hidden, embed_dim=embed_dim)
    for p in q.params():
        p[...] = scale * rng.normal(size=p.shape) / np.sqrt(max(1, p.shape[-1]))
    return q


def random_policy(env, rng, hidden=(8,), scale=1.0):
    pi = PolicyNetwork(Mlp.init([env.state_dim, *hidden, env.control_dim], rng), env.control_box.lo,
                       env.control_box.hi)
    for p in pi.params():
        p[...] = scale * rng.normal(size=p.shape)
    return pi


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def di_pretrained():
    """Small double-integrator pretraining run shared across tests."""
    from hjcert.training import TrainConfig, collect_transitions, fine_control_grid, pretrain, train_policy
    env = envs.make_env("double_integrator")
    rng = np.random.default_rng(0)
    q = QNetwork.init(2, 1, rng)
    pi = PolicyNetwork.init(2, env.control_box.lo, env.control_box.hi, rng)
    cfg = TrainConfig(epochs=8, anneal_steps=400, policy_steps=100, policy_distill_steps=100)
    data = collect_transitions(env, None, 8000, 0)
    q, curve = pretrain(q, pi, data, cfg, env)
    train_policy(pi, q, data.x, cfg, seed=0, grid=fine_control_grid(env))
    return env, q, pi, data, cfg, curve


def tiny_instance(seed: int):
    """Random double-integrator task (input dim 3, hidden 8) over a random sub-box."""
    from hjcert.verifier.tasks import VerifyTask
    rng = np.random.default_rng(seed)
    env = envs.make_env("double_integrator")
    q = random_qnet(2, 1, rng, hidden=(8, 8), embed_dim=4)
    # random offset so that some instances are provably safe
    q.x_branch.biases[-1][0] += rng.uniform(-0.3, 0.6)
    q.u_branch.biases[-1][0] += rng.uniform(-0.3, 0.6)
    c = env.domain.sample(rng, 1)[0]
    half = rng.uniform(0.05, 0.4, 3)
    dom = envs.Box(np.maximum(c - half, env.domain.lo), np.minimum(c + half, env.domain.hi))
    if seed % 2:
        return VerifyTask("forward_invariance", q, env, random_policy(env, rng, scale=0.5), dom)
    return VerifyTask("constraint_satisfaction", q, env, None, dom)


def grid_violations(task, step=0.01, chunk=200_000):
    """Exhaustive grid enumeration of the task domain; returns violating points."""
    from hjcert.verifier.tasks import is_violation
    axes = [np.append(np.arange(lo, hi, step), hi) for lo, hi in zip(task.domain.lo, task.domain.hi)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(axes))
    hits = []
    for i in range(0, len(mesh), chunk):
        y = mesh[i:i + chunk]
        qv, viol = task.scores(y)
        hits.append(y[is_violation(qv, viol)])
    return np.concatenate(hits)


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str, part: str = ""):
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), part, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[c]
        ok = all(p[0] for p in parts)
        detail = "; ".join(f"{p[1]}: {p[2]}" if p[1] else p[2] for p in parts)
        tr.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'}  {detail}")
