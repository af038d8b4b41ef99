import json

import numpy as np
import pytest

from hjcert import envs
from hjcert.bounds import qnet_bounds
from hjcert.errors import ContractError, ConvergenceError
from hjcert.net import BaselineQNetwork, Mlp, QNetwork
from hjcert.verifier.attack import attack
from hjcert.verifier.bnb import BnBConfig, certify
from hjcert.verifier.lp import LpParseError, export_miqcp, parse_lp
from hjcert.verifier.oracle import value_iteration_oracle
from hjcert.verifier.tasks import Status, Verdict, VerifyTask, is_violation

from conftest import constant_q, grid_violations, random_policy, random_qnet, tiny_instance, zero_policy

DI = envs.make_env("double_integrator")


def _con(q, env=DI, domain=None):
    return VerifyTask("constraint_satisfaction", q, env, None, domain)


def test_positive_q_is_never_falsified():
    for name in ("double_integrator", "unicycle"):
        env = envs.make_env(name)
        q = constant_q(env, 1.0)
        assert attack(_con(q, env), BnBConfig(), seed=0) is None
        v = certify(VerifyTask("forward_invariance", q, env, zero_policy(env)))
        assert v.status is Status.CERTIFIED and v.stats["boxes"] == 1


def test_negative_q_falsifies_outside_position_limit():
    # Q = -1 on x0 in [0, 1]: every x0 past the 0.9 limit is a witness
    dom = envs.Box([0.0, -1.0, -1.0], [1.0, 1.0, 1.0])
    task = _con(constant_q(DI, -1.0), domain=dom)
    hit = attack(task, BnBConfig(), seed=3)
    assert hit is not None and hit.x[0] > 0.9 - 1e-9
    v = certify(task)
    assert v.status is Status.FALSIFIED
    assert v.counterexample.q < 0 and v.counterexample.violation > 0
    assert envs.constraint(DI, v.counterexample.x) > 1e-9


def test_negative_q_certified_where_constraint_holds():
    dom = envs.Box([-0.5, -0.5, -1.0], [0.5, 0.5, 1.0])
    assert certify(_con(constant_q(DI, -1.0), domain=dom)).status is Status.CERTIFIED


def test_task_validation():
    with pytest.raises(ContractError):
        _con(constant_q(DI, 1.0), domain=envs.Box([-2, -1, -1], [1, 1, 1]))
    with pytest.raises(ContractError):
        VerifyTask("forward_invariance", constant_q(DI, 1.0), DI)
    with pytest.raises(ContractError):
        BnBConfig(certify_margin=-1.0)
    with pytest.raises(ContractError):
        BnBConfig(min_box_width=0.0)


def test_strictness_guard():
    assert not is_violation(-1e-10, 1.0)
    assert not is_violation(-1.0, 1e-10)
    assert is_violation(-2e-9, 2e-9)


@pytest.mark.parametrize("seed", range(12))
def test_tiny_instances_agree_with_grid(seed):
    task = tiny_instance(seed)
    v = certify(task, BnBConfig(max_boxes=20_000), seed=seed)
    hits = grid_violations(task)
    if v.status is Status.CERTIFIED:
        assert len(hits) == 0
    if v.status is Status.FALSIFIED:
        y = np.concatenate([v.counterexample.x, v.counterexample.u])
        assert task.domain.contains(y, 1e-12)
        assert is_violation(*task.scores(y[None]))[0]
    if len(hits):
        assert attack(task, BnBConfig(), seed=seed) is not None


def test_certified_tiny_instances_survive_random_search():
    rng = np.random.default_rng(0)
    for seed in range(6):
        task = tiny_instance(seed)
        if certify(task, BnBConfig(max_boxes=20_000), seed=seed).status is not Status.CERTIFIED:
            continue
        y = task.domain.sample(rng, 100_000)
        assert not np.any(is_violation(*task.scores(y)))


def _needs_branching():
    for seed in range(1, 60, 2):
        task = tiny_instance(seed)
        v = certify(task, BnBConfig(max_boxes=20_000), seed=seed)
        if v.status is Status.CERTIFIED and v.stats["boxes"] >= 3:
            return task, v
    pytest.skip("no branching instance in range")


def test_anytime_monotonicity():
    task, full = _needs_branching()
    small = certify(task, BnBConfig(max_boxes=1, batch_size=1))
    assert small.status is Status.UNKNOWN and small.stats["unresolved"] > 0
    for budget in (2, full.stats["boxes"], 10 * full.stats["boxes"]):
        assert certify(task, BnBConfig(max_boxes=budget, batch_size=1)).status in (Status.UNKNOWN, Status.CERTIFIED)
    assert certify(task, BnBConfig(max_boxes=10 * full.stats["boxes"])).status is Status.CERTIFIED


def test_certify_is_deterministic():
    task = tiny_instance(4)
    a, b = certify(task, seed=1), certify(task, seed=1)
    assert a.status == b.status
    assert a.counterexample.to_dict() == b.counterexample.to_dict()


def test_verdict_json_roundtrip():
    v = certify(_con(constant_q(DI, -1.0)))
    d = json.loads(v.to_json())
    assert set(d) == {"status", "counterexample", "stats"}
    back = Verdict.from_dict(d)
    assert back.status is v.status and np.array_equal(back.counterexample.x, v.counterexample.x)


def test_unicycle_inv_certify_is_sound(rng):
    env = envs.make_env("unicycle")
    q = random_qnet(3, 1, rng, scale=0.5)
    q.x_branch.biases[-1][0] += 0.7
    dom = envs.Box([-0.2, -0.2, 2.9, -1.0], [0.0, 0.0, np.pi, 1.0])
    task = VerifyTask("forward_invariance", q, env, random_policy(env, rng, scale=0.3), dom)
    v = certify(task, BnBConfig(max_boxes=5000))
    if v.status is Status.CERTIFIED:
        assert not np.any(is_violation(*task.scores(dom.sample(rng, 200_000))))
    elif v.status is Status.FALSIFIED:
        y = np.concatenate([v.counterexample.x, v.counterexample.u])[None]
        assert is_violation(*task.scores(y))[0]


# ---------------------------------------------------------------- LP export


def _export(tmp_path, q, env=DI):
    task = _con(q, env)
    b = qnet_bounds(q, env.state_box, env.control_box, "linear")
    path = export_miqcp(task, b, tmp_path / "m.lp")
    return parse_lp(path.read_text()), b


def test_export_counts_binaries_and_products(tmp_path):
    q = QNetwork.init(2, 1, np.random.default_rng(0))
    model, b = _export(tmp_path, q)
    assert len(model.binaries) == b.unstable_count() > 0
    qdef = model.row("qdef")
    assert len(qdef.quadratic) == 8
    assert all(a != c for _, a, c in qdef.quadratic)
    assert model.row("cond_q").sense == "<=" and model.row("cond_viol").sense == ">="


def test_export_stable_network_has_no_binaries(tmp_path):
    # all biases positive and weights zero: every node is always on
    x_branch = Mlp([np.zeros((4, 2)), np.zeros((2, 4))], [np.ones(4), np.ones(2)])
    u_branch = Mlp([np.zeros((4, 3)), np.zeros((2, 4))], [np.ones(4), -np.ones(2)])
    model, b = _export(tmp_path, QNetwork(x_branch, u_branch, 2, 1))
    assert b.unstable_count() == 0 and model.binaries == []
    assert len(model.row("qdef").quadratic) == 2


def test_export_baseline_and_rejections(tmp_path, rng):
    q = BaselineQNetwork.init(2, 1, rng)
    model, b = _export(tmp_path, q)
    assert len(model.binaries) == b.unstable_count()
    with pytest.raises(ContractError):
        export_miqcp(VerifyTask("forward_invariance", q, DI, zero_policy(DI)), b, tmp_path / "x.lp")


@pytest.mark.parametrize("name", ["double_integrator", "double_integrator_2d", "unicycle"])
def test_export_parses_for_every_env(tmp_path, name, rng):
    env = envs.make_env(name)
    q = random_qnet(env.state_dim, env.control_dim, rng)
    model, _ = _export(tmp_path, q, env)
    assert {f"y{i}" for i in range(env.input_dim)} <= model.variables


def test_export_rejects_trigonometric_constraint(tmp_path, rng):
    with pytest.raises(ContractError):
        _export(tmp_path, random_qnet(4, 2, rng), envs.make_env("robot_arm"))


def test_parse_lp_rejects_garbage():
    with pytest.raises(LpParseError):
        parse_lp("Minimize\n obj:\nSubject To\n c1: x + $ <= 1\nEnd\n")
    with pytest.raises(LpParseError):
        parse_lp("Subject To\n c1: x <= 1\n")


# ---------------------------------------------------------------- oracle


@pytest.fixture(scope="module")
def di_oracle():
    return value_iteration_oracle(DI, 101, 9)


def test_oracle_examples(di_oracle):
    assert di_oracle.lookup([0.89, 0.5]) > 0
    assert di_oracle.lookup([0.0, 0.0]) < 0
    assert di_oracle.lookup([0.5, -0.3]) < 0
    assert di_oracle.bellman_residual() < 1e-6


def test_oracle_value_iteration_is_monotone(di_oracle):
    V = di_oracle.h.copy()
    for _ in range(30):
        nxt = np.maximum(di_oracle.h, V[di_oracle.successor].min(axis=1))
        assert np.all(nxt >= V)
        V = nxt
    assert np.all(V <= di_oracle.V + 1e-12)


def test_oracle_braking_bound(di_oracle):
    # continuous-time braking distance v^2/2 gives a lower bound on safety
    states = di_oracle.states
    x, v = states[:, 0], states[:, 1]
    doomed = np.abs(x + np.sign(v) * v ** 2 / 2) > 0.9 + 0.05
    assert np.all(~di_oracle.safe[doomed])


def test_oracle_guards():
    with pytest.raises(ContractError):
        value_iteration_oracle(envs.make_env("robot_arm"), 5, 3)
    with pytest.raises(ContractError):
        value_iteration_oracle(DI, 1, 3)
    with pytest.raises(ConvergenceError):
        value_iteration_oracle(DI, 41, 5, max_sweeps=2)
