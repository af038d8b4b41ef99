import csv
import json

import numpy as np
import pytest

from hjcert import envs
from hjcert.errors import ContractError
from hjcert.net import Mlp, QNetwork, load_model
from hjcert.pipeline import (CertifiedArtifact, PipelineConfig, audit_certificate, default_slices,
                             emit_safe_set_grid, eval_safe_control_size, eval_safe_set_size, read_metrics,
                             run_pipeline, write_metrics)
from hjcert.training import TrainConfig
from hjcert.verifier.bnb import BnBConfig
from hjcert.verifier.tasks import Status, Verdict

from conftest import ENV_NAMES, constant_q, zero_policy

DI = envs.make_env("double_integrator")


@pytest.mark.parametrize("name", ENV_NAMES)
def test_safe_set_size_constants(name):
    env = envs.make_env(name)
    pi = zero_policy(env)
    assert eval_safe_set_size(constant_q(env, -1.0), pi, env, 11) == 1.0
    assert eval_safe_set_size(constant_q(env, 1.0), pi, env, 11) == 0.0
    if env.state_dim > 3:
        return
    assert eval_safe_control_size(constant_q(env, -1.0), env, 11, 11) == 1.0
    assert eval_safe_control_size(constant_q(env, 1.0), env, 11, 11) == 0.0


def test_safe_control_size_half_plane():
    # Q(x, u) = u: controls u <= 0 are safe, 11 of the 21 grid points
    q = QNetwork(Mlp([np.zeros((1, 2))], [np.array([1.0])]), Mlp([np.array([[0.0, 0.0, 1.0]])], [np.zeros(1)]), 2, 1)
    val = eval_safe_control_size(q, DI, 11, 21)
    assert val == pytest.approx(11 / 21)
    assert abs(val - 0.5) <= 1 / 20


def test_metric_resolution_guard():
    with pytest.raises(ContractError):
        eval_safe_set_size(constant_q(DI, 1.0), zero_policy(DI), DI, 10)
    with pytest.raises(ContractError):
        eval_safe_control_size(constant_q(DI, 1.0), DI, 11, 5)


def test_audit_counts():
    pi = zero_policy(DI)
    assert audit_certificate(constant_q(DI, 1.0), pi, DI, 10_000) == {"samples": 10_000, "con": 0, "inv": 0}
    bad = audit_certificate(constant_q(DI, -1.0), pi, DI, 10_000)
    # Q = -1 everywhere: only the constraint can fail, and it does near the walls
    assert bad["con"] > 0 and bad["inv"] == 0


def test_emit_grid_format(tmp_path):
    path = emit_safe_set_grid(constant_q(DI, -1.0), zero_policy(DI), DI, {"axes": [0, 1]}, 13, tmp_path / "g.csv")
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["c1", "c2", "q", "h"]
    assert len(rows) == 13 ** 2 + 1
    assert float(rows[1][0]) == -1.0 and float(rows[1][2]) == -1.0
    with pytest.raises(ContractError):
        emit_safe_set_grid(constant_q(DI, 1.0), zero_policy(DI), DI, {"axes": [1, 1]}, 11, tmp_path / "x.csv")


def test_emit_grid_fixes_slice_coordinates(tmp_path):
    env = envs.make_env("unicycle")
    spec = default_slices(env)["heading_pi2"]
    path = emit_safe_set_grid(constant_q(env, 1.0), zero_policy(env), env, spec, 11, tmp_path / "u.csv")
    rows = list(csv.DictReader(open(path)))
    x = np.array([[float(r["c1"]), float(r["c2"]), np.pi / 2] for r in rows])
    np.testing.assert_allclose([float(r["h"]) for r in rows], envs.constraint(env, x))


def test_config_roundtrip_and_errors():
    cfg = PipelineConfig.from_dict({"env": "unicycle", "train": {"lr": 5e-4}, "bnb": {"max_boxes": 7}, "seed": 3})
    back = PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict() and back.digest() == cfg.digest()
    assert back.train.lr == 5e-4 and back.bnb.max_boxes == 7
    for bad in ({"env": "unicycle", "colour": 1}, {"seed": 1}, {"env": "unicycle", "train": {"nope": 1}},
                {"env": "pendulum"}, {"env": "unicycle", "max_verify_rounds": 0}, {"env": "unicycle", "model": "cnn"}):
        with pytest.raises(ContractError):
            PipelineConfig.from_dict(bad)


def test_metrics_roundtrip(tmp_path):
    m = {"pretrain": {"safe_set_size": 0.1 + 0.2, "safe_control_size": 1 / 3},
         "verify": {"safe_set_size": 0.0, "safe_control_size": 0.0}}
    write_metrics(m, tmp_path / "m.csv")
    assert read_metrics(tmp_path / "m.csv") == m
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "stage,safe_set_size,safe_control_size"


def _tiny_cfg(**kw):
    base = {"env": "double_integrator", "n_transitions": 2000, "attack_samples": 400, "attack_steps": 3,
            "max_finetune_rounds": 2, "max_verify_rounds": 1, "grid_metric_res": 21,
            "train": {"epochs": 2, "finetune_steps": 20, "policy_steps": 20, "policy_distill_steps": 20},
            "bnb": {"max_boxes": 200}}
    base.update(kw)
    return PipelineConfig.from_dict(base)


def test_positive_q_certifies_trivially(tmp_path):
    cfg = _tiny_cfg(train={"epochs": 0, "policy_steps": 5, "policy_distill_steps": 5})
    art = run_pipeline(cfg, q=constant_q(DI, 1.0), policy=zero_policy(DI))
    assert art.certified and art.provenance["finetune_rounds"] == 0
    assert all(v.stats["boxes"] == 1 for v in art.verdicts.values())
    assert art.metrics["verify"]["safe_set_size"] == 0.0
    run = art.save(tmp_path / "run", grid_res=11)
    assert not (run / "UNCERTIFIED").exists()
    assert json.loads((run / "verdicts.json").read_text())["label"] == "certified"
    out = art.export_certified(tmp_path / "export")
    assert np.array_equal(load_model(out / "certified_qnet.json").params()[0], art.q.params()[0])


def test_uncertified_artifact_is_marked(tmp_path):
    v = {"constraint_satisfaction": Verdict(Status.FALSIFIED), "forward_invariance": Verdict(Status.UNKNOWN)}
    art = CertifiedArtifact(constant_q(DI, -1.0), zero_policy(DI), v,
                            {"verify": {"safe_set_size": 0.0, "safe_control_size": 0.0}}, {}, _tiny_cfg())
    run = art.save(tmp_path / "run", grid_res=11)
    assert (run / "UNCERTIFIED").exists() and art.label == "uncertified"
    assert sorted(p.name for p in (run / "grids").iterdir()) == ["position_velocity.csv"]
    with pytest.raises(ContractError):
        art.export_certified(tmp_path / "nope")


def test_pipeline_is_reproducible(tmp_path):
    a = run_pipeline(_tiny_cfg(seed=5))
    b = run_pipeline(_tiny_cfg(seed=5))
    write_metrics(a.metrics, tmp_path / "a.csv")
    write_metrics(b.metrics, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert all(np.array_equal(p, r) for p, r in zip(a.q.params(), b.q.params()))
    assert set(a.metrics) == {"pretrain", "finetune", "verify"}
    if not a.certified:
        assert a.metrics["verify"] == {"safe_set_size": 0.0, "safe_control_size": 0.0}
