import json
from pathlib import Path

import pytest

from hjcert import cli, envs
from hjcert.net import save_model
from hjcert.verifier.lp import parse_lp
from hjcert.verifier.tasks import Status

from conftest import constant_q, zero_policy

DI = envs.make_env("double_integrator")

TINY = {"n_transitions": 2000, "attack_samples": 400, "attack_steps": 3, "max_finetune_rounds": 2,
        "max_verify_rounds": 1, "grid_metric_res": 21,
        "train": {"epochs": 2, "finetune_steps": 20, "policy_steps": 20, "policy_distill_steps": 20},
        "bnb": {"max_boxes": 200}}


def _model_dir(path, q, policy, env=DI):
    path.mkdir(parents=True, exist_ok=True)
    save_model(q, path / "qnet.json")
    save_model(policy, path / "policy.json")
    (path / "config.json").write_text(json.dumps({"env": env.name.value}))
    return path


def _run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out.strip().splitlines()[-1] if out.out.strip() else None, out.err


def test_certify_trivially_safe_model(tmp_path, capsys):
    model = _model_dir(tmp_path / "m", constant_q(DI, 1.0), zero_policy(DI))
    code, run, _ = _run(["certify", "--model", str(model), "--out", str(tmp_path / "runs")], capsys)
    assert code == cli.EXIT_OK
    v = json.loads((tmp_path / "runs" / run.split("/")[-1] / "verdicts.json").read_text())
    assert v["label"] == "certified"
    assert v["constraint_satisfaction"]["status"] == v["forward_invariance"]["status"] == "certified"


def test_certify_violating_model_exits_falsified(tmp_path, capsys):
    model = _model_dir(tmp_path / "m", constant_q(DI, -1.0), zero_policy(DI))
    code, run, _ = _run(["certify", "--model", str(model), "--out", str(tmp_path / "runs"), "--seed", "2"], capsys)
    assert code == cli.EXIT_FALSIFIED
    v = json.loads((Path(run) / "verdicts.json").read_text())
    cex = v["constraint_satisfaction"]["counterexample"]
    assert cex["q"] < 0 and envs.constraint(DI, cex["x"]) > 0


def test_status_codes():
    assert cli._status_code([Status.CERTIFIED, Status.CERTIFIED]) == cli.EXIT_OK
    assert cli._status_code([Status.CERTIFIED, Status.UNKNOWN]) == cli.EXIT_UNKNOWN
    assert cli._status_code([Status.UNKNOWN, Status.FALSIFIED]) == cli.EXIT_FALSIFIED
    assert (cli.EXIT_OK, cli.EXIT_CONTRACT, cli.EXIT_FALSIFIED, cli.EXIT_UNKNOWN) == (0, 1, 2, 3)


@pytest.mark.parametrize("argv", [
    ["certify", "--env", "double_integrator"],                     # no --model
    ["certify", "--env", "pendulum", "--model", "x"],              # bad choice
    ["pipeline", "--bogus"],                                       # unknown flag
    ["pipeline", "--env", "double_integrator", "--rounds", "0"],  # invalid config value
    ["oracle", "--env", "robot_arm"],                              # oracle limited to 3-D
    ["frobnicate"],
])
def test_contract_errors_exit_1(argv, tmp_path, capsys):
    code = cli.main(argv + ["--out", str(tmp_path)] if argv[0] != "frobnicate" else argv)
    err = capsys.readouterr().err
    assert code == cli.EXIT_CONTRACT and "error" in err
    assert not any(p.is_dir() for p in tmp_path.iterdir())


def test_bad_config_file_exits_1(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert cli.main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "r")]) == cli.EXIT_CONTRACT
    cfg.write_text(json.dumps({"env": "unicycle", "learning_rate": 1}))
    assert cli.main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "r")]) == cli.EXIT_CONTRACT


def test_bad_thread_env_exits_1(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("HJC_THREADS", "many")
    assert cli.main(["oracle", "--env", "double_integrator", "--out", str(tmp_path)]) == cli.EXIT_CONTRACT


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"env": "unicycle", "seed": 1, "bnb": {"max_boxes": 9, "batch_size": 4}}))
    args = cli.build_parser().parse_args(["pipeline", "--config", str(cfg), "--env", "double_integrator",
                                          "--seed", "4", "--max-boxes", "77", "--rounds", "3", "--res", "51"])
    c = cli.load_config(args)
    assert c.env == DI and c.seed == 4 and c.max_finetune_rounds == 3 and c.grid_metric_res == 51
    assert c.bnb.max_boxes == 77 and c.bnb.batch_size == 4


def test_run_directories_and_latest_pointer(tmp_path):
    a = cli.make_run_dir(tmp_path, "unicycle", "eval", 3)
    b = cli.make_run_dir(tmp_path, "unicycle", "eval", 3)
    assert a != b and a.name.startswith("unicycle-eval-3-") and b.name.startswith(a.name)
    assert (tmp_path / "latest").read_text().strip() == b.name


def test_pipeline_metrics_are_byte_identical(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    outs = []
    for k in range(2):
        code, run, _ = _run(["pipeline", "--config", str(cfg), "--env", "double_integrator", "--seed", "7",
                             "--out", str(tmp_path / f"r{k}")], capsys)
        assert code in (cli.EXIT_OK, cli.EXIT_FALSIFIED, cli.EXIT_UNKNOWN)
        outs.append(run)
    a, b = Path(outs[0]), Path(outs[1])
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "qnet.json").read_bytes() == (b / "qnet.json").read_bytes()
    for name in ("config.json", "run_config.json", "verdicts.json", "policy.json", "grids/position_velocity.csv"):
        assert (a / name).exists()


def test_model_commands_write_outputs(tmp_path, capsys):
    q, pi = constant_q(DI, -1.0), zero_policy(DI)
    model = _model_dir(tmp_path / "m", q, pi)
    before = (model / "qnet.json").read_bytes()
    out = str(tmp_path / "runs")

    code, run, _ = _run(["attack", "--model", str(model), "--out", out], capsys)
    cex = json.loads((Path(run) / "counterexamples.json").read_text())
    assert code == cli.EXIT_FALSIFIED and cex["constraint_satisfaction"] is not None

    code, run, _ = _run(["export-miqcp", "--model", str(model), "--out", out], capsys)
    lp = parse_lp((Path(run) / "constraint_satisfaction.lp").read_text())
    assert code == 0 and len(lp.row("qdef").quadratic) == 8

    code, run, _ = _run(["eval", "--model", str(model), "--out", out, "--res", "21", "--samples", "5000"], capsys)
    ev = json.loads((Path(run) / "eval.json").read_text())
    assert code == 0 and ev["safe_set_size"] == 1.0 and ev["audit"]["con"] > 0

    safe = _model_dir(tmp_path / "s", constant_q(DI, -1.0), zero_policy(DI))
    code, run, _ = _run(["rollout", "--model", str(safe), "--out", out, "--n", "5", "--steps", "20",
                         "--unfiltered", "--trajectory"], capsys)
    ro = json.loads((Path(run) / "rollout.json").read_text())
    assert code == 0 and ro["filtered"]["rollouts"] == 5 and ro["filtered"]["interventions"] == 0
    assert (Path(run) / "trajectory.csv").read_text().startswith("t,x0,x1,u0,q,h,intervened")
    assert (model / "qnet.json").read_bytes() == before


def test_oracle_command(tmp_path, capsys):
    code, run, _ = _run(["oracle", "--env", "double_integrator", "--res", "21", "--control-res", "5",
                         "--out", str(tmp_path)], capsys)
    meta = json.loads((Path(run) / "oracle.json").read_text())
    lines = (Path(run) / "oracle.csv").read_text().splitlines()
    assert code == 0 and lines[0] == "x0,x1,h,V" and len(lines) == 21 ** 2 + 1
    assert 0 < meta["safe_fraction"] < 1


def test_training_commands_chain(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", str(cfg), "--env", "double_integrator", "--out", str(tmp_path / "runs")]
    code, run, _ = _run(["pretrain"] + base, capsys)
    assert code == 0 and (Path(run) / "qnet.json").exists()
    code, run2, _ = _run(["finetune", "--model", run] + base, capsys)
    assert code == 0 and (Path(run2) / "policy.json").exists()
    code, run3, _ = _run(["train-policy", "--model", run2] + base, capsys)
    assert code == 0 and (Path(run3) / "policy.json").exists()
