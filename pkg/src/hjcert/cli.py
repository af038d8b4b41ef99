"""Command-line entry point: ``hjcert <command> [flags]``.

Exit codes: 0 success, 1 contract or config error, 2 a verification or
attack found a counterexample, 3 verification returned Unknown.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import envs
from .bounds import qnet_bounds
from .errors import ContractError, ConvergenceError, DivergenceError
from .filter import FilterPolicy, rollout_batch, sample_safe_pairs
from .net import load_model, save_model
from .pipeline import (CertifiedArtifact, PipelineConfig, audit_certificate, find_counterexamples, init_models,
                       metric_res, run_pipeline, stage_metrics, write_metrics)
from .training import (CounterexampleSet, TrainLog, collect_transitions, fine_control_grid, finetune_round, pretrain,
                       revalidate, train_policy)
from .verifier.attack import attack
from .verifier.bnb import certify
from .verifier.lp import export_miqcp
from .verifier.oracle import value_iteration_oracle
from .verifier.tasks import Status, TaskKind, VerifyTask

EXIT_OK, EXIT_CONTRACT, EXIT_FALSIFIED, EXIT_UNKNOWN = 0, 1, 2, 3
COMMANDS = ("pretrain", "finetune", "train-policy", "attack", "certify", "export-miqcp", "pipeline", "eval",
            "rollout", "oracle")
# commands reading networks from --model
MODEL_COMMANDS = {"finetune", "train-policy", "attack", "certify", "export-miqcp", "eval", "rollout"}

log = logging.getLogger("hjcert")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags, which would read as "Falsified"
    def error(self, message):
        raise ContractError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON; flags override its fields")
    common.add_argument("--env", choices=[e.value for e in envs.EnvName])
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS threads (default: HJC_THREADS or all cores)")
    common.add_argument("--out", default="runs", help="parent directory of run directories")
    common.add_argument("--max-boxes", type=int, dest="max_boxes")
    common.add_argument("--rounds", type=int)
    common.add_argument("--res", type=int)
    common.add_argument("--model", help="directory holding qnet.json and policy.json")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="hjcert", description="Certified neural HJ reachability safety filters.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "rollout":
            sp.add_argument("--n", type=int, default=1000, help="number of rollouts")
            sp.add_argument("--steps", type=int, default=500)
            sp.add_argument("--samples", type=int, default=64, help="projection samples of the filter")
            sp.add_argument("--unfiltered", action="store_true", help="also run the unfiltered contrast")
            sp.add_argument("--trajectory", action="store_true", help="store the first rollout as CSV")
        if name == "eval":
            sp.add_argument("--samples", type=int, default=0, help="random pairs for the certificate audit")
        if name == "oracle":
            sp.add_argument("--control-res", type=int, default=17, dest="control_res")
    return p


def load_config(args) -> PipelineConfig:
    """Config file plus flag overrides, validated before any side effect."""
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ContractError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(d, dict):
            raise ContractError("config must be a JSON object")
    if args.model and "env" not in d and not args.env:
        cfg_file = Path(args.model) / "config.json"
        if cfg_file.exists():
            d["env"] = json.loads(cfg_file.read_text())["env"]
    if args.env:
        d["env"] = args.env
    if args.seed is not None:
        d["seed"] = args.seed
    if args.res is not None:
        d["grid_metric_res"] = args.res
    if args.rounds is not None:
        d["max_finetune_rounds"] = args.rounds
    if args.max_boxes is not None:
        d["bnb"] = {**d.get("bnb", {}), "max_boxes": args.max_boxes}
    return PipelineConfig.from_dict(d)


def load_models(args, env: envs.EnvSpec):
    if not args.model:
        raise ContractError("this command needs --model DIR")
    root = Path(args.model)
    try:
        q, policy = load_model(root / "qnet.json"), load_model(root / "policy.json")
    except OSError as e:
        raise ContractError(f"cannot load models from {root}: {e}") from None
    if (q.state_dim, q.control_dim) != (env.state_dim, env.control_dim):
        raise ContractError(f"model dimensions do not match env {env.name.value}")
    return q, policy


def make_run_dir(out, env: str, command: str, seed: int) -> Path:
    """Fresh ``<env>-<command>-<seed>-<timestamp>`` directory plus a ``latest`` pointer file."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = f"{env}-{command}-{seed}-{time.strftime('%Y%m%dT%H%M%S')}"
    run, k = out / base, 1
    while run.exists():
        run, k = out / f"{base}.{k}", k + 1
    run.mkdir()
    (out / "latest").write_text(run.name + "\n")
    return run


def _status_code(statuses) -> int:
    statuses = list(statuses)
    if Status.FALSIFIED in statuses:
        return EXIT_FALSIFIED
    if Status.UNKNOWN in statuses:
        return EXIT_UNKNOWN
    return EXIT_OK


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _save_models(run, q, policy):
    save_model(q, run / "qnet.json")
    save_model(policy, run / "policy.json")


# ---------------------------------------------------------------- commands


def cmd_pretrain(args, cfg, run):
    env, tc = cfg.env, cfg.train
    rng = np.random.default_rng(cfg.seed)
    q, policy = init_models(cfg, rng)
    data = collect_transitions(env, None, cfg.n_transitions, cfg.seed)
    train_log = TrainLog()
    q, _ = pretrain(q, policy, data, replace(tc, seed=cfg.seed), env, log_to=train_log)
    train_policy(policy, q, data.x, tc, seed=cfg.seed, grid=fine_control_grid(env))
    _save_models(run, q, policy)
    train_log.to_csv(run / "train_log.csv")
    write_metrics({"pretrain": stage_metrics(q, policy, env, metric_res(env, cfg.grid_metric_res))},
                  run / "metrics.csv")
    return EXIT_OK


def cmd_finetune(args, cfg, run):
    env, tc = cfg.env, cfg.train
    q, policy = load_models(args, env)
    rng = np.random.default_rng(cfg.seed)
    data = collect_transitions(env, None, cfg.n_transitions, cfg.seed)
    cex = CounterexampleSet.empty(env.state_dim, env.control_dim)
    train_log = TrainLog()
    rounds = 0
    for r in range(cfg.max_finetune_rounds):
        found = find_counterexamples(q, policy, env, rng, cfg.attack_samples, cfg.attack_steps,
                                     cfg.attack_margin, cfg.max_cex // 10)
        if len(found) == 0:
            break
        cex = revalidate(q, policy, env, cex, margin=tc.repair_margin)
        cex.extend(found, cap=cfg.max_cex)
        q, policy, _ = finetune_round(q, policy, cex, data, tc, env, train_log, seed=cfg.seed * 7919 + r,
                                      step0=r * tc.finetune_steps, round_index=r)
        rounds += 1
    _save_models(run, q, policy)
    train_log.to_csv(run / "train_log.csv")
    _write_json(run / "finetune.json", {"rounds": rounds, "n_cex": len(cex)})
    return EXIT_OK


def cmd_train_policy(args, cfg, run):
    env = cfg.env
    q, policy = load_models(args, env)
    data = collect_transitions(env, None, cfg.n_transitions, cfg.seed)
    train_policy(policy, q, np.concatenate([data.x, data.x_next]), cfg.train, seed=cfg.seed,
                 grid=fine_control_grid(env))
    _save_models(run, q, policy)
    return EXIT_OK


def cmd_attack(args, cfg, run):
    q, policy = load_models(args, cfg.env)
    out, code = {}, EXIT_OK
    for kind in (TaskKind.CON, TaskKind.INV):
        hit = attack(VerifyTask(kind, q, cfg.env, policy), cfg.bnb, cfg.seed)
        out[kind.value] = None if hit is None else hit.to_dict()
        if hit is not None:
            code = EXIT_FALSIFIED
    _write_json(run / "counterexamples.json", out)
    return code


def cmd_certify(args, cfg, run):
    q, policy = load_models(args, cfg.env)
    verdicts = {}
    for kind in (TaskKind.CON, TaskKind.INV):
        verdicts[kind.value] = certify(VerifyTask(kind, q, cfg.env, policy), cfg.bnb, cfg.seed)
        log.info("%s: %s %s", kind.value, verdicts[kind.value].status.value, verdicts[kind.value].stats)
    art = CertifiedArtifact(q, policy, verdicts, {}, {}, cfg)
    _write_json(run / "verdicts.json", art.verdicts_json())
    return _status_code(v.status for v in verdicts.values())


def cmd_export_miqcp(args, cfg, run):
    q, policy = load_models(args, cfg.env)
    task = VerifyTask(TaskKind.CON, q, cfg.env, policy)
    bounds = qnet_bounds(q, cfg.env.state_box, cfg.env.control_box)
    export_miqcp(task, bounds, run / "constraint_satisfaction.lp")
    return EXIT_OK


def cmd_pipeline(args, cfg, run):
    art = run_pipeline(cfg, progress=log.info)
    art.save(run, grid_res=metric_res(cfg.env, cfg.grid_metric_res))
    return _status_code(v.status for v in art.verdicts.values())


def cmd_eval(args, cfg, run):
    env = cfg.env
    q, policy = load_models(args, env)
    out = stage_metrics(q, policy, env, metric_res(env, cfg.grid_metric_res))
    if args.samples > 0:
        out["audit"] = audit_certificate(q, policy, env, args.samples, cfg.seed)
    _write_json(run / "eval.json", out)
    return EXIT_OK


def cmd_rollout(args, cfg, run):
    env = cfg.env
    q, policy = load_models(args, env)
    fp = FilterPolicy(q, policy, args.samples)
    x0, u0 = sample_safe_pairs(q, env, args.n, cfg.seed)
    seeds = [cfg.seed * 100_003 + i for i in range(args.n)]
    out = {}
    for filtered in (True, False) if args.unfiltered else (True,):
        reps = rollout_batch(fp, env, x0, u0, seeds, args.steps, filtered=filtered,
                             store=args.trajectory and filtered)
        if args.trajectory and filtered:
            reps[0].write_trajectory_csv(run / "trajectory.csv")
        out["filtered" if filtered else "unfiltered"] = {
            "rollouts": len(reps), "steps": args.steps,
            "violations": sum(r.violations for r in reps),
            "interventions": sum(r.interventions for r in reps),
            "flagged": sum(r.flagged for r in reps),
            "per_rollout": [r.to_dict() for r in reps]}
    _write_json(run / "rollout.json", out)
    return EXIT_OK


def cmd_oracle(args, cfg, run):
    env = cfg.env
    res = args.res if args.res is not None else 101
    grid = value_iteration_oracle(env, res, args.control_res)
    states = grid.states
    with open(run / "oracle.csv", "w") as f:
        f.write(",".join([f"x{i}" for i in range(env.state_dim)] + ["h", "V"]) + "\n")
        for row, h, v in zip(states, grid.h, grid.V):
            f.write(",".join(repr(float(a)) for a in (*row, h, v)) + "\n")
    _write_json(run / "oracle.json", {"state_res": res, "control_res": args.control_res, "sweeps": grid.sweeps,
                                      "safe_fraction": float(np.mean(grid.safe))})
    return EXIT_OK


HANDLERS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "train-policy": cmd_train_policy,
            "attack": cmd_attack, "certify": cmd_certify, "export-miqcp": cmd_export_miqcp,
            "pipeline": cmd_pipeline, "eval": cmd_eval, "rollout": cmd_rollout, "oracle": cmd_oracle}


def _threads(args) -> int | None:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("HJC_THREADS"):
        try:
            n = int(os.environ["HJC_THREADS"])
        except ValueError:
            raise ContractError("HJC_THREADS must be an integer") from None
    else:
        return None
    if n < 1:
        raise ContractError("thread count must be >= 1")
    return n


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
        threads = _threads(args)
        cfg = load_config(args)
        if args.command in MODEL_COMMANDS:
            load_models(args, cfg.env)
        if args.command == "oracle" and cfg.env.state_dim > 3:
            raise ContractError("the value iteration oracle supports at most 3 state dimensions")
        run = make_run_dir(args.out, cfg.env.name.value, args.command, cfg.seed)
        _write_json(run / "run_config.json", {"command": args.command, "config": cfg.to_dict(),
                                              "model": args.model})
        with threadpool_limits(limits=threads):
            code = HANDLERS[args.command](args, cfg, run)
        print(run)
        return code
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ConvergenceError, DivergenceError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
