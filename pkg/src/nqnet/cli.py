"""Command-line entry point: ``nqnet <command> [options]``.

Commands
  gen-data   draw a dataset from a simulation model
  train      fit one quantile network and evaluate it against the truth
  replicate  repeat fits over seeds and methods, write the summary table
  drl        run fitted NQ iteration on the toy MDP against the DP oracle
  plot       render a fan table or a summary table as an SVG figure

Settings come from defaults, then ``--config FILE``, then command-line
flags (``--set key=value`` reaches any key). Exit codes: 0 success,
1 configuration or input-schema error, 2 training or runtime failure,
3 file-system error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from nqnet import config as cfgmod
from nqnet import drl, heads, plotting, seeding, simdata, trainer
from nqnet.config import ConfigError
from nqnet.losses import LossSpec

log = logging.getLogger("nqnet")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
FAN_POINTS = 201


# config plumbing -------------------------------------------------------------

def _prepare(args, command: str) -> tuple[dict, Path]:
    overrides = {k: v for k, v in vars(args).items() if k in cfgmod.SCHEMA}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    cfg = cfgmod.resolve(args.config, overrides)
    out = cfgmod.output_dir(cfg, command)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfgmod.dump(cfg, command))
    return cfg, out


def _single(cfg: dict, key: str) -> str:
    values = cfg[key]
    if len(values) != 1:
        raise ConfigError(f"{key}: this command takes exactly one value, got {', '.join(values)}")
    return values[0]


def _model(name: str) -> simdata.SimModel:
    try:
        return simdata.get_model(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _levels(cfg: dict) -> tuple:
    if cfg["levels"] is not None:
        levels = cfg["levels"]
    elif cfg["K"] is not None:
        levels = tuple(float(t) for t in heads.default_levels(cfg["K"]))
    else:
        levels = trainer.GRID_LEVELS
    try:
        return tuple(float(t) for t in heads.check_levels(levels))
    except ValueError as exc:
        raise ConfigError(f"levels: {exc}") from None


def train_config(cfg: dict, method: str = heads.NQ_ELU) -> trainer.TrainConfig:
    try:
        return trainer.TrainConfig(
            head_kind=method, levels=_levels(cfg), hidden=cfg["hidden"], trunk=cfg["trunk"],
            batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"] or 1000,
            patience=cfg["patience"] or 50, loss=LossSpec(cfg["loss"], cfg["kappa"]),
            lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def drl_settings(cfg: dict) -> tuple[drl.MDPSpec, drl.DRLConfig]:
    try:
        mdp = drl.MDPSpec(gamma=cfg["gamma"], reward_noise_df=cfg["reward_df"],
                          reward_noise_scale=cfg["reward_scale"], episode_length=cfg["episode_length"])
        dcfg = drl.DRLConfig(
            K=cfg["K"] or 32, hidden=cfg["hidden"] or (64, 64), epsilon=cfg["epsilon"],
            n_envs=cfg["n_envs"], batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"] or 300,
            patience=cfg["patience"] or 30, val_fraction=cfg["val_fraction"], lr=cfg["lr"],
            beta1=cfg["beta1"], beta2=cfg["beta2"], loss=LossSpec(cfg["loss"], cfg["kappa"]),
            warm_start=cfg["warm_start"], seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return mdp, dcfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


# commands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg, out = _prepare(args, "gen-data")
    model = _model(_single(cfg, "model"))
    n = cfg["N"] or 512
    if n < 1:
        raise ConfigError("N must be positive")
    data = simdata.sample(model, n, cfg["seed"])
    path = data.to_csv(out / "data.csv")
    _write_json(out / "data.json", {"model": model.model_id, "n": n, "seed": cfg["seed"],
                                    "input_dim": model.input_dim, "file": path.name})
    log.info("wrote %d rows to %s", n, path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _prepare(args, "train")
    model = _model(_single(cfg, "model"))
    tcfg = train_config(cfg, _single(cfg, "method"))
    n = cfg["N"] or 512
    try:
        predictor, history = trainer.train(model, n, tcfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report = trainer.evaluate(predictor, model, cfg["test_size"], cfg["seed"])
    log.info("stopped at epoch %d (best %d) in %.1fs; crossing fraction %.4f",
             history.stop_epoch, history.best_epoch, history.seconds, report.crossing_fraction)

    data = simdata.sample(model, n, cfg["seed"], seeding.DATA)
    data.to_csv(out / "data.csv")
    _write_json(out / "eval.json", report.to_dict())
    run = trainer.RunResult(model.model_id, tcfg.head_kind, n, 0, cfg["seed"], report)
    report.history = history
    (out / "train_log.jsonl").write_text(json.dumps(run.log_record(tcfg)) + "\n")
    if model.input_dim == 1:
        x = np.linspace(0.0, 1.0, FAN_POINTS)
        Q = predictor(x[:, None])
        plotting.write_fan_csv(out / "fit_curves.csv", x, tcfg.levels, Q)
        truth = model.quantiles(x[:, None], tcfg.levels)
        fig = plotting.fan_figure(x, tcfg.levels, Q, data=(data.X[:, 0], data.Y), truth=truth,
                                  title=f"{model.model_id}, {tcfg.head_kind}, N={n}")
        plotting.save(fig, out / "fan.svg")
    return EXIT_OK


def cmd_replicate(args) -> int:
    cfg, out = _prepare(args, "replicate")
    models = [_model(m).model_id for m in cfg["model"]]
    methods = list(cfg["method"])
    for m in methods:
        if m not in heads.HEAD_KINDS:
            raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(heads.HEAD_KINDS)}")
        train_config(cfg, m)
    tcfg = train_config(cfg)
    if cfg["R"] < 1 or cfg["workers"] < 1:
        raise ConfigError("R and workers must be at least 1")
    n = cfg["N"] or 512
    summary = trainer.replicate(models, methods, n, cfg["R"], cfg["seed"], tcfg,
                                T=cfg["test_size"], workers=cfg["workers"],
                                log_path=out / "runs.jsonl")
    summary.to_csv(out / "summary.csv")
    for model_id in models:
        tables = [f"{metric} error, {model_id}, N={n}, R={cfg['R']}\n{summary.to_table(model_id, metric)}"
                  for metric in ("l1", "l2sq")]
        (out / f"table_{model_id}.txt").write_text("\n\n".join(tables) + "\n")
        plotting.save(plotting.errors_figure(summary.rows, model_id), out / f"errors_{model_id}.svg")
    if summary.failures:
        log.error("%d of %d runs failed; summary covers completed runs only",
                  summary.failures, len(summary.runs))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_drl(args) -> int:
    cfg, out = _prepare(args, "drl")
    mdp, dcfg = drl_settings(cfg)
    if cfg["M"] < 0 or (cfg["N"] or 2000) < 1:
        raise ConfigError("M must be non-negative and N positive")
    oracle = drl.dp_oracle(mdp, cfg["grid_resolution"])
    # a FitFailure propagates to main() and becomes exit code 2
    result = drl.run_algorithm1(mdp, cfg["M"], cfg["N"] or 2000, dcfg.K, dcfg, oracle=oracle,
                                log_path=out / "diagnostics.jsonl")
    drl.write_policy_csv(out / "policy.csv", result.iterate)
    summary = {"iterations": cfg["M"], "agreement": drl.policy_agreement(result.policy, oracle),
               "oracle_J": oracle.J}
    if cfg["rollouts"] > 0:
        J, se = drl.monte_carlo_return(result.policy, mdp, cfg["rollouts"],
                                       seeding.derive(cfg["seed"], seeding.ROLLOUT))
        summary.update(J=J, J_se=se, relative_gap=abs(J - oracle.J) / abs(oracle.J))
    _write_json(out / "result.json", summary)
    fig = plotting.policy_figure(drl.EVAL_GRID, result.iterate.q_values(drl.EVAL_GRID),
                                 oracle.action_at(drl.EVAL_GRID))
    plotting.save(fig, out / "policy.svg")
    log.info("agreement with oracle %.3f", summary["agreement"])
    return EXIT_OK


def cmd_plot(args) -> int:
    src = Path(args.input)
    if not src.is_file():
        raise FileNotFoundError(f"no such file: {src}")
    dest = Path(args.output) if args.output else src.with_suffix(".svg")
    if args.kind == "fan":
        x, taus, Q, truth = plotting.read_fan_csv(src)
        data = None
        if args.data:
            X, Y = simdata.read_dataset_csv(args.data)
            data = (X[:, 0], Y)
        fig = plotting.fan_figure(x, taus, Q, data=data, truth=truth)
    else:
        rows = plotting.read_summary_csv(src)
        model = args.plot_model or rows[0]["model"]
        fig = plotting.errors_figure(rows, model)
    plotting.save(fig, dest)
    log.info("wrote %s", dest)
    return EXIT_OK


# argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", dest="out_dir", default=argparse.SUPPRESS,
                        help=f"output directory (default ${cfgmod.ENV_OUT_DIR}/<command>)")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    def opt(p, flag, key, **kw):
        p.add_argument(flag, dest=key, default=argparse.SUPPRESS, **kw)

    parser = argparse.ArgumentParser(
        prog="nqnet", description="Non-crossing quantile networks: simulation, training, replication, DRL.",
        epilog="config keys:\n" + cfgmod.describe(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="draw a dataset")
    opt(p, "--model", "model", help="model id")
    opt(p, "--n", "N", help="number of rows")
    p.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("train", cmd_train, "fit and evaluate one network"),
                              ("replicate", cmd_replicate, "replicated comparison table")):
        p = sub.add_parser(name, parents=[common], help=help_)
        opt(p, "--model", "model", help="model id(s), comma separated")
        opt(p, "--method", "method", help="head kind(s), comma separated")
        opt(p, "--n", "N", help="training size")
        opt(p, "--K", "K", help="use levels k/(K+1)")
        opt(p, "--levels", "levels", help="explicit level grid, comma separated")
        opt(p, "--max-epochs", "max_epochs")
        opt(p, "--patience", "patience")
        opt(p, "--test-size", "test_size")
        if name == "replicate":
            opt(p, "--R", "R", help="replicates per cell")
        p.set_defaults(func=func)

    p = sub.add_parser("drl", parents=[common], help="fitted NQ iteration on the toy MDP")
    opt(p, "--M", "M", help="iterations")
    opt(p, "--n", "N", help="transitions per iteration")
    opt(p, "--K", "K", help="quantiles per action")
    opt(p, "--reward-df", "reward_df", help="Student-t df of reward noise, or none")
    opt(p, "--epsilon", "epsilon")
    opt(p, "--max-epochs", "max_epochs")
    opt(p, "--rollouts", "rollouts")
    p.set_defaults(func=cmd_drl)

    p = sub.add_parser("plot", help="render a CSV table as an SVG figure")
    p.add_argument("input", help="fan table (x, q_<tau>...) or replication summary CSV")
    p.add_argument("--kind", choices=("fan", "errors"), default="fan")
    p.add_argument("--output", help="destination SVG (default: input with .svg suffix)")
    p.add_argument("--data", help="dataset CSV to scatter under a fan")
    p.add_argument("--model", dest="plot_model", help="model to draw from a summary table")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, plotting.SchemaError) as exc:
        print(f"nqnet: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (trainer.TrainingDiverged, FloatingPointError, RuntimeError) as exc:
        print(f"nqnet: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"nqnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
