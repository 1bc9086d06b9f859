"""Flat ``key = value`` run configuration.

A config file is a plain list of ``key = value`` lines (``#`` starts a
comment). Keys are fixed by ``SCHEMA``; anything else is an error. Values
given on the command line override the file, which overrides the defaults
below. A default of ``None`` means "pick the command's own default".
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

SECTION = "run"
ENV_OUT_DIR = "NQNET_OUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: str  # str, int, float, bool, optfloat, strs, ints, floats
    default: object
    help: str


SCHEMA = {
    # data and models
    "model": Key("strs", ("WAVE",), "simulation model id (comma list for replicate)"),
    "method": Key("strs", ("NQ_ELU",), "head kind (comma list for replicate)"),
    "N": Key("int", None, "training size; transitions per iteration for drl (default 512 / 2000)"),
    "R": Key("int", 10, "replicates per (model, method) cell"),
    "K": Key("int", None, "number of levels k/(K+1); default: 0.05..0.95 grid, 32 for drl"),
    "levels": Key("floats", None, "explicit increasing level grid; overrides K"),
    "seed": Key("int", 0, "base seed for every random stream"),
    "test_size": Key("int", 100_000, "test points per evaluation (T)"),
    # network and optimiser
    "hidden": Key("ints", None, "hidden widths; default 128x3 (1-D), 256x3 (multi-D), 64x2 (drl)"),
    "trunk": Key("str", None, "shared, or parallel mean/gaps nets (default: parallel for NQ heads)"),
    "batch_size": Key("int", 128, "minibatch size"),
    "max_epochs": Key("int", None, "epoch cap (default 1000, drl 300)"),
    "patience": Key("int", None, "early-stopping patience (default 50, drl 30)"),
    "lr": Key("float", 1e-3, "Adam step size"),
    "beta1": Key("float", 0.9, "Adam first-moment decay"),
    "beta2": Key("float", 0.99, "Adam second-moment decay"),
    "loss": Key("str", "CHECK", "CHECK or QHUBER"),
    "kappa": Key("float", 1.0, "quantile-Huber width"),
    # reinforcement learning
    "M": Key("int", 20, "fitted iterations"),
    "epsilon": Key("float", 0.2, "exploration probability"),
    "gamma": Key("float", 0.9, "discount"),
    "reward_df": Key("optfloat", 10.0, "Student-t reward noise df, or none"),
    "reward_scale": Key("float", 0.3, "reward noise scale"),
    "episode_length": Key("int", 10, "steps before an episode restarts"),
    "n_envs": Key("int", 50, "parallel environments during collection"),
    "val_fraction": Key("float", 0.2, "held-out share of each iteration's transitions"),
    "warm_start": Key("bool", False, "start each fit from the previous network"),
    "grid_resolution": Key("int", 2001, "value-iteration grid size for the oracle"),
    "rollouts": Key("int", 10_000, "Monte-Carlo rollouts for the policy value"),
    # execution
    "workers": Key("int", 1, "parallel worker processes"),
    "out_dir": Key("str", None, "output directory (default $NQNET_OUT_DIR/<command>)"),
}

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def parse_value(key: str, text) -> object:
    """Convert a string to the schema type of ``key``."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(SCHEMA)}")
    kind = SCHEMA[key].kind
    if not isinstance(text, str):
        return text
    s = text.strip()
    if s.lower() == "none" and (SCHEMA[key].default is None or kind == "optfloat"):
        return None
    try:
        if kind == "str":
            return s
        if kind == "int":
            return int(s)
        if kind in ("float", "optfloat"):
            return float(s)
        if kind == "bool":
            return _BOOL[s.lower()]
        items = [p.strip() for p in s.split(",") if p.strip()]
        if not items:
            raise ConfigError(f"{key}: empty list")
        conv = {"strs": str, "ints": int, "floats": float}[kind]
        return tuple(conv(p) for p in items)
    except (ValueError, KeyError):
        raise ConfigError(f"{key}: cannot read {text!r} as {kind}") from None


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def read_file(path) -> dict:
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case sensitive (N, R, K, M)
    try:
        parser.read_string(f"[{SECTION}]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if parser.sections() != [SECTION]:
        raise ConfigError(f"{path}: section headers are not allowed")
    return {k: parse_value(k, v) for k, v in parser.items(SECTION)}


def resolve(file_path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then explicit overrides."""
    cfg = {k: spec.default for k, spec in SCHEMA.items()}
    if file_path is not None:
        cfg.update(read_file(file_path))
    for k, v in (overrides or {}).items():
        cfg[k] = parse_value(k, v)
    return cfg


def output_dir(cfg: dict, command: str) -> Path:
    if cfg.get("out_dir"):
        return Path(cfg["out_dir"])
    return Path(os.environ.get(ENV_OUT_DIR) or "nqnet_out") / command


def dump(cfg: dict, command: str) -> str:
    lines = [f"# effective configuration for '{command}'"]
    lines += [f"{k} = {format_value(cfg[k])}" for k in SCHEMA]
    return "\n".join(lines) + "\n"


def describe() -> str:
    """Help text listing every key with its default."""
    width = max(map(len, SCHEMA))
    return "\n".join(f"  {k:<{width}}  {s.help} [default: {format_value(s.default)}]"
                     for k, s in SCHEMA.items())
