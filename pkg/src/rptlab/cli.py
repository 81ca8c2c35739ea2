"""Command-line entry point.

``rptlab <command> [--config FILE] [--seed N] [--out-dir DIR] [--format csv,json,svg,png]
[--parallelism N] [--<command>.<key>=<value> ...]``

Config files are INI with one section per command.  Exit codes: 0 success,
1 runtime failure, 2 invalid configuration (a JSON error record naming the
offending field is printed on stderr).
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

from . import experiments
from .errors import ConfigError, RptLabError
from .report import FORMATS, emit_report

ENV_OUT_DIR = "RPTLAB_OUT_DIR"
DEFAULT_OUT_DIR = "rptlab-out"


def _floats(text):
    return [float(x) for x in str(text).replace(",", " ").split()]


def _ints(text):
    return [int(x) for x in str(text).replace(",", " ").split()]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    t = str(text).strip().lower()
    return None if t in ("", "none", "off") else float(t)


def _opt_int(text):
    t = str(text).strip().lower()
    return None if t in ("", "none", "auto") else int(t)


TOY = {
    "vocab_size": (int, 16),
    "order": (int, 2),
    "coupling": (float, 0.9),
    "concentration": (float, 0.3),
    "context": (_opt_int, None),
    "window": (int, 3),
    "steps": (int, 20000),
    "s": (float, 0.5),
    "q": (float, 0.05),
    "seq_len": (int, 64),
    "lr": (float, 0.5),
    "reduction": (str, "sum"),
}
ANALYSIS = {
    "num_tokens": (int, 5000),
    "min_context": (int, 20),
    "temperature": (float, 1.0),
    "greedy_ptp": (_bool, True),
    "confidence": (_opt_float, 0.9),
}

SCHEMAS = {
    "synthetic": {
        "vocab_size": (int, 20),
        "trials": (int, 1000),
        "ratios": (_floats, [0.0, 0.5, 0.75]),
        "base_noises": (_floats, [0.01, 0.1, 1.0]),
    },
    "train-toy": {**TOY, "val_sequences": (int, 200), "baseline": (_bool, True)},
    "tv-table": {**TOY, **ANALYSIS, "ks": (_ints, [0, 1, 2, 3]), "couplings": (_floats, [0.9, 0.8])},
    "improve-hist": {**TOY, **ANALYSIS},
    "bounds": {
        "vocab_size": (int, 20),
        "trials": (int, 1000),
        "delta": (float, 1e-4),
        "deltas": (_floats, [1e-2, 1e-3, 1e-4]),
    },
    "sample": {
        **TOY,
        "temperature": (float, 1.0),
        "greedy_ptp": (_bool, False),
        "confidence": (_opt_float, None),
        "sample_window": (int, 2),
        "iterations": (float, 1.0),
        "samples": (int, 10),
        "prompt_length": (int, 8),
        "length": (int, 32),
        "model": (str, ""),
    },
}

POSITIVE = {"vocab_size", "trials", "steps", "seq_len", "num_tokens", "samples", "length", "val_sequences", "order"}
UNIT = {"coupling", "s", "q", "delta"}


def _check(command, params):
    for key in POSITIVE & params.keys():
        if params[key] < 1:
            raise ConfigError(f"{key} must be >= 1", f"{command}.{key}")
    for key in UNIT & params.keys():
        if not 0.0 <= params[key] <= 1.0:
            raise ConfigError(f"{key} must lie in [0, 1]", f"{command}.{key}")
    if params.get("reduction", "sum") not in ("sum", "mean"):
        raise ConfigError("reduction must be 'sum' or 'mean'", f"{command}.reduction")
    if command == "synthetic":
        for bn in params["base_noises"]:
            if not 0.0 < bn <= 1.0:
                raise ConfigError("base noises must lie in (0, 1]", "synthetic.base_noises")
        for r in params["ratios"]:
            if not 0.0 <= r <= 1.0:
                raise ConfigError("ratios must lie in [0, 1]", "synthetic.ratios")
    if "vocab_size" in params and command not in ("synthetic", "bounds"):
        root = int(round(params["vocab_size"] ** 0.5))
        if root * root != params["vocab_size"]:
            raise ConfigError("the coupled source needs a square vocabulary size", f"{command}.vocab_size")


def resolve(command, config_path=None, overrides=(), seed=None):
    """Merge defaults, config file and ``section.key=value`` overrides; returns ``(params, seed)``."""
    schema = SCHEMAS[command]
    raw = {}
    file_seed = None
    if config_path:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(config_path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", "config") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}", "config") from exc
        for section in parser.sections():
            if section not in SCHEMAS:
                raise ConfigError(f"unknown section [{section}]", section)
            for key, value in parser.items(section):
                if key != "seed" and key not in SCHEMAS[section]:
                    raise ConfigError(f"unknown key {key!r}", f"{section}.{key}")
            if section == command:
                raw.update(parser.items(section))
        file_seed = raw.pop("seed", None)
    for item in overrides:
        dotted, value = item
        section, _, key = dotted.partition(".")
        if section not in SCHEMAS or not key:
            raise ConfigError(f"override {dotted!r} must look like <command>.<key>", dotted)
        if key != "seed" and key not in SCHEMAS[section]:
            raise ConfigError(f"unknown key {key!r}", dotted)
        if section != command:
            raise ConfigError(f"override targets [{section}] but the command is {command}", dotted)
        if key == "seed":
            file_seed = value
        else:
            raw[key] = value
    params = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                params[key] = conv(raw[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {exc}", f"{command}.{key}") from exc
        else:
            params[key] = default
    if seed is None and file_seed is not None:
        try:
            seed = int(file_seed)
        except ValueError as exc:
            raise ConfigError("seed must be an integer", f"{command}.seed") from exc
    if seed is None:
        raise ConfigError("a seed is required (--seed or 'seed' in the config)", "seed")
    _check(command, params)
    return params, int(seed)


def _split_overrides(extra):
    out = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}", tok)
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            key = body
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"override {tok} needs a value", key) from None
        if "." not in key:
            raise ConfigError(f"unknown option {tok}", key)
        out.append((key, value))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rptlab", description="NTP vs RPT sampling experiments")
    parser.add_argument("command", choices=sorted(SCHEMAS))
    parser.add_argument("--config", help="INI file with one section per command")
    parser.add_argument("--seed", type=int, help="master seed (required here or in the config)")
    parser.add_argument("--out-dir", help=f"output directory (default ${ENV_OUT_DIR} or ./{DEFAULT_OUT_DIR})")
    parser.add_argument("--format", default="csv,json", help="comma list of " + ",".join(FORMATS))
    parser.add_argument("--parallelism", type=int, default=1, help="worker processes for the synthetic sweep")
    return parser


def _fail(code, record):
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        overrides = _split_overrides(extra)
        params, seed = resolve(args.command, args.config, overrides, args.seed)
        formats = [f.strip() for f in args.format.split(",") if f.strip()]
        bad = [f for f in formats if f not in FORMATS]
        if bad or not formats:
            raise ConfigError(f"formats must be drawn from {FORMATS}", "format")
        if args.parallelism < 1:
            raise ConfigError("parallelism must be >= 1", "parallelism")
    except ConfigError as exc:
        return _fail(2, {"error": "config", "field": exc.field, "message": str(exc)})

    out_dir = Path(args.out_dir or os.environ.get(ENV_OUT_DIR) or DEFAULT_OUT_DIR)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "synthetic":
            report = experiments.run_synthetic(params, seed, args.parallelism)
        elif args.command == "train-toy":
            report = experiments.run_train_toy(params, seed, out_dir)
        elif args.command == "sample" and params["model"]:
            from .toymodel import ToyModel

            report = experiments.run_sample(params, seed, model=ToyModel.load(params["model"]))
        else:
            report = experiments.RUNNERS[args.command](params, seed)
        written = emit_report(report, formats, out_dir)
    except (RptLabError, OSError, ValueError) as exc:
        return _fail(1, {"error": "runtime", "type": type(exc).__name__, "message": str(exc)})
    for path in written:
        print(path)
    if report.failures:
        return _fail(1, {"error": "runtime", "type": "TrialFailures", "failures": report.failures})
    return 0


if __name__ == "__main__":
    sys.exit(main())
