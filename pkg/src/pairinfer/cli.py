"""Command-line interface.

Commands: fit, infer, leaderboard, simulate, mc.  Options come from an INI
config file (sections [data], [fit], [infer], [simulate]) and are
overridden by command-line flags.  Exit codes: 0 success, 2 parse or
configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import sys
from dataclasses import fields

import numpy as np

from .arena import (
    LEADERBOARD_HEADER,
    IngestError,
    PersistedModel,
    UnknownNameError,
    fit_model,
    ingest,
    leaderboard,
    parse_named_target,
    run_inference,
    write_battle_log,
)
from .fitting import ConvergenceError, FitConfig
from .inference import FoldFitError
from .information import IllConditionedInformationError
from .model import ExtremeLogitError, OverlapError, sample_battles
from .simlab import SimConfig, export_diagnostics, mc_summary, replication_rng, run_study, save_study, study_truth

log = logging.getLogger("pairinfer")

EXIT_OK, EXIT_PARSE, EXIT_NUMERIC = 0, 2, 3
REPORT_VERSION = "1.0"

# option name -> (section, type, default)
OPTIONS = {
    "data": ("data", str, None),
    "top_k": ("data", int, None),
    "tie_policy": ("data", str, "drop"),
    "category_map": ("data", str, None),
    "rank": ("fit", int, 3),
    "clip_bound": ("fit", float, 7.0),
    "altmin_rounds": ("fit", int, 3),
    "folds": ("fit", int, 6),
    "seed": ("fit", int, 0),
    "output": ("fit", str, None),
    "model": ("infer", str, None),
    "target": ("infer", str, None),
    "method": ("infer", str, "efficient"),
    "level": ("infer", float, 0.95),
    "report": ("infer", str, None),
}


class ConfigError(ValueError):
    pass


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return cp


def resolve(args, cp: configparser.ConfigParser, names) -> dict:
    """Flag value if given, else config value, else default."""
    out = {}
    for name in names:
        section, typ, default = OPTIONS[name]
        val = getattr(args, name, None)
        if val is None and cp.has_option(section, name):
            raw = cp.get(section, name)
            try:
                val = typ(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {name}: cannot parse {raw!r}") from exc
        out[name] = default if val is None else val
    return out


def echo_config(opts: dict) -> str:
    """Resolved options as INI text; parses back to the same values."""
    cp = configparser.ConfigParser()
    for name, val in opts.items():
        if val is None or name not in OPTIONS:
            continue
        section = OPTIONS[name][0]
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, str(val))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _require(opts, *names):
    for n in names:
        if opts.get(n) is None:
            raise ConfigError(f"missing required option {n!r}")


def _category_map(path):
    if path is None:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            mapping = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read category map {path}: {exc}") from exc
    if not isinstance(mapping, dict):
        raise ConfigError("category map must be a JSON object")
    return mapping


def _fit_config(opts) -> FitConfig:
    return FitConfig(rank=opts["rank"], clip_bound=opts["clip_bound"], altmin_rounds=opts["altmin_rounds"])


def _emit_config(args, opts):
    text = echo_config(opts)
    if args.echo_config:
        with open(args.echo_config, "w", encoding="utf-8") as fh:
            fh.write(text)
    log.info("effective configuration:\n%s", text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(args, cp) -> int:
    opts = resolve(args, cp, ["data", "top_k", "tie_policy", "category_map", "rank", "clip_bound",
                              "altmin_rounds", "folds", "seed", "output"])
    _require(opts, "data", "output")
    _emit_config(args, opts)
    data = ingest(opts["data"], opts["top_k"], _category_map(opts["category_map"]), opts["tie_policy"])
    model = fit_model(data, _fit_config(opts), opts["seed"], {"tie_policy": opts["tie_policy"]})
    model.save(opts["output"])
    print(f"fitted rank-{model.rank} model on {data.records} records "
          f"({len(data.model_names)} models, {len(data.category_names)} categories) -> {opts['output']}")
    return EXIT_OK


def _model_and_data(opts):
    model = PersistedModel.load(opts["model"])
    data = ingest(opts["data"], None, _category_map(opts["category_map"]), model.metadata.get("tie_policy", "drop"),
                  model_names=model.model_names, category_names=model.category_names)
    cfg = FitConfig(rank=model.rank, clip_bound=float(model.metadata.get("clip_bound", 7.0)),
                    altmin_rounds=int(model.metadata.get("altmin_rounds", 3)))
    return model, data, cfg


def cmd_infer(args, cp) -> int:
    opts = resolve(args, cp, ["model", "data", "category_map", "target", "method", "folds", "seed", "level", "report"])
    _require(opts, "model", "data", "target")
    if opts["method"] not in ("efficient", "whitened", "ipw", "naive"):
        raise ConfigError(f"unknown method {opts['method']!r}")
    _emit_config(args, opts)
    _, data, cfg = _model_and_data(opts)
    spec = parse_named_target(opts["target"], data)
    rep = run_inference(data, spec, opts["method"], cfg, opts["folds"], opts["seed"], opts["level"])
    report = {"format_version": REPORT_VERSION, "target": opts["target"], "method": opts["method"],
              "estimate": rep.estimate, "se": rep.standard_error, "ci": [rep.ci_low, rep.ci_high],
              "level": opts["level"], "n": rep.n_used, "folds": rep.folds, "seed": opts["seed"]}
    print(f"{opts['target']} [{opts['method']}]: {rep.estimate:.4f} +/- {rep.standard_error:.4f}  "
          f"{100 * opts['level']:g}% CI [{rep.ci_low:.4f}, {rep.ci_high:.4f}]  n={rep.n_used}")
    if opts["report"]:
        with open(opts["report"], "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def cmd_leaderboard(args, cp) -> int:
    opts = resolve(args, cp, ["model", "data", "category_map", "method", "folds", "seed", "level"])
    _require(opts, "model", "data")
    _emit_config(args, opts)
    _, data, cfg = _model_and_data(opts)
    rows = leaderboard(data, cfg, opts["method"], opts["folds"], opts["seed"], opts["level"])
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, LEADERBOARD_HEADER, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    current = None
    for r in rows:
        if r["category"] != current:
            current = r["category"]
            print(f"\n== {current} ==")
            print(f"{'rank':>4}  {'model':<30} {'score':>8} {'se':>7}  ci")
        print(f"{r['rank']:>4}  {r['model']:<30} {r['score']:>8.3f} {r['se']:>7.3f}  "
              f"[{r['ci_low']:.3f}, {r['ci_high']:.3f}]")
    return EXIT_OK


SIM_FIELDS = {f.name: f for f in fields(SimConfig)}
SIM_KEYS = {name.lower(): name for name in SIM_FIELDS}  # configparser lowercases keys


def sim_config(args, cp) -> SimConfig:
    vals = {}
    if cp.has_section("simulate"):
        for key, raw in cp.items("simulate"):
            if key not in SIM_KEYS:
                raise ConfigError(f"[simulate] unknown key {key!r}")
            vals[SIM_KEYS[key]] = raw
    for key in SIM_FIELDS:
        v = getattr(args, f"sim_{key}", None)
        if v is not None:
            vals[key] = v
    kw = {}
    for key, raw in vals.items():
        default = getattr(SimConfig, key, None)
        try:
            if key == "methods":
                kw[key] = tuple(m.strip() for m in str(raw).split(",") if m.strip()) if isinstance(raw, str) else raw
            elif key == "refine":
                kw[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
            elif key == "clip_bound":
                kw[key] = None if raw in (None, "", "none") else float(raw)
            elif isinstance(default, bool):
                kw[key] = bool(raw)
            elif isinstance(default, int):
                kw[key] = int(raw)
            elif isinstance(default, float):
                kw[key] = float(raw)
            else:
                kw[key] = str(raw)
        except ValueError as exc:
            raise ConfigError(f"simulate option {key}: cannot parse {raw!r}") from exc
    try:
        return SimConfig(**kw)
    except (ValueError, IndexError) as exc:
        raise ConfigError(str(exc)) from exc


def sim_config_text(cfg: SimConfig) -> str:
    cp = configparser.ConfigParser()
    cp.add_section("simulate")
    for key, val in cfg.to_dict().items():
        if key == "methods":
            val = ",".join(val)
        cp.set("simulate", key, "none" if val is None else str(val))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def cmd_simulate(args, cp) -> int:
    cfg = sim_config(args, cp)
    if not args.output:
        raise ConfigError("simulate needs --output")
    text = sim_config_text(cfg)
    if args.echo_config:
        with open(args.echo_config, "w", encoding="utf-8") as fh:
            fh.write(text)
    truth, sampling = study_truth(cfg)
    battles = sample_battles(truth, sampling, cfg.n, replication_rng(cfg, args.replication))
    models = [f"m{i:03d}" for i in range(cfg.d1)]
    cats = [f"c{j:03d}" for j in range(cfg.d2)]
    write_battle_log(args.output, battles, models, cats)
    if args.truth:
        np.savetxt(args.truth, truth, delimiter=",", fmt="%.17g")
    print(f"wrote {len(battles)} battles -> {args.output}")
    return EXIT_OK


def cmd_mc(args, cp) -> int:
    cfg = sim_config(args, cp)
    text = sim_config_text(cfg)
    if args.echo_config:
        with open(args.echo_config, "w", encoding="utf-8") as fh:
            fh.write(text)

    def progress(res):
        if args.verbose:
            print(f"replication {res.replication} done in {res.seconds:.1f}s", file=sys.stderr, flush=True)

    study = run_study(cfg, workers=args.workers, progress=progress)
    summary = mc_summary(study)
    out = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        cols = ["method", "coverage", "median_se", "oracle_se", "se_ratio", "mean_abs_z", "var_z", "ks_distance",
                "failures", "replications", "crossfit_coverage", "crossfit_median_se"]
        w = csv.DictWriter(out, cols, lineterminator="\n")
        w.writeheader()
        for s in summary.values():
            w.writerow(s.as_row())
    finally:
        if out is not sys.stdout:
            out.close()
    if args.diagnostics:
        export_diagnostics(study, args.diagnostics)
    if args.study_json:
        save_study(study, args.study_json)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pairinfer", description="Low-rank BTL fitting and efficient inference.")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--echo-config", help="write the resolved configuration here")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_opts(sp):
        sp.add_argument("--data", help="battle log CSV")
        sp.add_argument("--category-map", dest="category_map", help="JSON object raw category -> category")

    f = sub.add_parser("fit", help="fit a low-rank score matrix to a battle log")
    data_opts(f)
    f.add_argument("--top-k", dest="top_k", type=int)
    f.add_argument("--tie-policy", dest="tie_policy", choices=["drop", "half"])
    f.add_argument("--rank", type=int)
    f.add_argument("--clip-bound", dest="clip_bound", type=float)
    f.add_argument("--altmin-rounds", dest="altmin_rounds", type=int)
    f.add_argument("--folds", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--output", "-o")

    i = sub.add_parser("infer", help="confidence interval for one target")
    data_opts(i)
    i.add_argument("--model", required=False)
    i.add_argument("--target", help="entry:MODEL:CATEGORY | winprob:A:B:CATEGORY | contrast:A:B:CATEGORY")
    i.add_argument("--method", choices=["efficient", "whitened", "ipw", "naive"])
    i.add_argument("--folds", type=int)
    i.add_argument("--seed", type=int)
    i.add_argument("--level", type=float)
    i.add_argument("--report", help="write a JSON report here")

    lb = sub.add_parser("leaderboard", help="per-category ranked scores with confidence intervals")
    data_opts(lb)
    lb.add_argument("--model")
    lb.add_argument("--method", choices=["efficient", "whitened", "ipw", "naive"])
    lb.add_argument("--folds", type=int)
    lb.add_argument("--seed", type=int)
    lb.add_argument("--level", type=float)
    lb.add_argument("--csv", help="also write the table as CSV")

    def sim_opts(sp):
        for name, fld in SIM_FIELDS.items():
            flags = {f"--{name.lower().replace('_', '-')}", f"--{name.replace('_', '-')}"}
            sp.add_argument(*sorted(flags, reverse=True), dest=f"sim_{name}", default=None,
                            help=f"(default {fld.default!r})" if not callable(fld.default) else None)

    s = sub.add_parser("simulate", help="write a synthetic battle log")
    sim_opts(s)
    s.add_argument("--replication", type=int, default=0)
    s.add_argument("--output", "-o")
    s.add_argument("--truth", help="write the planted score matrix (CSV)")

    m = sub.add_parser("mc", help="Monte Carlo coverage study")
    sim_opts(m)
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--output", "-o", help="summary CSV (default stdout)")
    m.add_argument("--diagnostics", help="per-replication CSV")
    m.add_argument("--study-json", dest="study_json", help="full study results as JSON")
    return p


COMMANDS = {"fit": cmd_fit, "infer": cmd_infer, "leaderboard": cmd_leaderboard, "simulate": cmd_simulate,
            "mc": cmd_mc}

NUMERIC_ERRORS = (IllConditionedInformationError, ConvergenceError, FoldFitError, ExtremeLogitError, OverlapError,
                  np.linalg.LinAlgError, FloatingPointError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_PARSE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cp = read_config(args.config)
        return COMMANDS[args.command](args, cp)
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, IngestError, UnknownNameError, ValueError, IndexError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
