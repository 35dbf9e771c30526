"""Command-line entry point: gen-trace, train, run, compare, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .config import ConfigError, ScenarioConfig, build, load_config
from .metrics import replay
from .sim import (
    build_trace,
    build_world,
    compare,
    load_or_train,
    ratio_table,
    read_events,
    run_scenario,
    train_model,
    write_events,
)
from .traces import concentration_share, trace_concurrency

SUMMARY_COLUMNS = [
    "policy",
    "qos_violation_rate",
    "normalized_density",
    "schedules",
    "schedule_ms_mean",
    "fast_path_fraction",
    "fast_path_fraction_after_first_contact",
    "inference_per_schedule",
    "inference_events_total",
    "real_cold_starts",
    "logical_starts",
    "migrations",
    "cold_start_e2e_ms_mean",
]


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _summary_row(report: dict) -> dict:
    cs = report["cold_starts"]
    return {
        "policy": report["policy"],
        "qos_violation_rate": report["qos_violation_rate"],
        "normalized_density": report.get("normalized_density"),
        "schedules": report["schedules"],
        "schedule_ms_mean": report["schedule_ms_mean"],
        "fast_path_fraction": report["fast_path_fraction"],
        "fast_path_fraction_after_first_contact": report["fast_path_fraction_after_first_contact"],
        "inference_per_schedule": report["inference_per_schedule"],
        "inference_events_total": report["inference_events_total"],
        "real_cold_starts": cs["real"],
        "logical_starts": cs["logical"],
        "migrations": cs["migrations"],
        "cold_start_e2e_ms_mean": cs["e2e_ms_mean"],
    }


def _write_summary(reports: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(_summary_row(r))


def _config(args, need_seed: bool) -> ScenarioConfig:
    if need_seed and args.seed is None:
        raise CliError("ConfigError", "--seed is required", 2)
    try:
        cfg = load_config(args.config, args.set or [], seed=args.seed)
        if cfg.seed is None:
            cfg = replace(cfg, seed=0)
        cfg.validate()
    except ConfigError as e:
        raise CliError("ConfigError", str(e), 2) from None
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError("OutputError", f"cannot create {out}: {e}") from None
    return out


def _write_config(cfg: ScenarioConfig, out: Path) -> None:
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def cmd_gen_trace(args) -> dict:
    cfg = _config(args, need_seed=False)
    out = _out(args)
    world = build_world(cfg)
    trace = build_trace(cfg, world)
    trace.to_jsonl(out / "trace.jsonl")
    loads = {f: s.saturated_load_rps for f, s in world.specs.items()}
    share = concentration_share(trace_concurrency(trace, {f: loads[f] for f in trace.functions}))
    return {"trace": str(out / "trace.jsonl"), "functions": trace.functions, "concentration_share": share}


def cmd_train(args) -> dict:
    cfg = _config(args, need_seed=False)
    out = _out(args)
    world = build_world(cfg)
    res = train_model(cfg, world)
    res.model.save(out / "model.json")
    report = res.report.to_dict()
    _dump(report, out / "accuracy.json")
    return {"model": str(out / "model.json"), **report}


def _run_files(out: Path, res, cfg: ScenarioConfig) -> None:
    res.trace.to_jsonl(out / "trace.jsonl")
    write_events(res.events, out / "events.jsonl")
    _dump(res.report, out / "report.json")
    _write_summary([res.report], out / "summary.csv")
    _write_config(cfg, out)


def cmd_run(args) -> dict:
    cfg = _config(args, need_seed=True)
    out = _out(args)
    world = build_world(cfg)
    trace = build_trace(cfg, world)
    model = None
    if cfg.predictor.kind == "forest" and cfg.policy != "kube":
        model = load_or_train(cfg, world)
        model.save(out / "model.json")
    res = run_scenario(cfg, model, world, trace)
    _run_files(out, res, cfg)
    r = res.report
    return {
        "report": str(out / "report.json"),
        "qos_violation_rate": r["qos_violation_rate"],
        "normalized_density": r["normalized_density"],
        "fast_path_fraction": r["fast_path_fraction"],
        "fast_path_fraction_after_first_contact": r["fast_path_fraction_after_first_contact"],
        "schedule_ms_mean": r["schedule_ms_mean"],
    }


def cmd_compare(args) -> dict:
    cfg = _config(args, need_seed=True)
    out = _out(args)
    world = build_world(cfg)
    model = None
    if cfg.predictor.kind == "forest":
        model = load_or_train(cfg, world)
        model.save(out / "model.json")
    runs = compare(cfg, model)
    next(iter(runs.values())).trace.to_jsonl(out / "trace.jsonl")
    with open(out / "events.jsonl", "w") as fh:
        for policy, r in runs.items():
            for ev in r.events:
                fh.write(json.dumps({**ev, "policy": policy}, sort_keys=True) + "\n")
    ratios = ratio_table(runs)
    _dump({"ratios": ratios, "policies": {p: r.report for p, r in runs.items()}, "config": cfg.to_dict()},
          out / "report.json")
    _write_summary([r.report for r in runs.values()], out / "summary.csv")
    _write_config(cfg, out)
    return {"report": str(out / "report.json"), **{k: v for k, v in ratios.items() if not isinstance(v, dict)}}


def cmd_report(args) -> dict:
    src = Path(args.input)
    try:
        report = json.loads((src / "report.json").read_text())
    except FileNotFoundError:
        raise CliError("MissingFile", f"no report.json in {src}") from None
    reports = list(report["policies"].values()) if "policies" in report else [report]
    result: dict = {"summary": [_summary_row(r) for r in reports]}
    if "ratios" in report:
        result["ratios"] = {k: v for k, v in report["ratios"].items() if not isinstance(v, dict)}
    if args.replay:
        try:
            cfg = build(ScenarioConfig, reports[0]["config"])
        except (ConfigError, KeyError) as e:
            raise CliError("ConfigError", f"embedded config unusable: {e}", 2) from None
        world = build_world(cfg)
        try:
            events = read_events(src / "events.jsonl")
        except FileNotFoundError:
            raise CliError("MissingFile", f"no events.jsonl in {src}") from None
        checks = {}
        for r in reports:
            evs = [e for e in events if e.get("policy", r["policy"]) == r["policy"]]
            acc, over = replay(evs, world.specs, world.oracle, cfg.eval_window_s)
            checks[r["policy"]] = {
                "reported_violation_rate": r["qos_violation_rate"],
                "replayed_violation_rate": acc.violation_rate,
                "match": acc.violation_rate == r["qos_violation_rate"],
                "admissions_beyond_true_capacity": len(over),
            }
        result["replay"] = checks
    return result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsched", description="Capacity-table serverless scheduling simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_help="scenario seed"):
        sp.add_argument("--config", help="YAML scenario file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        sp.add_argument("--seed", type=int, help=seed_help)
        sp.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("gen-trace", help="generate trace.jsonl"))
    common(sub.add_parser("train", help="train the latency model"))
    common(sub.add_parser("run", help="simulate one policy"), "scenario seed (required)")
    common(sub.add_parser("compare", help="capsched vs gsight vs kube on one trace"), "scenario seed (required)")
    rp = sub.add_parser("report", help="summarize (and optionally replay) a finished run")
    rp.add_argument("input", help="directory holding report.json")
    rp.add_argument("--replay", action="store_true", help="re-score the events log with the oracle")
    return p


COMMANDS = {
    "gen-trace": cmd_gen_trace,
    "train": cmd_train,
    "run": cmd_run,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except CliError as e:
        print(json.dumps({"error": e.kind, "message": str(e)}), file=sys.stderr)
        return e.code
    except (ValueError, KeyError, OSError, RuntimeError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
