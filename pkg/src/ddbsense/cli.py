"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 trend assertion failure (``--assert``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks, config, ddb, experiments, fusion, ks, spectrum

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ASSERT = 0, 1, 2, 3


def _node_list(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected node indices, got {text!r}") from None


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="TOML experiment configuration")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--scale", type=float, help="shrink data sizes by this factor (0, 1]")
    p.add_argument("--full", action="store_true", help="full-size data (20,000 train / 80,000 test)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--ddb-method", choices=config.DDB_METHODS)
    p.add_argument("--attack", choices=config.ATTACK_METHODS)
    p.add_argument("--mode", choices=config.MODES)
    p.add_argument("--ratio", type=float, help="attack occurrence ratio")
    p.add_argument("--group-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--m", type=int, help="number of compromised nodes (nodes 1..m)")
    p.add_argument("--nodes", type=_node_list, help="explicit 1-based compromised nodes, e.g. '2,5,9'")
    p.add_argument("--assert", dest="check", action="store_true", help="exit 3 if trend checks fail")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddbsense", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/test sensing data as CSV")
    _common(p)

    p = sub.add_parser("train", help="train the fusion classifier on a CSV dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("ddb", help="compute DDBs of a dataset under a trained model")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--reference", type=Path, help="labelled data for the LRT direction (default: --data)")

    p = sub.add_parser("attack", help="perturb a dataset from compromised nodes")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("detect", help="K-S detection of a DDB stream against a training baseline")
    _common(p)
    p.add_argument("--baseline", type=Path, required=True, help="DDB CSV of the training data")
    p.add_argument("--ddb", type=Path, required=True, help="DDB CSV of the test stream")

    p = sub.add_parser("sweep", help="run a named experiment sweep")
    _common(p)
    p.add_argument("name", choices=sorted(experiments.SWEEPS))

    p = sub.add_parser("report", help="run the single-point pipeline and write its report")
    _common(p)
    return parser


def build_config(args) -> config.ExperimentConfig:
    cfg = config.load(args.config) if args.config else config.ExperimentConfig()
    top, att = {}, {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.ddb_method:
        top["ddb_method"] = args.ddb_method
    if args.group_size is not None:
        top["group_size"] = args.group_size
    if args.alpha is not None:
        top["alpha"] = args.alpha
    if args.attack:
        att["method"] = args.attack
    if args.mode:
        att["mode"] = args.mode
    if args.ratio is not None:
        att["ratio"] = args.ratio
    if args.nodes is not None:
        att["nodes"] = args.nodes
        att["m"] = len(args.nodes)
    elif args.m is not None:
        att["m"] = args.m
        att["nodes"] = None
    if args.full:
        top["train_size"], top["test_size"] = config.FULL_SIZES
    cfg = replace(cfg, attacker=replace(cfg.attacker, **att), **top)
    if args.scale is not None:
        if not 0 < args.scale <= 1:
            raise config.ConfigError("scale: must lie in (0, 1]")
        cfg = cfg.scaled(args.scale)
    return cfg


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _cmd_generate(args, cfg):
    ctx_seed = experiments.derive_seed
    s = cfg.scenario
    scenario = spectrum.heterogeneous_scenario(s.node_count, s.sample_count, s.noise_scale, s.snr,
                                               s.occupancy_prior, s.seed)
    train = spectrum.generate_dataset(scenario, cfg.train_size, ctx_seed(cfg.seed, "train"))
    test = spectrum.generate_dataset(scenario, cfg.test_size, ctx_seed(cfg.seed, "test", 0))
    spectrum.write_csv(train, args.out / "train.csv")
    spectrum.write_csv(test, args.out / "test.csv")
    _write_json(args.out / "scenario.json", scenario.to_dict())
    print(f"wrote {len(train)} training and {len(test)} test vectors to {args.out}")


def _cmd_train(args, cfg):
    data = spectrum.load_csv(args.data)
    model = fusion.train(data, fusion.TrainConfig(seed=experiments.derive_seed(cfg.seed, "fusion")))
    fusion.save(model, args.out / "model.npz")
    print(f"training accuracy {model.train_accuracy:.4f}; model written to {args.out / 'model.npz'}")


def _cmd_ddb(args, cfg):
    model = fusion.load(args.model)
    data = spectrum.load_csv(args.data)
    direction = None
    if cfg.ddb_method == "lrt":
        ref = spectrum.load_csv(args.reference) if args.reference else data
        h0, h1 = spectrum.estimate_scale_params(ref, cfg.scenario.sample_count)
        direction = ddb.lrt_direction(h0, h1, cfg.scenario.sample_count)
    batch = ddb.compute_ddb_set(model, data, cfg.ddb_method, direction)
    ddb.write_ddb_csv(batch, args.out / "ddb.csv", data.timeslots)
    if batch.warning:
        print(f"warning: {batch.warning}", file=sys.stderr)
    print(f"{len(batch)} distances ({batch.excluded} non-converged) written to {args.out / 'ddb.csv'}")


def _cmd_attack(args, cfg):
    model = fusion.load(args.model)
    data = spectrum.load_csv(args.data)
    att = cfg.attacker
    surrogate = None
    if att.mode == "surrogate":
        surrogate = attacks.train_surrogate(data.values, model.classify(data.values),
                                            fusion.TrainConfig(seed=experiments.derive_seed(cfg.seed, "surrogate")))
    knowledge = attacks.AttackerKnowledge(model, [j - 1 for j in att.controlled], att.mode, surrogate)
    step = att.step_size if att.method != "pgd" else att.step_size * np.sqrt(att.m) / att.pgd_steps
    acfg = attacks.AttackConfig(att.method, step, att.pgd_steps, att.ratio,
                                experiments.derive_seed(cfg.seed, "schedule", 0))
    trace = attacks.schedule_attacks(data, knowledge, acfg)
    attacks.write_attack_csv(trace, args.out / "attack.csv")
    spectrum.write_csv(trace.to_dataset(data), args.out / "attacked.csv")
    print(f"attacked {int(trace.attacked.sum())} of {len(trace)} timeslots; success rate {trace.success_rate:.4f}")


def _read_ddb_csv(path):
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "distance" not in rows[0]:
        raise spectrum.DatasetError(f"{path}: expected a DDB CSV with a 'distance' column")
    d = np.array([float(r["distance"]) for r in rows])
    ok = np.array([r.get("converged", "1") == "1" for r in rows]) & np.isfinite(d)
    return d[ok]


def _cmd_detect(args, cfg):
    base = ks.build_baseline(_read_ddb_csv(args.baseline))
    decisions = ks.stream_detect(base, _read_ddb_csv(args.ddb), cfg.group_size, cfg.alpha)
    ks.write_decision_csv(decisions, args.out / "decisions.csv")
    print(f"{len(decisions)} groups, flag rate {ks.flag_rate(decisions):.4f}")


def _emit(args, report):
    path = args.out / f"{report.sweep}.{args.format}"
    experiments.emit_report(report, args.format, path)
    _write_json(args.out / f"{report.sweep}.timings.json", report.timings)
    print(f"report written to {path}")
    if args.check:
        checks = experiments.check_report(report)
        for name, ok, detail in checks:
            print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
        if not all(ok for _, ok, _ in checks):
            return EXIT_ASSERT
    return EXIT_OK


def _cmd_sweep(args, cfg):
    return _emit(args, experiments.run_sweep(args.name, cfg))


def _cmd_report(args, cfg):
    return _emit(args, experiments.run_pipeline(cfg))


COMMANDS = {"generate": _cmd_generate, "train": _cmd_train, "ddb": _cmd_ddb, "attack": _cmd_attack,
            "detect": _cmd_detect, "sweep": _cmd_sweep, "report": _cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, cfg)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
