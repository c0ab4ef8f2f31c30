"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``), honours
``--seed`` and writes its artifacts under ``--out``. Failures print one JSON
line ``{"error": ..., "message": ...}`` on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import detector as det
from . import environment as E
from . import harness as H
from .fingerprint import NORMAL, PipelineConfig, ingest_csv, run_pipeline, write_csv


def _load_config(args) -> tuple[dict, H.ExperimentConfig]:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    pipeline = raw.pop("pipeline", {})
    cfg = H.ExperimentConfig.from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, agent=replace(cfg.agent, seed=args.seed),
                      detector=replace(cfg.detector, seed=args.seed))
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return pipeline, cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_features_select(args) -> None:
    pipeline, cfg = _load_config(args)
    pc = PipelineConfig.from_dict(pipeline)
    if args.temporal:
        pc.temporal = list(args.temporal)
    if args.target is not None:
        pc.target_count = args.target
    result = run_pipeline(ingest_csv(args.csv, schema_mode="raw"), pc)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.schema.save(out / "schema.json")
    write_csv(out / "fingerprints.csv", result.schema.feature_names, result.fingerprints)
    _emit({"features": result.schema.feature_names, "attrition": result.attrition})


def cmd_detector_fit(args) -> None:
    _, cfg = _load_config(args)
    _, rows = ingest_csv(args.csv, schema_mode="conforming")
    normal = [fp for fp in rows if fp.label == NORMAL]
    if not normal:
        raise det.DetectorError("no rows labeled normal")
    X = np.vstack([fp.values for fp in normal])
    model = det.fit_config(X, cfg.detector)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "detector.json")
    _emit({"threshold": model.threshold, "training_flagged": float(np.mean(model.is_anomaly(X))),
           "rows": len(normal)})


def cmd_detector_eval(args) -> None:
    model = det.IsolationForestModel.load(args.model)
    _, rows = ingest_csv(args.csv, schema_mode="conforming")
    _emit(det.evaluate(model, rows).to_dict())


def cmd_env_calibrate(args) -> None:
    _, cfg = _load_config(args)
    spec = cfg.generator or E.default_generator_spec()
    result = E.calibrate(spec, cfg.detector, cfg.detection_table,
                         tolerance=cfg.calibration_tolerance, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.spec.save(out / "generator.json")
    result.model.save(out / "detector.json")
    _emit(result.to_dict())


def cmd_train(args) -> None:
    _, cfg = _load_config(args)
    built = H.build_environment(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = H.run_trial(built, cfg.agent, cfg.network, cfg.eval_size, cfg.checkpoint_every,
                          run_csv=out / "run.csv")
    _emit({"optimal_profile": built.optimal, "seed": cfg.agent.seed,
           "accuracy": metrics.accuracy, "episodes_to_converge": metrics.episodes_to_converge,
           "aqd": metrics.aqd, "wall_time_s": metrics.wall_time_s})


def cmd_sweep(args) -> None:
    _, cfg = _load_config(args)
    if cfg.axis is None:
        raise H.ConfigError("sweep needs an 'axis' in the config")
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    H.run_sweep(cfg)
    print(H.format_report(cfg.out_dir))


def cmd_report(args) -> None:
    print(H.format_report(args.dir))


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # Subcommands accept the flags too, without overwriting values given earlier.
        g = argparse.ArgumentParser(add_help=False)
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        g.add_argument("--config", help="JSON experiment config", **kw)
        g.add_argument("--seed", type=int, help="master seed (overrides the config)", **kw)
        g.add_argument("--out", help="output directory (overrides the config)", **kw)
        g.add_argument("-v", "--verbose", action="store_true", **kw)
        return g

    common = global_flags(True)
    p = argparse.ArgumentParser(prog="stealthbench", parents=[global_flags(False)],
                                description="Detector-aware profile selection testbed.")
    sub = p.add_subparsers(dest="command", required=True)

    feats = sub.add_parser("features", parents=[common]).add_subparsers(dest="action", required=True)
    sel = feats.add_parser("select", parents=[common], help="reduce a raw CSV to a fingerprint schema")
    sel.add_argument("csv")
    sel.add_argument("--temporal", nargs="*", help="columns that encode time")
    sel.add_argument("--target", type=int, help="number of features to keep")
    sel.set_defaults(func=cmd_features_select)

    dets = sub.add_parser("detector", parents=[common]).add_subparsers(dest="action", required=True)
    fit = dets.add_parser("fit", parents=[common], help="fit on the normal rows of a conforming CSV")
    fit.add_argument("csv")
    fit.set_defaults(func=cmd_detector_fit)
    ev = dets.add_parser("eval", parents=[common], help="TNR and per-profile FNR on a labeled CSV")
    ev.add_argument("model")
    ev.add_argument("csv")
    ev.set_defaults(func=cmd_detector_eval)

    envs = sub.add_parser("env", parents=[common]).add_subparsers(dest="action", required=True)
    envs.add_parser("calibrate", parents=[common], help="fit the synthetic generator to target FNRs") \
        .set_defaults(func=cmd_env_calibrate)

    sub.add_parser("train", parents=[common], help="one training run").set_defaults(func=cmd_train)
    sw = sub.add_parser("sweep", parents=[common], help="one-axis hyperparameter sweep")
    sw.add_argument("--workers", type=int)
    sw.set_defaults(func=cmd_sweep)
    rep = sub.add_parser("report", parents=[common], help="print a sweep's summary table")
    rep.add_argument("dir")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
