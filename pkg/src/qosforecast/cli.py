"""Command-line entry point: ``qosforecast <command> [options]``.

Every command reads an optional JSON run config (``--config``) whose
sections are overridden by explicit flags.  Output files contain no wall
times, so reruns with the same seed are byte-identical.

Exit codes: 0 success, 2 bad usage or input, 3 numeric failure,
4 calibration failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from . import synth
from .errors import InvalidConfig, QosForecastError
from .evaluation import GroundTruthOutage, pr_curve
from .infer import DecisionConfig, detect, score_stream
from .ingest import Schema, handle_missing, load_metric_frame, normalize, write_metric_csv
from .labeling import LabelParams, load_alerts, qos_thresholds, write_alerts
from .pipeline import Evaluation, fit, model_config, prepare, prepare_for
from .train import load_checkpoint, save_checkpoint

log = logging.getLogger("qosforecast")

TRAIN_KEYS = ("epochs", "batch_size", "patience", "train_stride", "lr")


@dataclass
class RunConfig:
    """Sections of the JSON run config; every one is optional."""

    scenario: dict | None = None
    days: float = 30.0
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    split: dict = field(default_factory=lambda: {"train_frac": 0.7, "val_frac": 0.1})
    labels: dict = field(default_factory=dict)
    decision: dict = field(default_factory=dict)
    ablate: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InvalidConfig(f"config {path} not found") from None
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config {path}: {exc}") from None
        if not isinstance(obj, dict):
            raise InvalidConfig("config must be a JSON object")
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
        return cls(**obj)

    def apply_flags(self, args: argparse.Namespace) -> "RunConfig":
        model = dict(self.model)
        flag_map = {"gamma": "gamma", "window": "w", "loss": "loss",
                    "encoder": "encoder", "lam": "lam"}
        for flag, key in flag_map.items():
            if getattr(args, flag, None) is not None:
                model[key] = getattr(args, flag)
        seed = self.seed if getattr(args, "seed", None) is None else args.seed
        model["seed"] = seed
        labels = dict(self.labels)
        decision = dict(self.decision)
        if getattr(args, "threshold_T", None) is not None:
            decision["percentile"] = args.threshold_T
        if getattr(args, "sustain", None) is not None:
            decision["sustain"] = args.sustain
        return replace(self, model=model, labels=labels, decision=decision, seed=seed)

    def label_params(self) -> LabelParams:
        try:
            return LabelParams(**self.labels)
        except TypeError as exc:
            raise InvalidConfig(f"labels: {exc}") from None

    def scenario_config(self, path: str | None = None) -> synth.ScenarioConfig:
        if path is not None:
            return replace(synth.ScenarioConfig.load(path), seed=self.seed)
        if self.scenario is None:
            return synth.default_scenario(self.seed, duration=int(self.days * synth.DAY))
        return replace(synth.ScenarioConfig.from_json(self.scenario), seed=self.seed)


# -- io helpers ---------------------------------------------------------------

def _dump(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_frame(data: str, schema: str | None):
    schema_path = Path(schema) if schema else Path(data).with_name("schema.json")
    if not schema_path.exists():
        raise InvalidConfig(f"schema {schema_path} not found (pass --schema)")
    return load_metric_frame(data, Schema.load(schema_path))


def _load_truth(path: str) -> list[GroundTruthOutage]:
    try:
        return [GroundTruthOutage.from_json(o) for o in json.loads(Path(path).read_text())]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"truth {path}: {exc}") from None


def _split(cfg: RunConfig) -> tuple[float, float]:
    return float(cfg.split.get("train_frac", 0.7)), float(cfg.split.get("val_frac", 0.1))


def _train_kwargs(cfg: RunConfig) -> dict:
    unknown = set(cfg.train) - set(TRAIN_KEYS)
    if unknown:
        raise InvalidConfig(f"unknown train settings: {sorted(unknown)}")
    return dict(cfg.train)


# -- commands -----------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> int:
    scn_cfg = cfg.scenario_config(args.scenario)
    scn = synth.generate(scn_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metric_csv(scn.frame, out / "metrics.csv")
    write_alerts(scn.alerts, out / "alerts.jsonl")
    _dump([o.to_json() for o in scn.outages], out / "truth.json")
    _dump(scn.schema.to_json(), out / "schema.json")
    _dump(scn_cfg.to_json(), out / "scenario.json")
    print(f"label density {synth.label_density(scn, cfg.label_params()):.4f} "
          f"({len(scn.frame)} minutes, {len(scn.alerts)} alerts, {len(scn.outages)} outages)")
    return 0


def _prepared(cfg: RunConfig, args):
    raw = _load_frame(args.data, args.schema)
    alerts = load_alerts(args.alerts)
    w = int(cfg.model.get("w", 60))
    gamma = int(cfg.model.get("gamma", 10))
    return prepare(raw, alerts, w, gamma, *_split(cfg), label_params=cfg.label_params())


def cmd_prepare(cfg: RunConfig, args) -> int:
    prep = _prepared(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "columns": [c.to_json() for c in prep.frame.columns],
        "normalization": prep.stats.to_json(),
        "thresholds": prep.thresholds,
        "labels": prep.label_params.to_json(),
        "samples": {"train": len(prep.train), "val": len(prep.val), "test": len(prep.test)},
        "label_density": prep.label_density(),
        "dropped_rows": prep.dropped_rows,
    }
    _dump(summary, out / "prepared.json")
    with (out / "labels.jsonl").open("w") as fh:
        for q, s in prep.labels.items():
            for t, y in zip(s.timestamps, s.labels):
                fh.write(json.dumps({"timestamp": int(t) * 60, "metric": q, "label": int(y)},
                                    sort_keys=True) + "\n")
    print(f"{len(prep.train)}/{len(prep.val)}/{len(prep.test)} samples, "
          f"label density {prep.label_density():.4f}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    prep = _prepared(cfg, args)
    mcfg = model_config(prep, **cfg.model)
    bundle, report = fit(prep, mcfg, **_train_kwargs(cfg))
    bundle.sustain = int(cfg.decision.get("sustain", bundle.sustain))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(bundle, out)
    _dump(report.to_json(), out.with_name(out.name + ".report.json"))
    log.info("trained %d epochs in %.1fs", report.epochs_run, report.wall_time)
    print(f"best epoch {report.best_epoch}, val loss {report.history[report.best_epoch].val_total:.6f}")
    return 0


def _bundle_prep(cfg: RunConfig, args):
    bundle = load_checkpoint(args.checkpoint)
    raw = _load_frame(args.data, args.schema)
    return bundle, prepare_for(bundle, raw, load_alerts(args.alerts), *_split(cfg))


def cmd_calibrate(cfg: RunConfig, args) -> int:
    bundle, prep = _bundle_prep(cfg, args)
    theta, j = Evaluation(bundle, prep, calib_stride=int(cfg.decision.get("calib_stride", 1))).calibrate()
    save_checkpoint(bundle, args.checkpoint)
    print(f"theta* {theta:.6g}, J {j:.6f}")
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    if bundle.theta is None:
        raise InvalidConfig("checkpoint is not calibrated; run calibrate first")
    raw, _ = handle_missing(_load_frame(args.data, args.schema))
    raw = raw.select([c.name for c in bundle.columns])
    thresholds = dict(bundle.thresholds)
    percentile = float(cfg.decision.get("percentile", bundle.percentile))
    if percentile != bundle.percentile:
        if args.reference is None:
            raise InvalidConfig("--threshold-T other than the trained percentile needs --reference")
        ref, _ = handle_missing(_load_frame(args.reference, args.schema))
        thresholds = qos_thresholds(ref, list(bundle.config.qos), percentile)
    scores = score_stream(bundle, normalize(raw, bundle.stats), stream=args.stream, thresholds=thresholds)
    sustain = int(cfg.decision.get("sustain", bundle.sustain))
    events = detect(scores, DecisionConfig(bundle.theta, percentile, thresholds, sustain))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "scores.jsonl").open("w") as fh:
        for row in scores.rows(bundle.theta):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _dump({"theta": bundle.theta, "percentile": percentile, "thresholds": thresholds,
           "sustain": sustain, "events": [e.to_json() for e in events]}, out / "events.json")
    print(f"{len(scores.timestamps)} minutes scored, {len(events)} events")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    bundle, prep = _bundle_prep(cfg, args)
    ev = Evaluation(bundle, prep, calib_stride=int(cfg.decision.get("calib_stride", 1)))
    truth = _load_truth(args.truth) if args.truth else []
    percentiles = cfg.decision.get("percentiles", [95, 97, 99])
    if bundle.theta is None:
        ev.calibrate()
    rep = ev.report(truth, percentiles, sustain=int(cfg.decision.get("sustain", bundle.sustain)),
                    grace=int(cfg.decision.get("grace", 0)))
    _dump(rep.to_json(), Path(args.out))
    if args.pr_csv:
        points = pr_curve(ev.scores("test").ravel(), ev.labels("test").ravel())
        with Path(args.pr_csv).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["threshold", "precision", "recall"])
            writer.writerows([repr(t), repr(p), repr(r)] for t, p, r in points)
    print(f"AUC-PR {rep.auc_pr:.4f}, F1 {rep.prf.f1:.4f} at theta* {rep.theta:.6g}")
    return 0


VARIANTS = {"mtl": {}, "clf_only": {"classifier_only": True}, "mdn_only": {"lam": 0.0}}


def ablation_rows(cfg: RunConfig, scenario: str | None = None) -> list[dict]:
    """Train every grid cell for every seed; one row per (encoder, loss, gamma)."""
    grid = cfg.ablate
    encoders = grid.get("encoders", ["bilstm", "lstm"])
    losses = grid.get("losses", ["evl", "bce"])
    gammas = grid.get("gammas", [5, 10])
    seeds = grid.get("seeds", [cfg.seed])
    variants = grid.get("variants", list(VARIANTS))
    bad = set(variants) - set(VARIANTS)
    if bad:
        raise InvalidConfig(f"unknown ablation variants {sorted(bad)}")
    model = {k: v for k, v in cfg.model.items() if k not in ("encoder", "loss", "gamma", "seed")}
    w = int(model.pop("w", 60))
    kw = _train_kwargs(cfg)
    calib_stride = int(cfg.decision.get("calib_stride", 1))
    results: dict[tuple, dict[str, list[float]]] = {}
    for seed in seeds:
        scn = synth.generate(replace(cfg, seed=seed).scenario_config(scenario))
        for gamma in gammas:
            prep = prepare(scn.frame, scn.alerts, w, gamma, *_split(cfg), label_params=cfg.label_params())
            for enc in encoders:
                for loss in losses:
                    cell = results.setdefault((enc, loss, gamma), {})
                    for v in variants:
                        mcfg = model_config(prep, **model, **VARIANTS[v], encoder=enc, loss=loss,
                                            w=w, gamma=gamma, seed=seed)
                        bundle, _ = fit(prep, mcfg, **kw)
                        ev = Evaluation(bundle, prep, calib_stride=calib_stride)
                        ev.calibrate()
                        rep = ev.report()
                        cell.setdefault(f"auc_pr_{v}", []).append(rep.auc_pr)
                        cell.setdefault(f"f1_{v}", []).append(rep.prf.f1)
                        log.info("cell %s/%s/gamma=%d %s seed %d: AUC-PR %.4f",
                                 enc, loss, gamma, v, seed, rep.auc_pr)
    rows = []
    for (enc, loss, gamma), vals in results.items():
        row = {"encoder": enc, "loss": loss, "gamma": gamma, "seeds": len(seeds)}
        row.update({k: statistics.median(v) for k, v in vals.items()})
        rows.append(row)
    return rows


def cmd_ablate(cfg: RunConfig, args) -> int:
    rows = ablation_rows(cfg, args.scenario)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    print(f"{len(rows)} grid rows written to {out}")
    return 0


COMMANDS = {
    "generate": cmd_generate, "prepare": cmd_prepare, "train": cmd_train,
    "calibrate": cmd_calibrate, "predict": cmd_predict, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--gamma", type=int, help="look-ahead in minutes")
    common.add_argument("--window", type=int, help="encoder window in minutes")
    common.add_argument("--loss", choices=("evl", "bce"))
    common.add_argument("--encoder", choices=("bilstm", "lstm"))
    common.add_argument("--lambda", dest="lam", type=float, help="classifier loss weight")
    common.add_argument("--threshold-T", dest="threshold_T", type=float, help="percentile for tau")
    common.add_argument("--sustain", type=int, help="minutes above theta* before flagging")
    common.add_argument("--schema", help="schema JSON (default: schema.json beside --data)")

    parser = argparse.ArgumentParser(prog="qosforecast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str, *required: str, **optional: str):
        p = sub.add_parser(name, parents=[common], help=help_)
        for flag in required:
            p.add_argument(f"--{flag}", required=True)
        for flag, h in optional.items():
            p.add_argument(f"--{flag}", help=h)
        return p

    add("generate", "write a synthetic scenario", "out",
        scenario="scenario config JSON (default: built-in scenario)")
    add("prepare", "clean, select, normalize and label", "data", "alerts", "out")
    add("train", "fit a model and write a checkpoint", "data", "alerts", "out")
    add("calibrate", "fit theta* on the training split", "checkpoint", "data", "alerts")
    p = add("predict", "score metrics and detect outages", "checkpoint", "data", "out",
            reference="training metrics used to re-derive tau for --threshold-T")
    p.add_argument("--stream", action="store_true", help="score one window at a time")
    add("evaluate", "AUC-PR, F1 and MTTD report", "checkpoint", "data", "alerts", "out",
        truth="ground-truth outage JSON", **{"pr-csv": "also write the test PR curve here"})
    add("ablate", "train an encoder x loss x gamma grid", "out",
        scenario="scenario config JSON (default: built-in scenario)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("OW_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config).apply_flags(args)
        return COMMANDS[args.command](cfg, args)
    except QosForecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except TypeError as exc:  # unknown keys in a config section
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
