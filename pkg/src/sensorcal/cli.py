"""Command-line entry point: ``sensorcal <command> [flags]``.

Commands: generate, train, evaluate, calibrate, bins, profile, ablate.
Errors go to stderr as one ``error_code: message`` line. Exit codes: 0 ok,
2 usage, 3 data error, 4 numeric divergence.
"""

import argparse
import csv
import itertools
import json
import logging
import sys
from collections import deque
from dataclasses import replace
from pathlib import Path

import numpy as np

from sensorcal import binning, data, metrics
from sensorcal.errors import CalibrationError, DataError, EmptyTestSetError
from sensorcal.model import VARIANTS, CalibrationModel, ModelConfig
from sensorcal.training import TrainConfig, evaluate, train

log = logging.getLogger("sensorcal")

DEFAULTS = {
    "seed": 0,
    "variant": "tesla",
    "n": 60,
    "d": 64,
    "heads": 4,
    "binning": "log",
    "z": None,
    "embedding": "local_global",
    "embedding_bias": False,
    "aggregator": "linear",
    "feature": "pm10",
    "epochs": 10,
    "batch_size": 32,
    "lr": 1e-3,
    "out": "runs",
}


class UsageError(CalibrationError):
    code = "usage"
    exit_code = 2


def _model_flags(p):
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--n", type=int, help="window length")
    p.add_argument("--d", type=int, help="embedding width")
    p.add_argument("--heads", type=int)
    p.add_argument("--binning", choices=("log", "uniform"))
    p.add_argument("--z", type=int, help="bin count for uniform binning")
    p.add_argument("--embedding", choices=("local", "local_global"))
    p.add_argument("--embedding-bias", dest="embedding_bias", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--aggregator", choices=("linear", "ffn"))


def _train_flags(p):
    p.add_argument("--feature", choices=data.FEATURES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="sensorcal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of flat settings; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        return p

    p = command("generate", "write a synthetic paired-sensor CSV")
    p.add_argument("--sensors", type=int, default=4)
    p.add_argument("--len", dest="length", type=int, default=20000)

    p = command("train", "train a calibration model")
    p.add_argument("--data", required=True)
    _model_flags(p)
    _train_flags(p)

    p = command("evaluate", "score a checkpoint on one split of a CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "validation", "train", "all"), default="test")

    p = command("calibrate", "stream a CSV through a checkpoint, adding a calibrated column")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = command("bins", "print a bin layout")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--uniform", action="store_true")
    p.add_argument("--z", type=int)

    p = command("profile", "analytical parameter / FLOPs / memory profile")
    p.add_argument("--variant", nargs="+", default=["tesla"], choices=(*VARIANTS, "all"))
    p.add_argument("--n", type=int, nargs="+", default=[360])
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)

    p = command("ablate", "train the binning x embedding x aggregator grid")
    p.add_argument("--data", required=True)
    _model_flags(p)
    _train_flags(p)
    return parser


def run_config(args):
    """Defaults, then the --config file, then explicitly passed flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    for k, v in vars(args).items():
        if k not in ("config", "verbose") and v is not None:
            cfg[k] = v
    return cfg


def model_config(cfg, **overrides):
    keys = ("variant", "n", "d", "heads", "binning", "z", "embedding", "embedding_bias", "aggregator")
    return ModelConfig(**{**{k: cfg[k] for k in keys}, **overrides})


def train_config(cfg):
    return TrainConfig(batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"], lr=cfg["lr"])


def _out_dir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_generate(args, cfg):
    out = _out_dir(cfg)
    path = data.synth_generate(cfg["seed"], args.sensors, args.length, out / "sensors.csv")
    _emit({"path": str(path), "sensors": args.sensors, "len": args.length, "seed": cfg["seed"]})


def cmd_train(args, cfg):
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    splits, plan, report = data.load_splits(args.data, cfg["feature"], mcfg.n)
    model, trace = train(mcfg, tcfg, splits["train"], splits["validation"])
    out = _out_dir(cfg)
    extra = {"run_config": cfg, "seed": cfg["seed"], "split": plan.to_dict(), "best_epoch": trace.best_epoch + 1}
    model.save(out / "checkpoint.json", extra)
    (out / "trace.csv").write_text(trace.to_csv())
    _write_json(out / "discard_report.json", report.to_list())
    _write_json(out / "run_config.json", cfg)
    _emit({"checkpoint": str(out / "checkpoint.json"), "best_epoch": trace.best_epoch + 1, "val_rmse": trace.val_rmse})


def _checkpoint(path):
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return CalibrationModel.from_dict(payload), payload


def cmd_evaluate(args, cfg):
    model, payload = _checkpoint(args.checkpoint)
    feature = payload.get("run_config", {}).get("feature", cfg["feature"])
    pairs, _ = data.clean(data.load_csv(args.data, feature))
    split = payload.get("split")
    if args.split == "all" or not split:
        chosen = pairs
    else:
        wanted = set(split["train"]) if args.split == "train" else {split[args.split]}
        chosen = [p for p in pairs if p.sensor_id in wanted]
    x, y = data.window_arrays(chosen, model.config.n)
    if x.shape[0] == 0:
        raise EmptyTestSetError(f"no {args.split} windows of length {model.config.n} in {args.data}")
    report = evaluate(model, x, y).to_dict()
    report.update(
        split=args.split,
        sensors=sorted(p.sensor_id for p in chosen),
        run_config=cfg,
        checkpoint_run_config=payload.get("run_config"),
        seed=payload.get("seed"),
    )
    out = _out_dir(cfg)
    _write_json(out / "report.json", report)
    _emit(report)


def cmd_calibrate(args, cfg):
    model, payload = _checkpoint(args.checkpoint)
    feature = payload.get("run_config", {}).get("feature", cfg["feature"])
    column = f"lowcost_{feature}"
    n = model.config.n
    buffers = {}
    rows = 0
    with open(args.input, newline="", encoding="utf-8") as fin, open(args.output, "w", newline="", encoding="utf-8") as fout:
        reader = csv.DictReader(fin)
        if not reader.fieldnames or column not in reader.fieldnames or "sensor_id" not in reader.fieldnames:
            raise DataError(f"{args.input}: needs sensor_id and {column} columns")
        writer = csv.DictWriter(fout, fieldnames=[*reader.fieldnames, "calibrated", "warmup"], lineterminator="\n")
        writer.writeheader()
        for row in reader:
            buf = buffers.setdefault(row["sensor_id"], deque(maxlen=n))
            reading = data._reading(row[column])
            valid = np.isfinite(reading) and reading >= 0
            if valid:
                buf.append(reading)
            if valid and len(buf) == n:
                row["calibrated"] = repr(float(model.predict(np.array(buf))))
                row["warmup"] = 0
            else:
                row["calibrated"] = row[column]
                row["warmup"] = int(len(buf) < n)
            writer.writerow(row)
            rows += 1
    _emit({"output": args.output, "rows": rows})


def cmd_bins(args, cfg):
    layout = binning.uniform_layout(args.n, args.z or binning.log_bin_count(args.n)) if args.uniform else binning.bin_layout(args.n)
    print(f"{'j':>3} {'first':>6} {'last':>6} {'width':>6}")
    for j, first, last, width in layout.rows():
        print(f"{j:>3} {first:>6} {last:>6} {width:>6}")
    print(json.dumps(layout.to_dict()))
    _write_json(_out_dir(cfg) / "bins.json", {**layout.to_dict(), "run_config": cfg})


def cmd_profile(args, cfg):
    variants = list(VARIANTS) if "all" in args.variant else args.variant
    reports = [metrics.profile(ModelConfig(variant=v, n=n, d=args.d, heads=args.heads)) for v in variants for n in args.n]
    rows = metrics.profile_rows(variants, args.n, d=args.d, heads=args.heads)
    out = _out_dir(cfg)
    _write_json(out / "profile.json", {"profiles": reports, "run_config": cfg})
    with open(out / "profile.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _emit(reports)


ABLATION_COLUMNS = (
    "binning", "embedding", "aggregator", "params", "flops_total",
    "best_epoch", "val_rmse", "test_rmse", "test_mae", "raw_rmse", "raw_mae",
)  # fmt: skip


def run_ablation(csv_path, base_config, tcfg, feature="pm10"):
    """Train every binning x embedding x aggregator cell; returns one dict per cell."""
    splits, _, _ = data.load_splits(csv_path, feature, base_config.n)
    rows = []
    for b, e, a in itertools.product(("uniform", "log"), ("local", "local_global"), ("ffn", "linear")):
        cfg = replace(base_config, variant="tesla", binning=b, embedding=e, aggregator=a)
        model, trace = train(cfg, tcfg, splits["train"], splits["validation"])
        rep = evaluate(model, *splits["test"])
        rows.append(
            {
                "binning": b, "embedding": e, "aggregator": a,
                "params": rep.params, "flops_total": rep.flops["total"],
                "best_epoch": trace.best_epoch + 1, "val_rmse": min(trace.val_rmse),
                "test_rmse": rep.rmse, "test_mae": rep.mae, "raw_rmse": rep.raw_rmse, "raw_mae": rep.raw_mae,
            }
        )  # fmt: skip
        log.info("ablation %s/%s/%s test_rmse=%.4f", b, e, a, rep.rmse)
    return rows


def cmd_ablate(args, cfg):
    rows = run_ablation(args.data, model_config(cfg), train_config(cfg), cfg["feature"])
    out = _out_dir(cfg)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "ablation_run_config.json", cfg)
    _emit(rows)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
    "bins": cmd_bins,
    "profile": cmd_profile,
    "ablate": cmd_ablate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = run_config(args)
        COMMANDS[args.command](args, cfg)
    except CalibrationError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"usage: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
