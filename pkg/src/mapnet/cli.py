"""Command-line front end.

Usage::

    mapnet train    --config run.json --out runs/a [--set mapping.d=1024] [--resume ckpt]
    mapnet eval     --checkpoint runs/a/checkpoint.mnck [--out runs/a]
    mapnet finetune --config ft.json --out runs/ft
    mapnet ablate   --config run.json --out runs/abl [--cells task_only full]
    mapnet probe    --config run.json --out runs/probe
    mapnet report   --runs runs/a runs/b --out table.csv

Exit codes: 0 success, 1 configuration or usage error, 2 data or file
format error, 3 numerical abort.  The resolved config is echoed to stderr
and written next to the run's outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .config import dumps, load_config, parse_override, set_dotted, validate_config
from .errors import ConfigError, DataError, NumericalAbort
from .tensor import UsageError

log = logging.getLogger("mapnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
VERBS = ("train", "eval", "finetune", "ablate", "probe", "report")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config_required=True) -> None:
    p.add_argument("--config", required=config_required, help="run config (JSON)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, value parsed as JSON when possible (repeatable)")
    p.add_argument("--seed", type=int, help="set seeds.init, seeds.data and seeds.noise")
    p.add_argument("--threads", type=int, help="BLAS threads (default: $MAPNET_THREADS)")
    p.add_argument("--precision", choices=("f32", "f64"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mapnet", description="Train networks through a latent-to-parameter mapping.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", metavar="{" + ",".join(VERBS) + "}", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train one configuration")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--split", default="test")
    p.add_argument("--prune", type=float, default=None, help="magnitude-prune this fraction first")
    p.add_argument("--data", help="override data.path of the stored config")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("finetune", help="tune modulation vectors over frozen pretrained weights")
    _common(p)

    p = sub.add_parser("ablate", help="run an ablation grid with shared seeds")
    _common(p)
    p.add_argument("--cells", nargs="+", default=["task_only", "stab", "smooth", "align", "full"])
    p.add_argument("--alphas", nargs="*", type=float, default=None,
                   help="instead of loss cells, sweep mapping.alpha over these values")

    p = sub.add_parser("probe", help="train while logging parameter snapshots, then run PCA")
    _common(p)
    p.add_argument("--components", type=int, default=2)

    p = sub.add_parser("report", help="merge run directories into a comparison table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", help="CSV path (default: stdout)")
    return parser


def _threads(args) -> int | None:
    n = getattr(args, "threads", None)
    if n is None and os.environ.get("MAPNET_THREADS"):
        try:
            n = int(os.environ["MAPNET_THREADS"])
        except ValueError:
            raise ConfigError(f"MAPNET_THREADS must be an integer, got {os.environ['MAPNET_THREADS']!r}",
                              [("MAPNET_THREADS", "not an integer")]) from None
    if n is not None and n < 1:
        raise ConfigError("--threads must be >= 1", [("threads", "must be >= 1")])
    return n


def resolve(args) -> dict:
    """Config file plus ``--set``/``--seed``/``--precision`` overrides, validated."""
    overrides = [parse_override(s) for s in args.set]
    if args.seed is not None:
        overrides += [(f"seeds.{k}", args.seed) for k in ("init", "data", "noise")]
    if args.precision:
        overrides.append(("precision", args.precision))
    cfg = load_config(args.config, overrides)
    print(dumps(cfg), file=sys.stderr)
    return cfg


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- verbs --------------------------------------------------------------------

def cmd_train(args) -> int:
    from .finetune import export_pretrained
    from .trainer import train

    cfg = resolve(args)
    res = train(cfg, out_dir=args.out, resume=args.resume)
    if args.out and cfg["mode"] == "baseline":
        # the weights of a directly trained network are the input format of `finetune`
        named = dict(zip(res.model.spec.names, res.model.inference_params()))
        export_pretrained(os.path.join(args.out, "pretrained.bin"), os.path.join(args.out, "pretrained.json"), named)
    print(json.dumps({"step": res.step, "epoch": res.epoch, "trainable": res.meta["trainable_count"],
                      "train": res.final("train"), "test": res.final("test")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_dataset, load_model

    model, cfg, meta = load_model(args.checkpoint)
    cfg = {k: v for k, v in cfg.items() if not k.startswith("_")}
    if args.data:
        set_dotted(cfg, "data.path", args.data)
    cfg = validate_config(cfg)
    ds = load_dataset(cfg)
    if args.split not in ds:
        raise DataError(f"dataset has no {args.split!r} split")
    prune = cfg["eval"]["prune"] if args.prune is None else args.prune
    out = {"checkpoint": args.checkpoint, "split": args.split, "step": meta.get("step"),
           "metrics": evaluate(model, ds, args.split, batch_size=cfg["train"]["eval_batch"])}
    if prune:
        out["pruned"] = {"fraction": prune,
                         "metrics": evaluate(model, ds, args.split, prune=prune, batch_size=cfg["train"]["eval_batch"])}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "eval.json"), out)
    print(json.dumps(out))
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .finetune import build_finetune, finetune
    from .trainer import evaluate, load_dataset

    cfg = resolve(args)
    ds = load_dataset(cfg)
    # accuracy of the untouched backbone, for comparison with the tuned one
    frozen_model = build_finetune(cfg, task=ds.task)
    frozen_model.alphas = {k: 0.0 for k in frozen_model.alphas}
    before = evaluate(frozen_model, ds, "test", batch_size=cfg["train"]["eval_batch"]) if "test" in ds else {}
    res = finetune(cfg, ds, out_dir=args.out)
    summary = {"frozen": before, "tuned": res.final("test"), "trainable": res.meta["trainable_count"],
               "outside_checksums": res.model.outside_checksums()}
    if args.out:
        _write_json(os.path.join(args.out, "finetune.json"), summary)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import ablation_sweep

    cfg = resolve(args)
    if args.alphas:
        grid = {f"alpha={a:g}": {"mapping.alpha": a} for a in args.alphas}
    else:
        grid = args.cells
    csv_path = os.path.join(args.out, "ablation.csv") if args.out else None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    try:
        rows = ablation_sweep(cfg, grid, out_dir=args.out, csv_path=csv_path)
    except KeyError as exc:
        raise ConfigError(f"unknown ablation cell {exc.args[0]!r}", [("cells", str(exc.args[0]))]) from None
    for r in rows:
        print(json.dumps(r))
    return EXIT_OK


def cmd_probe(args) -> int:
    from .probe import SnapshotLog, pca, report
    from .trainer import build_model, load_dataset, train, _dtype
    from . import tensor as T

    cfg = resolve(args)
    ds = load_dataset(cfg)
    with T.default_dtype(_dtype(cfg)):
        model = build_model(cfg, ds.task)
    snaps = SnapshotLog(model.spec.names, cfg["probe"]["every"], cfg["probe"]["cap_mb"])
    train(cfg, ds, out_dir=args.out, hooks=[snaps.hook], model=model)
    analysis = pca(snaps, args.components)
    out_dir = os.path.join(args.out, "probe") if args.out else "probe"
    paths = report(analysis, snaps.steps, out_dir)
    print(json.dumps({"snapshots": len(snaps), "files": paths,
                      "pc1_ratio": {k: float(v.ratios[0]) for k, v in analysis.items()}}))
    return EXIT_OK


def _dataset_name(cfg: dict) -> str:
    da = cfg.get("data", {})
    if da.get("source") == "synth":
        return da.get("synth", {}).get("kind", "synth")
    base = os.path.basename(os.path.normpath(str(da.get("path", "data"))))
    return os.path.splitext(base)[0] or "data"


def _method_name(cfg: dict) -> str:
    if cfg.get("_kind") == "finetune":
        return "finetune"
    mode = cfg.get("mode", "?")
    if mode == "baseline":
        return "baseline"
    m, lo = cfg.get("mapping", {}), cfg.get("loss", {})
    parts = [mode]
    if m.get("variant", "mapped") != "mapped":
        parts.append(m["variant"])
    mask = lo.get("mask", [])
    parts.append("+".join(mask) if mask else "task")
    return "/".join(parts)


def collect_runs(runs) -> list[dict]:
    """Final test metric and trainable count of each run directory."""
    rows = []
    for run in runs:
        cpath, mpath = os.path.join(run, "config.json"), os.path.join(run, "metrics.jsonl")
        try:
            with open(cpath, encoding="utf-8") as fh:
                cfg = json.load(fh)
            with open(mpath, encoding="utf-8") as fh:
                recs = [json.loads(line) for line in fh if line.strip()]
        except FileNotFoundError as exc:
            raise DataError(f"{run}: not a run directory ({exc.filename} missing)") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{run}: unreadable run log: {exc}") from None
        final = next((r for r in reversed(recs) if "test" in r), None)
        if final is None:
            raise DataError(f"{run}: no evaluated epoch in {mpath}")
        test = final["test"]
        metric = test.get("accuracy", test.get("mse"))
        rows.append({"method": _method_name(cfg), "params": final.get("trainable"),
                     "dataset": _dataset_name(cfg), "metric": metric})
    return rows


def merge_table(rows: list[dict]) -> tuple[list[str], list[list]]:
    """Pivot to one row per (method, #params) with a column per dataset."""
    datasets: list[str] = []
    table: dict[tuple, dict] = {}
    for r in rows:
        if r["dataset"] not in datasets:
            datasets.append(r["dataset"])
        table.setdefault((r["method"], r["params"]), {})[r["dataset"]] = r["metric"]
    header = ["method", "params"] + datasets
    body = [[m, p] + [vals.get(d, "") for d in datasets] for (m, p), vals in table.items()]
    return header, body


def cmd_report(args) -> int:
    header, body = merge_table(collect_runs(args.runs))
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(body)
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "finetune": cmd_finetune, "ablate": cmd_ablate,
             "probe": cmd_probe, "report": cmd_report}


def main(argv=None) -> int:
    """Parse ``argv``, run the verb and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args)
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                return _COMMANDS[args.verb](args)
        return _COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        for key, msg in exc.errors:
            print(f"  {key}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        if exc.dump:
            print(json.dumps(exc.dump, default=lambda o: np.asarray(o).tolist()), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
