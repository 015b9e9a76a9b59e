"""Single entry point exposing the whole lab as subcommands.

Exit codes: 0 success, 1 runtime failure with a diagnostic on stderr,
2 usage or validation error. Every file-producing run emits a manifest
(JSON next to the primary output by default) recording the resolved
config, seeds, input/output hashes and wall-clock, so runs are diffable
and reproducible.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import configfile as cfgmod
from . import logtemplate as lt
from . import model as mdl
from . import pipeline as pl
from . import synthgen as sg
from .errors import ConfigError, ImpactLabError, MalformedLine

SEED_ENV_VAR = "IMPACTLAB_SEED"


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(path, *, subcommand: str, config: dict, seeds: dict,
                    inputs: list, outputs: list, started: float) -> None:
    doc = {
        "version": 1,
        "subcommand": subcommand,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).exists()},
        "outputs": {str(p): _sha256(p) for p in outputs if p and Path(p).exists()},
        "wall_clock_s": time.monotonic() - started,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seed_or_env(flag_value, default: int) -> int:
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        return int(env)
    return default


def _resolved_values(args, extra_overrides: dict | None = None) -> dict[str, str]:
    file_values = (
        cfgmod.load_flat_config(args.config) if getattr(args, "config", None) else {}
    )
    return cfgmod.resolve(file_values, extra_overrides or {})


def _maybe_print_config(args, values: dict[str, str]) -> bool:
    if getattr(args, "print_config", False):
        sys.stdout.write(cfgmod.render_config(values))
        return True
    return False


def _apply_jobs(args) -> None:
    jobs = getattr(args, "jobs", None)
    if jobs:
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(limits=jobs)
        except ImportError:
            print("warning: threadpoolctl unavailable, --jobs ignored", file=sys.stderr)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row[f]) for f in fields])


# ---------------------------------------------------------------------------
# subcommands


def cmd_templates(args) -> int:
    started = time.monotonic()
    lines = lt.read_log_file(args.logs)
    catalog = lt.TemplateCatalog()
    for line in lines:
        catalog.assign(lt.mask_variables(line))
    doc = {"version": 1, "templates": list(catalog.templates)}
    if args.strict:
        doc["strict"] = True
    with open(args.catalog, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, separators=(",", ":")) + "\n")
    if not lines:
        print("warning: no messages found; wrote an empty catalog", file=sys.stderr)
    print(f"catalog: {catalog.size} templates from {len(lines)} messages")
    manifest = args.manifest or f"{args.catalog}.manifest.json"
    _write_manifest(
        manifest, subcommand="templates",
        config={"strict": bool(args.strict)}, seeds={},
        inputs=[args.logs], outputs=[args.catalog], started=started,
    )
    return 0


def cmd_gen(args) -> int:
    started = time.monotonic()
    seed = _seed_or_env(args.seed, 0)
    values = _resolved_values(args, {"gen.seed": str(seed)})
    if _maybe_print_config(args, values):
        return 0
    config = cfgmod.build_gen_config(values)
    train, evl = sg.build_dataset(config, args.train, args.eval, seed)
    sg.write_dataset(args.out_train, train, window=config.window)
    sg.write_dataset(args.out_eval, evl, window=config.window)
    print(
        f"generated {len(train)} train / {len(evl)} eval samples "
        f"(M={sg.TOTAL_TEMPLATES}, W={config.window}, seed={seed})"
    )
    manifest = args.manifest or f"{args.out_train}.manifest.json"
    _write_manifest(
        manifest, subcommand="gen", config=dict(values),
        seeds={"gen": seed}, inputs=[args.config],
        outputs=[args.out_train, args.out_eval], started=started,
    )
    return 0


def _model_values_overrides(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    mapping = {
        "variant": "model.variant",
        "epochs": "train.epochs",
        "lr": "train.lr",
        "batch_size": "train.batch_size",
        "val_fraction": "train.val_fraction",
        "patience": "train.patience",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    return overrides


def cmd_train(args) -> int:
    started = time.monotonic()
    overrides = _model_values_overrides(args)
    overrides["train.seed"] = str(_seed_or_env(args.seed, 0))
    values = _resolved_values(args, overrides)
    if _maybe_print_config(args, values):
        return 0
    samples, header = sg.read_dataset(args.train)
    model_config = cfgmod.build_model_config(values, int(header["M"]), int(header["W"]))
    train_config = cfgmod.build_train_config(values)
    result = pl.train(samples, model_config, train_config)
    mdl.save_checkpoint(args.checkpoint, result.params, model_config, result.scaler)
    if args.loss_curve:
        rows = []
        for epoch, loss in enumerate(result.loss_curve):
            val = result.val_curve[epoch] if result.val_curve else ""
            rows.append({"epoch": epoch, "train_loss": loss, "val_loss": val})
        _write_csv(args.loss_curve, rows, ["epoch", "train_loss", "val_loss"])
    status = pl.classify_convergence(result.loss_curve)
    print(
        f"trained {model_config.variant} for {len(result.loss_curve)} epochs: "
        f"final loss {result.loss_curve[-1]:.6f} ({status})"
    )
    manifest = args.manifest or f"{args.checkpoint}.manifest.json"
    _write_manifest(
        manifest, subcommand="train", config=dict(values),
        seeds={"train": train_config.seed}, inputs=[args.train, args.config],
        outputs=[args.checkpoint, args.loss_curve], started=started,
    )
    return 0


EVAL_FIELDS = ["pattern", "target", "variant", "seed", "mse", "rel_err_mean", "ci95", "n"]
SAMPLE_FIELDS = ["id", "pattern", "ttr_true", "ttr_pred", "ttr_rel_err",
                 "v_true", "v_pred", "v_rel_err"]


def cmd_eval(args) -> int:
    started = time.monotonic()
    params, config, scaler = mdl.load_checkpoint(args.checkpoint)
    samples, _header = sg.read_dataset(args.data)
    report = pl.evaluate(samples, params, config, scaler)
    rows = [
        {
            "pattern": r.pattern, "target": r.target, "variant": config.variant,
            "seed": "", "mse": r.mse, "rel_err_mean": r.rel_err_mean,
            "ci95": r.ci95, "n": r.n,
        }
        for r in report.rows
    ]
    _write_csv(args.report, rows, EVAL_FIELDS)
    if args.json:
        doc = {
            "variant": config.variant,
            "rows": [asdict(r) for r in report.rows],
            "excluded_zero_truth": report.excluded_zero_truth,
        }
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    if args.per_sample:
        _write_csv(args.per_sample, report.per_sample, SAMPLE_FIELDS)
    for r in report.rows:
        if r.pattern == "overall":
            print(f"overall {r.target}: rel_err {r.rel_err_mean:.4f} "
                  f"+- {r.ci95:.4f} (n={r.n})")
    manifest = args.manifest or f"{args.report}.manifest.json"
    _write_manifest(
        manifest, subcommand="eval", config={"checkpoint": str(args.checkpoint)},
        seeds={}, inputs=[args.data, args.checkpoint],
        outputs=[args.report, args.json, args.per_sample], started=started,
    )
    return 0


ABLATION_FIELDS = EVAL_FIELDS + ["status"]


def cmd_ablation(args) -> int:
    started = time.monotonic()
    overrides = _model_values_overrides(args)
    values = _resolved_values(args, overrides)
    if _maybe_print_config(args, values):
        return 0
    seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip()]
    if not seeds:
        raise ConfigError("--seeds must list at least one integer")
    variants = [tok.strip() for tok in args.variants.split(",") if tok.strip()]
    samples_train, header = sg.read_dataset(args.train)
    samples_eval, _ = sg.read_dataset(args.eval)
    base_config = cfgmod.build_model_config(values, int(header["M"]), int(header["W"]))
    train_config = cfgmod.build_train_config(values)
    result = pl.run_ablation(samples_train, samples_eval, base_config,
                             train_config, seeds, variants)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "ablation.csv"
    _write_csv(table_path, result.csv_rows(), ABLATION_FIELDS)
    summary = {
        "seeds": seeds,
        "variants": variants,
        "statuses": {
            f"{run.variant}/seed{run.seed}": run.status for run in result.runs
        },
        "mean_rel_err": {
            f"{variant}/{pattern}/{target}": result.mean_rel_err(variant, pattern, target)
            for variant in variants
            for pattern in sg.PATTERNS
            for target in pl.TARGETS
        },
    }
    summary_path = out_dir / "summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    for run in result.runs:
        note = f" (diverged at epoch {run.diverged_epoch})" if run.status == "diverged" else ""
        print(f"{run.variant} seed {run.seed}: {run.status}{note}")
    manifest = args.manifest or str(table_path) + ".manifest.json"
    _write_manifest(
        manifest, subcommand="ablation", config=dict(values),
        seeds={"train": seeds}, inputs=[args.train, args.eval, args.config],
        outputs=[table_path, summary_path], started=started,
    )
    return 0


def cmd_predict(args) -> int:
    started = time.monotonic()
    params, config, scaler = mdl.load_checkpoint(args.checkpoint)
    if args.catalog:
        catalog = lt.TemplateCatalog.load(args.catalog)
        strict = _catalog_is_strict(args.catalog)
        frozen = catalog.freeze(strict=strict)
        if frozen.size != config.m:
            raise ConfigError(
                f"catalog provides M={frozen.size} templates but the checkpoint "
                f"expects M={config.m}"
            )
    samples, _header = sg.read_dataset(args.window)
    if not 0 <= args.index < len(samples):
        raise ConfigError(f"--index {args.index} outside 0..{len(samples) - 1}")
    sample = samples[args.index]
    pred = pl.predict_samples([sample], params, config, scaler)[0]
    print(pl.summarize_prediction(pred))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"ttr_min": pred.ttr_minutes, "v_loss": pred.v_loss}, fh)
            fh.write("\n")
        manifest = args.manifest or f"{args.out}.manifest.json"
        _write_manifest(
            manifest, subcommand="predict",
            config={"checkpoint": str(args.checkpoint), "index": args.index},
            seeds={}, inputs=[args.window, args.checkpoint],
            outputs=[args.out], started=started,
        )
    elif args.manifest:
        _write_manifest(
            args.manifest, subcommand="predict",
            config={"checkpoint": str(args.checkpoint), "index": args.index},
            seeds={}, inputs=[args.window, args.checkpoint],
            outputs=[], started=started,
        )
    return 0


def _catalog_is_strict(path) -> bool:
    with open(path, "r", encoding="utf-8") as fh:
        return bool(json.load(fh).get("strict", False))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="impactlab",
        description="Predict service impact (time to recovery, lost traffic "
                    "volume) of network failures from syslog and traffic data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, with_config: bool = True):
        if with_config:
            p.add_argument("--config", help="flat section.key = value config file")
            p.add_argument("--print-config", action="store_true",
                           help="print the resolved config and exit")
        p.add_argument("--manifest", help="run manifest path (default: next to output)")
        p.add_argument("--jobs", type=_positive_int,
                       help="cap worker/BLAS threads")

    p = sub.add_parser("templates", help="build a template catalog from syslog")
    p.add_argument("--logs", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--strict", action="store_true",
                   help="mark the catalog strict: unknown patterns raise at use")
    common(p, with_config=False)
    p.set_defaults(func=cmd_templates)

    p = sub.add_parser("gen", help="generate a synthetic labeled dataset")
    p.add_argument("--train", type=_positive_int, required=True)
    p.add_argument("--eval", type=_positive_int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-eval", required=True)
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--train", required=True, help="training dataset (jsonl)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--loss-curve", help="write epoch,train_loss,val_loss CSV")
    p.add_argument("--variant", choices=mdl.VARIANTS)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True, help="metrics CSV path")
    p.add_argument("--json", help="metrics JSON path")
    p.add_argument("--per-sample", help="per-sample prediction dump CSV")
    common(p, with_config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", help="train and compare all variants")
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--variants", default=",".join(pl.ABLATION_VARIANTS))
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=_positive_int)
    common(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("predict", help="predict impact for one stored window")
    p.add_argument("--window", required=True, help="dataset file with the window")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--catalog", help="template catalog to cross-check M")
    p.add_argument("--out", help="write the prediction as JSON")
    common(p, with_config=False)
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_jobs(args)
    try:
        return args.func(args)
    except (ConfigError, MalformedLine) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ImpactLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
