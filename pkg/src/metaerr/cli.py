"""Command line entry point: ``metaerr {gen-data,run,report,check-gradients}``.

Failures exit with status 1 and print one JSON line to stderr, e.g.
``{"error": "ConfigError", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import save_cache, save_csv
from .experiment import GENERATORS, ExperimentConfig, emit_report, run_experiment
from .model import HEAD_FOR_LOSS, LayerSpec, check_gradients

GRAD_TOL = 1e-4


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no such file: {path}") from None


def cmd_gen_data(args) -> int:
    """Config: ``{"generator": name, "params": {...}, "out": path, "format": "csv"|"cache"}``."""
    cfg = _read_json(args.config)
    name = cfg.get("generator")
    if name not in GENERATORS:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
    ds = GENERATORS[name](**cfg.get("params", {}))
    out = Path(cfg.get("out") or f"{name}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg.get("format", "csv") == "cache":
        save_cache(ds, out)
    else:
        schema = save_csv(ds, out)
        schema_out = out.with_suffix(".schema.json")
        schema_out.write_text(json.dumps({
            "features": list(schema.features),
            "task": schema.task,
            "label": schema.label,
            "mask_columns": list(schema.mask_columns),
            "mask_shape": list(schema.mask_shape) if schema.mask_shape else None,
            "n_classes": schema.n_classes,
            "id_column": schema.id_column,
        }, indent=2) + "\n")
    print(json.dumps({"out": str(out), "n": len(ds), "task": ds.task}))
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    manifest = run_experiment(cfg, args.out)
    statuses = {r["seed"]: r["status"] for r in manifest["seeds"]}
    print(json.dumps({"out": str(args.out or cfg.output_dir or "runs"), "seeds": statuses}))
    return 0 if any(s == "ok" for s in statuses.values()) else 1


def cmd_report(args) -> int:
    sys.stdout.write(emit_report(args.run_dir))
    return 0


def cmd_check_gradients(args) -> int:
    """Spec file: one object or a list of ``{"widths", "head", "loss", "seed"}``."""
    raw = _read_json(args.spec)
    entries = raw if isinstance(raw, list) else [raw]
    worst = 0.0
    for e in entries:
        loss = e.get("loss") or {v: k for k, v in HEAD_FOR_LOSS.items()}[e.get("head", "softmax")]
        spec = LayerSpec(tuple(e["widths"]), e.get("head", HEAD_FOR_LOSS[loss]), float(e.get("dropout_rate", 0.0)))
        err = float(check_gradients(spec, loss, int(e.get("seed", 0))))
        worst = max(worst, err)
        print(json.dumps({"widths": list(spec.widths), "head": spec.head, "loss": loss,
                          "max_rel_error": err, "ok": bool(err < GRAD_TOL)}))
    return 0 if worst < GRAD_TOL else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaerr", description="Meta-model error prediction experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    g.add_argument("--config", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="summarise run directories")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)

    c = sub.add_parser("check-gradients", help="compare backprop with finite differences")
    c.add_argument("--spec", required=True)
    c.set_defaults(func=cmd_check_gradients)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
