"""Command-line harness.

Exit codes: 0 success, 2 configuration or schema error, 3 runtime or numeric
error, 4 grid finished with failed cells.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import tensor as tt
from .data import SyntheticDatasetSpec, generate_dataset, load_dataset
from .pipeline import (DistillPlan, GridSpec, StageChain, TrainSettings, accuracy, config_hash, evaluate,
                       format_table, pretrain_teacher, read_metrics_csv, run_ablation_grid, run_sequential,
                       train_stage, write_grid_outputs)
from .relations import PAIRS, compute_relations, relation_to_csv
from .schemas import TRAIN_SETTINGS, VIT_CONFIG, SchemaError, validate
from .serialize import CheckpointError
from .vit import ConfigError, ViTConfig, ViTModel

log = logging.getLogger("vitdistill")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 2, 3, 4


class UsageError(ConfigError):
    pass


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{path}: no such file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"{path} is not valid JSON: {exc}") from exc


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _fresh_dir(path: Path, force: bool) -> Path:
    """Create ``path``; an existing non-empty directory is only replaced with ``force``."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_data(path, limit: int | None = None):
    if not Path(path, "index.json").is_file():
        raise UsageError(f"{path} is not a dataset directory (missing index.json)")
    ds = load_dataset(path)
    if limit is not None:
        ds = ds.subset(np.arange(min(limit, len(ds))))
    return ds


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticDatasetSpec(num_samples=args.num_samples, image_size=args.image_size,
                                num_classes=args.num_classes, generator=args.generator, seed=args.seed,
                                channels=args.channels, noise=args.noise)
    out = _fresh_dir(Path(args.out), args.force)
    generate_dataset(spec, out)
    print(out)
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    cfg_doc = _read_json(args.model)
    validate(cfg_doc, VIT_CONFIG)
    settings_doc = _read_json(args.settings) if args.settings else {}
    validate(settings_doc, TRAIN_SETTINGS)
    settings = TrainSettings.from_dict(settings_doc)
    data = _load_data(args.data, args.limit)
    out = _fresh_dir(Path(args.out), args.force)
    model = pretrain_teacher(ViTConfig.from_dict(cfg_doc), data, settings, seed=settings.seed)
    model.save(out / "checkpoint")
    info = {"model": cfg_doc, "settings": asdict(settings), "data": str(args.data),
            "train_accuracy": accuracy(model, data)}
    if args.test_data:
        info["test_accuracy"] = accuracy(model, _load_data(args.test_data))
    _write_json(out / "teacher.json", info)
    print(json.dumps({k: info[k] for k in info if k.endswith("accuracy")}))
    print(out / "checkpoint")
    return EXIT_OK


def cmd_distill(args) -> int:
    plan = DistillPlan.from_dict(_read_json(args.plan))
    data = _load_data(args.data, args.limit)
    run_dir = _fresh_dir(Path(args.runs) / f"distill-{plan.config_hash()}", args.force)
    _write_json(run_dir / "run.json", {"command": "distill", "config_hash": plan.config_hash(),
                                       "data": str(args.data), "limit": args.limit})
    train_stage(plan, data, run_dir)
    print(run_dir)
    return EXIT_OK


def cmd_chain(args) -> int:
    doc = _read_json(args.chain)
    chain = StageChain.from_dict(doc)
    data = _load_data(args.data, args.limit)
    h = config_hash(chain.to_dict())
    run_dir = _fresh_dir(Path(args.runs) / f"chain-{h}", args.force)
    _write_json(run_dir / "run.json", {"command": "chain", "config_hash": h, "data": str(args.data),
                                       "limit": args.limit, "chain": chain.to_dict()})
    run_sequential(chain, data, run_dir)
    print(run_dir)
    return EXIT_OK


def cmd_grid(args) -> int:
    spec = GridSpec.from_dict(_read_json(args.grid))
    data = _load_data(args.data, args.limit)
    eval_train = _load_data(args.eval_data) if args.eval_data else data
    test = _load_data(args.test_data)
    doc = {"grid": _read_json(args.grid), "data": str(args.data), "limit": args.limit}
    h = config_hash(doc)
    run_dir = _fresh_dir(Path(args.runs) / f"grid-{h}", args.force)
    _write_json(run_dir / "run.json", {"command": "grid", "config_hash": h, **doc,
                                       "eval_data": args.eval_data, "test_data": args.test_data})
    rows = run_ablation_grid(spec, data, eval_train, test, run_dir, workers=args.workers)
    print((run_dir / "table.txt").read_text(), end="")
    print(run_dir)
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        log.error("%d of %d grid cells failed", len(failed), len(rows))
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_eval(args) -> int:
    settings_doc = _read_json(args.settings) if args.settings else {}
    validate(settings_doc, TRAIN_SETTINGS)
    settings = TrainSettings.from_dict(settings_doc)
    model = ViTModel.load(args.checkpoint)
    train = _load_data(args.train_data, args.train_samples)
    test = _load_data(args.test_data)
    acc = evaluate(model, train, test, args.mode, settings)
    result = {"checkpoint": str(args.checkpoint), "mode": args.mode, "accuracy": acc,
              "train_samples": len(train), "test_samples": len(test), "settings": asdict(settings)}
    if args.out:
        out = Path(args.out)
        if out.exists() and not args.force:
            raise UsageError(f"{out} already exists; pass --force to overwrite it")
        _write_json(out, result)
    print(json.dumps({"mode": args.mode, "accuracy": acc}))
    return EXIT_OK


def _taps_from_npz(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with np.load(path) as z:
        missing = {"q", "k", "v"} - set(z.files)
        if missing:
            raise UsageError(f"{path} lacks arrays {sorted(missing)}")
        arrs = [np.asarray(z[n], dtype=np.float32) for n in ("q", "k", "v")]
    return tuple(a[None] if a.ndim == 3 else a for a in arrs)


def cmd_inspect_relations(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} already exists; pass --force to overwrite it")
    if args.taps:
        q, k, v = _taps_from_npz(args.taps)
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("give either --taps or both --checkpoint and --data")
        model = ViTModel.load(args.checkpoint)
        ds = _load_data(args.data)
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index {args.index} outside dataset of {len(ds)} samples")
        block = args.block or model.config.depth
        if not 1 <= block <= model.config.depth:
            raise UsageError(f"--block {block} outside [1, {model.config.depth}]")
        with tt.no_grad():
            _, taps = model.forward_with_taps(ds.images[args.index:args.index + 1], upto=block)
        bt = taps.block(block)
        q, k, v = bt.q.data, bt.k.data, bt.v.data
    if q.ndim != 4:
        raise UsageError(f"q/k/v must be [B, M, T, d] or [M, T, d], got {q.shape}")
    if not 0 <= args.head < q.shape[1]:
        raise UsageError(f"--head {args.head} outside [0, {q.shape[1]})")
    with tt.no_grad():
        rel = compute_relations(tt.Tensor(q), tt.Tensor(k), tt.Tensor(v), apply_softmax=not args.no_softmax,
                                pairs=(args.pair,), exclude_cls=args.exclude_cls)
    matrix = rel.get(args.pair).data[0, args.head]
    out.parent.mkdir(parents=True, exist_ok=True)
    relation_to_csv(matrix, out)
    print(f"{args.pair} head {args.head}: {matrix.shape[0]}x{matrix.shape[1]} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _grid_rows(run_dir: Path) -> list[dict]:
    rows = []
    for cell in sorted(run_dir.glob("cell_*")):
        res = cell / "result.json"
        if res.is_file():
            rows.append(json.loads(res.read_text()))
    return rows


def _stage_row(stage_dir: Path, label: str) -> dict:
    plan = json.loads((stage_dir / "plan.json").read_text())
    summary = json.loads((stage_dir / "summary.json").read_text())
    metrics = read_metrics_csv(stage_dir / "metrics.csv")
    strat = plan["loss_strategy"]
    if strat["kind"] == "feature":
        target = strat["feature_target"]
    elif strat["kind"] == "relation":
        target = "+".join(strat["relation_pairs"])
    else:
        target = "cls"
    s = plan["student_config"]
    row = {"run": label, "kind": strat["kind"], "target": target, "input": plan["input_mode"],
           "student": f"d{s['depth']}w{s['hidden_dim']}h{s['heads']}", "block": summary["target_block"],
           "steps": summary["steps"], "final_loss": summary["final_loss"]}
    if metrics:
        for key, value in metrics[-1].items():
            if key.startswith("loss_") and key != "loss_total" and value != "":
                row[key] = float(value)
    return row


def report_rows(run_dir) -> tuple[str, list[dict]]:
    """Rows describing one run directory, read only from files inside it."""
    run_dir = Path(run_dir)
    if (run_dir / "grid.json").is_file():
        return "grid", _grid_rows(run_dir)
    if (run_dir / "chain.json").is_file():
        stages = sorted(run_dir.glob("stage_*"), key=lambda p: int(p.name.split("_")[1]))
        return "chain", [_stage_row(p, f"{run_dir.name}/{p.name}") for p in stages
                         if (p / "summary.json").is_file()]
    if (run_dir / "summary.json").is_file():
        return "distill", [_stage_row(run_dir, run_dir.name)]
    raise UsageError(f"{run_dir} is not a distill, chain or grid run directory")


def _columns(rows: list[dict]) -> list[str]:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    tail = [c for c in ("accuracy", "final_loss", "status") if c in cols]
    return [c for c in cols if c not in tail] + tail


def cmd_report(args) -> int:
    sections = []
    merged: list[dict] = []
    for d in args.run_dirs:
        kind, rows = report_rows(d)
        if kind == "grid":
            sections.append(f"== {Path(d).name} ({len(rows)} rows)\n" + format_table(rows, _columns(rows)))
        else:
            merged.extend(rows)
    if merged:
        sections.append(f"== runs ({len(merged)} rows)\n" + format_table(merged, _columns(merged)))
    text = "\n".join(sections)
    if args.out:
        out = Path(args.out)
        if out.exists() and not args.force:
            raise UsageError(f"{out} already exists; pass --force to overwrite it")
        out.write_text(text)
    if args.csv:
        out = Path(args.csv)
        if out.exists() and not args.force:
            raise UsageError(f"{out} already exists; pass --force to overwrite it")
        rows = [dict(r, source=str(d)) for d in args.run_dirs for r in report_rows(d)[1]]
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=_columns(rows))
            w.writeheader()
            w.writerows(rows)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitdistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num-samples", type=int, required=True)
    g.add_argument("--image-size", type=int, default=16)
    g.add_argument("--num-classes", type=int, default=4)
    g.add_argument("--generator", choices=("shapes", "gaussian_textures"), default="shapes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--noise", type=float, default=0.15)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain-teacher", help="supervised toy teacher")
    t.add_argument("--model", required=True, help="ViT config JSON")
    t.add_argument("--settings", help="training settings JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--test-data")
    t.add_argument("--limit", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_pretrain_teacher)

    for name, arg, func, helptext in (("distill", "plan", cmd_distill, "run one distillation stage"),
                                      ("chain", "chain", cmd_chain, "run a sequential distillation chain")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument(arg, help=f"{arg} JSON")
        c.add_argument("--data", required=True)
        c.add_argument("--limit", type=int, help="use only the first N samples")
        c.add_argument("--runs", default="runs", help="parent of the run directory")
        c.add_argument("--force", action="store_true")
        c.set_defaults(func=func)

    c = sub.add_parser("grid", help="run an ablation grid")
    c.add_argument("grid", help="grid JSON")
    c.add_argument("--data", required=True, help="distillation data")
    c.add_argument("--test-data", required=True)
    c.add_argument("--eval-data", help="labelled data for evaluation training (default: --data)")
    c.add_argument("--limit", type=int)
    c.add_argument("--runs", default="runs")
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_grid)

    e = sub.add_parser("eval", help="linear probe or fine-tune a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--train-data", required=True)
    e.add_argument("--test-data", required=True)
    e.add_argument("--train-samples", type=int)
    e.add_argument("--mode", choices=("linear_probe", "fine_tune"), default="fine_tune")
    e.add_argument("--settings", help="training settings JSON")
    e.add_argument("--out")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("inspect-relations", help="dump one relation matrix to CSV")
    r.add_argument("--checkpoint")
    r.add_argument("--data")
    r.add_argument("--taps", help="npz with q, k, v arrays instead of a checkpoint")
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--block", type=int, help="1-based block (default: last)")
    r.add_argument("--pair", choices=PAIRS, default="QK")
    r.add_argument("--head", type=int, default=0)
    r.add_argument("--no-softmax", action="store_true")
    r.add_argument("--exclude-cls", action="store_true")
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_inspect_relations)

    m = sub.add_parser("report", help="merge run directories into aligned tables")
    m.add_argument("run_dirs", nargs="+")
    m.add_argument("--out", help="also write the text table here")
    m.add_argument("--csv", help="also write merged rows as CSV")
    m.add_argument("--force", action="store_true")
    m.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (tt.NonFiniteError, tt.ShapeError, tt.ContractError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
