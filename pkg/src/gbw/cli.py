"""``gbw`` command line: generate, train, ablate, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, resolve_config, scene_spec, train_plan, with_seed, with_strategy
from .errors import DivergedRunError, InvalidInputError
from .synth import dataset_class_statistics, generate, load_dataset, save_dataset
from .trainer import AblationTable, train

log = logging.getLogger("gbw")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = time.gmtime(int(epoch)) if epoch is not None else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(command, cfg, config_path, out, **extra) -> dict:
    return {
        "tool": "gbw",
        "tool_version": __version__,
        "command": command,
        "timestamp": _timestamp(),
        "config_path": None if config_path is None else str(config_path),
        "output_directory": str(out),
        "config": cfg,
        **extra,
    }


def _config(args) -> dict:
    if args.config is None:
        return resolve_config({}, args.seed)
    return load_config(args.config, args.seed)


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = scene_spec(cfg)
    files = {}
    for domain, key in (("source", "n_source_images"), ("target", "n_target_images")):
        path = out / f"{domain}.gbwd"
        save_dataset(path, spec, generate(spec, cfg["data"][key], domain), domain)
        files[path.name] = _sha256(path)
    man = _manifest("generate", cfg, args.config, out, scene=spec.to_dict(), files=files)
    (out / "manifest.json").write_text(_dump(man))
    log.info("wrote datasets to %s", out)
    return EXIT_OK


# ---------------------------------------------------------------- train

def _load_pair(dataset_dir):
    if dataset_dir is None:
        raise InvalidInputError("data.dataset_dir: required for training (or pass --dataset)")
    d = Path(dataset_dir)
    paths = [d / "source.gbwd", d / "target.gbwd"]
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"dataset file not found: {p}")
    (spec, src, dom_s), (_, tgt, dom_t) = load_dataset(paths[0]), load_dataset(paths[1])
    if (dom_s, dom_t) != ("source", "target"):
        raise InvalidInputError(f"{d}: containers hold domains {dom_s}/{dom_t}")
    if any(s.labels is None for s in src + tgt):
        raise InvalidInputError(f"{d}: source and evaluation target labels are required")
    return spec, src, tgt, {p.name: _sha256(p) for p in paths}


def _write_run(out: Path, cfg, config_path, spec, src, tgt, hashes, plan=None):
    """Train and write a complete run directory atomically."""
    plan = plan or train_plan(cfg)
    stats = dataset_class_statistics(src, spec.n_classes)
    model, record = train(plan, src, tgt)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        man = _manifest("train", cfg, config_path, out, scene=spec.to_dict(),
                        plan=plan.to_dict(), datasets=hashes,
                        source_prevalence=stats.pixel_freq.tolist())
        (tmp / "manifest.json").write_text(_dump(man))
        (tmp / "steps.csv").write_text(record.steps_csv())
        (tmp / "metrics.json").write_text(_dump(record.metrics))
        (tmp / "record.json").write_text(record.to_json())
        model.save(tmp / "model.gbwm")
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return record


def _check_fresh(out: Path):
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"output directory {out} exists and is not empty")
    if out.exists():
        out.rmdir()


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.dataset is not None:
        cfg["data"]["dataset_dir"] = str(args.dataset)
    if args.strategy is not None or args.lam is not None:
        cfg = with_strategy(cfg, args.strategy or cfg["train"]["strategy"], args.lam)
        cfg = resolve_config(cfg)
    out = Path(args.out)
    _check_fresh(out)
    spec, src, tgt, hashes = _load_pair(cfg["data"]["dataset_dir"])
    record = _write_run(out, cfg, args.config, spec, src, tgt, hashes)
    log.info("run written to %s (mIoU %.4f)", out, record.metrics["miou"])
    return EXIT_OK


# ---------------------------------------------------------------- ablate

def _cell_name(lam) -> str:
    return "uniform" if lam is None else f"gbw-lam{lam!r}"


def _ablation_job(job):
    cfg, config_path, lam, seed, out = job
    cfg = with_seed(cfg, seed)
    cfg = with_strategy(cfg, "uniform") if lam is None else with_strategy(cfg, "gbw", lam)
    if cfg["data"]["dataset_dir"] is not None:
        spec, src, tgt, hashes = _load_pair(cfg["data"]["dataset_dir"])
    else:
        spec = scene_spec(cfg)
        src = generate(spec, cfg["data"]["n_source_images"], "source")
        tgt = generate(spec, cfg["data"]["n_target_images"], "target")
        hashes = None
    out = Path(out)
    try:
        record = _write_run(out, cfg, config_path, spec, src, tgt, hashes)
    except DivergedRunError as exc:
        log.error("cell %s seed %d diverged at step %d", _cell_name(lam), seed, exc.step)
        return {"lam": lam, "seed": seed, "miou": float("nan"), "status": f"diverged at step {exc.step}"}
    return {"lam": lam, "seed": seed, "miou": record.metrics["miou"], "status": "ok"}


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.dataset is not None:
        cfg["data"]["dataset_dir"] = str(args.dataset)
    out = Path(args.out)
    _check_fresh(out)
    lambdas = [float(lam) for lam in cfg["ablation"]["lambdas"]]
    seeds = cfg["ablation"]["seeds"] if args.seed is None else [args.seed]
    jobs = [(cfg, None if args.config is None else str(args.config), lam, seed,
             str(out / _cell_name(lam) / f"seed-{seed}"))
            for seed in seeds for lam in [None] + lambdas]
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            cells = list(pool.map(_ablation_job, jobs))
    else:
        cells = [_ablation_job(j) for j in jobs]
    table = AblationTable(lambdas, list(seeds), cells)
    (out / "ablation.csv").write_text(table.to_csv())
    (out / "cells.csv").write_text(table.cells_csv())
    man = _manifest("ablate", cfg, args.config, out, cells=[j[4] for j in jobs])
    (out / "manifest.json").write_text(_dump(man))
    sys.stdout.write(table.to_csv())
    diverged = [c for c in cells if c["status"] != "ok"]
    return EXIT_DIVERGED if diverged else EXIT_OK


# ---------------------------------------------------------------- report

def _read_run(path: Path) -> dict:
    try:
        man = json.loads((path / "manifest.json").read_text())
        metrics = json.loads((path / "metrics.json").read_text())
        steps = (path / "steps.csv").read_text()
    except FileNotFoundError as exc:
        raise InvalidInputError(f"{path}: not a completed run directory ({exc.filename})") from None
    if man.get("command") != "train":
        raise InvalidInputError(f"{path}: manifest is not a training run")
    rows = list(csv.DictReader(io.StringIO(steps)))
    n = len(metrics["iou"])
    weights = np.array([float(r["weight"]) for r in rows]).reshape(-1, n) if rows else np.ones((0, n))
    plan = man["plan"]
    lam = plan["gbw"]["lam"] if plan["strategy"] == "gbw" else None
    label = f"{plan['strategy']}" + ("" if lam is None else f"(lam={lam!r})") + f"/seed={plan['seed']}"
    return {"label": label, "plan": plan, "lam": lam, "seed": plan["seed"], "metrics": metrics,
            "weights": weights, "prevalence": np.array(man["source_prevalence"])}


def _f(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def _comparison_csv(runs) -> tuple[str, str]:
    n = len(runs[0]["metrics"]["iou"])
    prev = runs[0]["prevalence"]
    rarest = int(np.argmin(prev))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["class", "prevalence"]
    for r in runs:
        header += [f"iou[{r['label']}]", f"recall[{r['label']}]"]
    for r in runs[1:]:
        header += [f"d_iou[{r['label']}]", f"d_recall[{r['label']}]"]
    w.writerow(header + ["note"])
    base = runs[0]["metrics"]
    note = ""
    for c in range(n):
        row = [c, repr(float(prev[c]))]
        for r in runs:
            row += [_f(r["metrics"]["iou"][c]), _f(r["metrics"]["recall"][c])]
        for r in runs[1:]:
            for key in ("iou", "recall"):
                a, b = base[key][c], r["metrics"][key][c]
                row.append("" if a is None or b is None else repr(float(b - a)))
        row.append("rarest" if c == rarest else "")
        w.writerow(row)
    w.writerow(["miou", ""] + sum([[_f(r["metrics"]["miou"]), ""] for r in runs], [])
               + sum([[repr(float(r["metrics"]["miou"] - base["miou"])), ""] for r in runs[1:]], [])
               + [""])
    if len(runs) > 1:
        parts = []
        for r in runs[1:]:
            a, b = base["recall"][rarest], r["metrics"]["recall"][rarest]
            delta = "n/a" if a is None or b is None else f"{100 * (b - a):+.2f} points"
            parts.append(f"rarest class {rarest} recall delta vs {runs[0]['label']}: "
                         f"{delta} ({r['label']})")
        note = "\n".join(parts) + "\n"
    return buf.getvalue(), note


def _weights_csv(runs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "class", "prevalence", "mean_weight", "std_weight", "max_weight"])
    for r in runs:
        W = r["weights"]
        for c in range(W.shape[1]):
            col = W[:, c]
            stats = (col.mean(), col.std(), col.max()) if col.size else (np.nan,) * 3
            w.writerow([r["label"], c, repr(float(r["prevalence"][c]))] + [_f(s) for s in stats])
    return buf.getvalue()


def _ablation_grid(runs):
    base = {r["seed"] for r in runs if r["plan"]["strategy"] == "uniform"}
    lams = sorted({r["lam"] for r in runs if r["lam"] is not None})
    if not base or not lams:
        return None
    for lam in lams:
        if {r["seed"] for r in runs if r["lam"] == lam} != base:
            return None
    cells = [{"lam": r["lam"], "seed": r["seed"], "miou": r["metrics"]["miou"], "status": "ok"}
             for r in runs if r["lam"] is not None or r["plan"]["strategy"] == "uniform"]
    return AblationTable(lams, sorted(base), cells)


def cmd_report(args) -> int:
    if not args.runs:
        raise InvalidInputError("report needs at least one run directory")
    runs = [_read_run(Path(p)) for p in args.runs]
    n = {len(r["metrics"]["iou"]) for r in runs}
    if len(n) != 1:
        raise InvalidInputError(f"runs have incompatible class counts {sorted(n)}")
    seen = {}
    for r in runs:
        k = seen.setdefault(r["label"], 0)
        seen[r["label"]] = k + 1
        if k:
            r["label"] += f"#{k}"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table, note = _comparison_csv(runs)
    (out / "comparison.csv").write_text(table)
    (out / "weights.csv").write_text(_weights_csv(runs))
    grid = _ablation_grid(runs)
    if grid is not None:
        (out / "ablation.csv").write_text(grid.to_csv())
    sys.stdout.write(note)
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gbw", description=__doc__)
    p.add_argument("--version", action="version", version=f"gbw {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", type=Path, help="JSON config or a run manifest")
        sp.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")

    g = sub.add_parser("generate", help="write source/target dataset containers")
    common(g, "data")
    t = sub.add_parser("train", help="train one run into a fresh run directory")
    common(t, "run")
    t.add_argument("--dataset", type=Path, help="directory written by 'generate'")
    t.add_argument("--strategy", help="override train.strategy")
    t.add_argument("--lam", type=float, help="override train.gbw.lam")
    a = sub.add_parser("ablate", help="uniform baseline plus one GBW run per lambda and seed")
    common(a, "ablation")
    a.add_argument("--dataset", type=Path, help="use stored datasets instead of regenerating")
    a.add_argument("--parallel", type=int, default=1, metavar="K", help="worker processes")
    r = sub.add_parser("report", help="compare completed run directories")
    r.add_argument("runs", nargs="*", help="run directories")
    r.add_argument("--out", type=Path, default=Path("report"), help="output directory")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "ablate": cmd_ablate,
            "report": cmd_report}


def main(argv=None) -> int:
    level = os.environ.get("GBW_LOG_LEVEL", "error").lower()
    if level not in LOG_LEVELS:
        print(f"gbw: GBW_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "parallel", 1) < 1:
        print("gbw: --parallel must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except InvalidInputError as exc:
        print(f"gbw: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedRunError as exc:
        print(f"gbw: run diverged at step {exc.step}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"gbw: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
