"""ttabench command line: gen-data, pretrain, similarity, bench, report.

Data goes to stdout or files, logs go to stderr. Exit codes: 0 success,
1 a benchmark run failed, 2 bad config / usage / input.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .adapters import FAMILIES
from .model import Model, pretrain
from .numcore import make_rng
from .shiftlab import read_csv, sample_domain, write_csv
from .similarity import BACKEND, MmdConfig, similarity_score

log = logging.getLogger("ttabench")

FORMATS = ("csv", "json", "md")


class UsageError(Exception):
    pass


def _setup_logging(verbosity: int):
    level = logging.WARNING - 10 * verbosity
    logging.basicConfig(stream=sys.stderr, level=max(level, logging.DEBUG),
                        format="%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s")


def _load_config(path, seed=None) -> H.RunConfig:
    if path is None:
        raise UsageError("--config is required")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    cfg = H.load_run_config(text)
    if seed is not None:
        cfg.seeds = (seed,)
        for sc in cfg.scenarios:
            sc.seeds = (seed,)
    return cfg


def _prepare_out_dir(out) -> Path:
    if out is None:
        raise UsageError("--out is required")
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise UsageError(f"output directory {p} is not writable")
    return p


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_.=" else "_" for ch in name)


# --- verbs ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    out = _prepare_out_dir(args.out)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    written = []
    for sc in cfg.scenarios:
        d = out / _safe(sc.id)
        d.mkdir(exist_ok=True)
        n_src = cfg.n_data or sc.train.n_source
        n_tgt = cfg.n_data or sc.train.n_target
        # same rng keys as the harness, so files match what bench trains/streams on
        for i, spec in enumerate(sc.sources):
            path = d / f"source{i}.csv"
            write_csv(sample_domain(spec, n_src, make_rng(seed, 1, i)), path)
            written.append(str(path))
        path = d / "target.csv"
        write_csv(sample_domain(sc.target, n_tgt, make_rng(seed, 3)), path)
        written.append(str(path))
    log.info("wrote %d dataset files under %s", len(written), out)
    print(json.dumps({"seed": seed, "files": written}, indent=2))
    return 0


def cmd_pretrain(args) -> int:
    train = H.TrainConfig()
    if args.config is not None:
        train = _load_config(args.config).scenarios[0].train
    if args.out is None:
        raise UsageError("--out is required")
    data = read_csv(args.data)
    seed = args.seed or 0
    order = make_rng(seed, 2).permutation(len(data))
    cut = int(round(0.8 * len(data)))
    tr, va = data.take(order[:cut]), data.take(order[cut:])
    C = int(max(data.y.max(), data.y_true.max())) + 1 if args.n_classes is None else args.n_classes
    m = Model.init(data.X.shape[1], C, train.width, train.depth, norm=args.norm, seed=seed)
    pretrain(m, tr.X, tr.y, epochs=train.epochs, lr=train.lr, batch_size=train.batch_size,
             seed=seed, val=(va.X, va.y) if len(va) else None)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    m.save(args.out)
    print(json.dumps({"checkpoint": str(args.out), "norm": args.norm, "n_train": len(tr),
                      "source_val_accuracy": m.source_val_accuracy}, indent=2))
    return 0


def cmd_similarity(args) -> int:
    a, b = read_csv(args.file_a), read_csv(args.file_b)
    if a.X.shape[1] != b.X.shape[1]:
        raise UsageError(f"feature width mismatch: {a.X.shape[1]} vs {b.X.shape[1]}")
    Xa, Xb = a.X, b.X
    if args.checkpoint is not None:
        m = Model.load(args.checkpoint)
        Xa = m.forward(Xa, "eval", update_stats=False, record=False)[0]
        Xb = m.forward(Xb, "eval", update_stats=False, record=False)[0]
    bw = "median" if args.bandwidth == "median" else float(args.bandwidth)
    cfg = MmdConfig(bandwidth=bw, estimator=args.estimator, max_samples=args.max_samples,
                    seed=args.seed or 0)
    res = similarity_score(Xa, Xb, cfg).to_dict()
    res["backend"] = BACKEND
    print(json.dumps(res, indent=2))
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args.config, args.seed)  # every check happens before any write
    out = _prepare_out_dir(args.out)
    workers = args.workers or os.cpu_count() or 1
    log.info("bench: %d scenarios x %d seeds x %d methods, workers=%d", len(cfg.scenarios),
             len(cfg.seeds), len(cfg.methods), workers)
    reports = H.run_grid(cfg, workers)
    (out / "runs.csv").write_text(H.reports_to_csv(reports))
    (out / "latency.csv").write_text(H.latency_to_csv(reports))
    cells = H.aggregate(reports)
    summary = H.summary_json(cells, reports)
    summary["latency"] = H.latency_summary(reports)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    sys.stdout.write(render(cells, reports, args.format))
    for sc, best in summary["best"].items():
        log.info("best %s: %s", sc, ",".join(best))
    failed = [r for r in reports if r.failed]
    if failed:
        for r in failed:
            log.error("run failed: scenario=%s method=%s seed=%d", r.scenario, r.method, r.seed)
        return 1
    return 0


def cmd_report(args) -> int:
    try:
        text = Path(args.csv).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {args.csv}: {exc}") from exc
    reports = H.reports_from_csv(text)
    if not reports:
        print("no runs")
        return 0
    cells = H.aggregate(reports, args.metric)
    sys.stdout.write(render(cells, reports, args.format))
    return 0


# --- rendering ------------------------------------------------------------------


def family_of(method: str) -> str:
    for fam, ms in FAMILIES.items():
        if method in ms:
            return fam
    return "reference"


def _columns(cells):
    present = {m for _, m in cells}
    cols = [("reference", "baseline")] if "baseline" in present else []
    for fam, ms in FAMILIES.items():
        cols += [(fam, m) for m in ms if m in present]
    known = {m for _, m in cols}
    cols += [("other", m) for m in sorted(present - known)]
    return cols


def _pct(v):
    return "" if v is None else f"{100 * v:.2f}"


def render(cells: dict, reports, fmt: str = "md") -> str:
    scen = sorted({s for s, _ in cells})
    cols = _columns(cells)
    if fmt == "json":
        return json.dumps(H.summary_json(cells, reports), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "family", "method", "mean", "sd", "delta", "best", "n_seeds",
                    "n_failed"])
        for s in scen:
            for fam, m in cols:
                c = cells.get((s, m))
                if c is not None:
                    w.writerow([s, fam, m, _pct(c.mean), _pct(c.sd), _pct(c.delta),
                                int(c.best), c.n_seeds, c.n_failed])
        return buf.getvalue()
    sims = {}
    for r in reports:
        sims.setdefault(r.scenario, []).append(r.similarity)
    head = ["scenario", "S"] + [f"{fam}/{m}" for fam, m in cols]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for s in scen:
        row = [s, f"{np.mean(sims[s]):.4f}"]
        for _, m in cols:
            c = cells.get((s, m))
            if c is None:
                row.append("")
            elif c.mean is None:
                row.append("failed")
            else:
                txt = f"{_pct(c.mean)} ± {_pct(c.sd)}"
                if c.delta is not None:
                    txt += f" ({100 * c.delta:+.2f})"
                if c.best:
                    txt = f"**{txt}**"
                row.append(txt)
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttabench",
                                description="Desk-scale test-time adaptation benchmark.")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="more logging on stderr (repeatable)")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")

    g = sub.add_parser("gen-data", help="sample every scenario's domains to CSV files")
    g.add_argument("--config", required=True, help="run-config YAML")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="sampling seed (default: first config seed)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="train a source model on a dataset CSV")
    t.add_argument("--data", required=True, help="dataset CSV (from gen-data)")
    t.add_argument("--out", required=True, help="checkpoint path (.json)")
    t.add_argument("--config", help="run-config YAML; its train section is used")
    t.add_argument("--norm", default="layer", choices=["layer", "batch", "iabn", "rbn"])
    t.add_argument("--n-classes", type=int, help="class count (default: max label + 1)")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("similarity", help="MMD similarity S between two dataset CSVs (JSON)")
    s.add_argument("file_a")
    s.add_argument("file_b")
    s.add_argument("--checkpoint", help="score encoder features of this model instead of raw")
    s.add_argument("--bandwidth", default="median", help="'median' or a fixed sigma")
    s.add_argument("--estimator", default="biased", choices=["biased", "unbiased"])
    s.add_argument("--max-samples", type=int, default=2000)
    s.add_argument("--seed", type=int, help="subsampling seed")
    s.set_defaults(func=cmd_similarity)

    b = sub.add_parser("bench", help="run the scenario x method x seed grid")
    b.add_argument("--config", required=True, help="run-config YAML")
    b.add_argument("--out", required=True, help="directory for runs.csv, latency.csv, summary.json")
    b.add_argument("--seed", type=int, help="run only this seed instead of the config's seeds")
    b.add_argument("--workers", type=int, help="parallel processes (default: all cores)")
    b.add_argument("--format", choices=FORMATS, default="md", help="stdout summary format")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="summarize a runs.csv")
    r.add_argument("csv")
    r.add_argument("--format", choices=FORMATS, default="md")
    r.add_argument("--metric", default="accuracy",
                   choices=["accuracy", "accuracy_true", "mean_entropy"])
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (UsageError, H.ConfigError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
