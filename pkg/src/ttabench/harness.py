"""Cross-domain experiment engine: pretrain, stream, adapt, aggregate."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import METHOD_NORM, METHODS, AdapterFailure, make_adapter
from .model import Model, accuracy, pretrain, to_rbn
from .numcore import entropy, make_rng
from .shiftlab import (
    DomainSpec,
    LabeledBatch,
    ShiftTransform,
    StreamSpec,
    derive_target,
    make_stream,
    random_domain,
    sample_domain,
)
from .similarity import MmdConfig, similarity_score

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["scenario", "method", "seed", "accuracy", "accuracy_true", "mean_entropy",
                  "similarity", "n_samples", "n_updates", "failed"]


@dataclass
class TrainConfig:
    n_source: int = 2000  # per source domain, before the 80/20 split
    n_target: int = 3000
    width: int = 64
    depth: int = 2
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    similarity_samples: int = 2000
    similarity_features: str = "encoder"  # "encoder" | "raw"


@dataclass
class Scenario:
    id: str
    sources: list
    target: DomainSpec
    stream: StreamSpec = field(default_factory=StreamSpec)
    seeds: tuple = (0, 1, 2)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.sources:
            raise ValueError(f"scenario {self.id}: needs at least one source")
        if not self.seeds:
            raise ValueError(f"scenario {self.id}: seeds must be nonempty")
        dims = {s.dim for s in self.sources} | {self.target.dim}
        classes = {s.n_classes for s in self.sources} | {self.target.n_classes}
        if len(dims) != 1 or len(classes) != 1:
            raise ValueError(f"scenario {self.id}: domains disagree on shape")


@dataclass
class RunReport:
    scenario: str
    method: str
    seed: int
    accuracy: float | None
    accuracy_true: float | None
    mean_entropy: float | None
    similarity: float
    n_samples: int
    n_updates: int
    failed: bool
    ms_per_batch: float = float("nan")
    class_counts: list = field(default_factory=list)

    def row(self) -> list:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return "1" if v else "0"
            if isinstance(v, float):
                return repr(v)
            return str(v)

        return [fmt(getattr(self, c)) for c in REPORT_COLUMNS]


# --- the default 12-scenario suite -----------------------------------------

SUITE_OFFSETS = (0.5, 1.5, 3.0)
SUITE_NOISE = (0.0, 0.3)
SUITE_ORDERS = ("iid", "correlated")


SUITE_SEPARATION = 0.3
SUITE_COV_SCALE = 0.05  # class std ~0.22: offsets 0.5/1.5/3.0 are ~2/7/13 stds


def default_source(n_classes=7, dim=16, seed=2024) -> DomainSpec:
    return random_domain("source", n_classes, dim, separation=SUITE_SEPARATION,
                         cov_scale=SUITE_COV_SCALE, seed=seed)


def suite_shift(dim: int, offset: float, seed: int = 7) -> ShiftTransform:
    """Mean offset of the given length; rotation grows with it (0.1 rad per unit)."""
    return ShiftTransform.from_magnitude(dim, offset, angle=0.1 * offset, seed=seed)


def default_suite(seeds=(0, 1, 2), train: TrainConfig | None = None,
                  offsets=SUITE_OFFSETS, noise=SUITE_NOISE, orders=SUITE_ORDERS,
                  run_length: int = 100, source: DomainSpec | None = None) -> list[Scenario]:
    src = source or default_source()
    out = []
    for off in offsets:
        for eta in noise:
            tgt = derive_target(src, suite_shift(src.dim, off), eta,
                                name=f"target(off={off},eta={eta})")
            for order in orders:
                out.append(Scenario(
                    id=f"off{off}-eta{eta}-{order}", sources=[src], target=tgt,
                    stream=StreamSpec(order=order, run_length=run_length, batch_size=16),
                    seeds=tuple(seeds), train=train or TrainConfig()))
    return out


# --- running ----------------------------------------------------------------


@dataclass
class SeedContext:
    """Everything a (scenario, seed) pair shares across methods."""
    train: LabeledBatch
    val: LabeledBatch
    target: LabeledBatch
    stream: list
    models: dict
    similarity: float


def _pretrained(kind: str, scenario: Scenario, data: LabeledBatch, val: LabeledBatch,
                seed: int) -> Model:
    tc = scenario.train
    base_kind = "batch" if kind == "rbn" else kind
    C, d = scenario.target.n_classes, scenario.target.dim
    m = Model.init(d, C, tc.width, tc.depth, norm=base_kind, seed=seed)
    pretrain(m, data.X, data.y, epochs=tc.epochs, lr=tc.lr, batch_size=tc.batch_size,
             seed=seed, val=(val.X, val.y))
    if kind == "rbn":
        acc = m.source_val_accuracy
        m = to_rbn(m)
        m.theta0 = None
        m.freeze_source()
        m.source_val_accuracy = acc
    return m


def prepare_seed(scenario: Scenario, seed: int, kinds=("layer",)) -> SeedContext:
    tc = scenario.train
    parts = [sample_domain(s, tc.n_source, make_rng(seed, 1, i))
             for i, s in enumerate(scenario.sources)]
    pooled = LabeledBatch.concat(parts) if len(parts) > 1 else parts[0]
    order = make_rng(seed, 2).permutation(len(pooled))
    cut = int(round(0.8 * len(pooled)))
    train, val = pooled.take(order[:cut]), pooled.take(order[cut:])
    target = sample_domain(scenario.target, tc.n_target, make_rng(seed, 3))
    stream = make_stream(target, scenario.stream, make_rng(seed, 4))
    models = {k: _pretrained(k, scenario, train, val, seed) for k in kinds}
    ln = models.get("layer") or _pretrained("layer", scenario, train, val, seed)
    models.setdefault("layer", ln)
    k = tc.similarity_samples
    if tc.similarity_features == "encoder":
        fs = ln.forward(train.X[:k], "eval", record=False)[0]
        ft = ln.forward(target.X[:k], "eval", record=False)[0]
    else:
        fs, ft = train.X[:k], target.X[:k]
    S = similarity_score(fs, ft, MmdConfig(max_samples=k, seed=seed)).S
    return SeedContext(train, val, target, stream, models, S)


def run_method(method: str, ctx: SeedContext, scenario_id: str, seed: int,
               hyper: dict | None = None, warmup: int = 3) -> RunReport:
    base = ctx.models[METHOD_NORM.get(method, "layer")]
    model = base.clone()
    hp = dict(hyper or {})
    n = sum(len(b) for b in ctx.stream)
    try:
        adapter = make_adapter(method, model, seed=seed, **hp)
        adapter.prepare((ctx.val.X, ctx.val.y))
        preds, ents, times = [], [], []
        for b in ctx.stream:
            t0 = time.perf_counter()
            probs = adapter.step(b.X)
            times.append(time.perf_counter() - t0)
            preds.append(np.argmax(probs, axis=1))
            ents.append(entropy(probs))
    except (AdapterFailure, FloatingPointError, ValueError) as exc:
        # non-finite values surface as ValueError from softmax/entropy; the run fails alone
        log.warning("%s/%s/seed %d failed: %s", scenario_id, method, seed, exc)
        return RunReport(scenario_id, method, seed, None, None, None, ctx.similarity, n, 0, True)
    pred = np.concatenate(preds)
    y = np.concatenate([b.y for b in ctx.stream])
    y_true = np.concatenate([b.y_true for b in ctx.stream])
    timed = times[warmup:] if len(times) > warmup else times
    return RunReport(
        scenario_id, method, seed,
        accuracy=float(np.mean(pred == y)),
        accuracy_true=float(np.mean(pred == y_true)),
        mean_entropy=float(np.mean(np.concatenate(ents))),
        similarity=ctx.similarity, n_samples=int(len(pred)), n_updates=adapter.n_updates,
        failed=False, ms_per_batch=1e3 * float(np.median(timed)),
        class_counts=np.bincount(pred, minlength=base.n_classes).tolist())


def run_scenario_seed(scenario: Scenario, seed: int, methods, hyper: dict | None = None):
    hyper = hyper or {}
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    kinds = sorted({METHOD_NORM.get(m, "layer") for m in methods} | {"layer"})
    ctx = prepare_seed(scenario, seed, kinds)
    return [run_method(m, ctx, scenario.id, seed, hyper.get(m)) for m in methods]


def run_scenario(scenario: Scenario, methods, hyper: dict | None = None) -> list[RunReport]:
    reports = []
    for seed in scenario.seeds:
        reports.extend(run_scenario_seed(scenario, seed, methods, hyper))
    return reports


def measure_latency(adapter, stream, warmup: int = 3) -> float:
    """Median wall-clock milliseconds per batch, first ``warmup`` batches excluded."""
    times = []
    for b in stream:
        x = b.X if hasattr(b, "X") else b
        t0 = time.perf_counter()
        adapter.step(x)
        times.append(time.perf_counter() - t0)
    timed = times[warmup:] if len(times) > warmup else times
    return 1e3 * float(np.median(timed))


# --- aggregation ------------------------------------------------------------


@dataclass
class SummaryCell:
    scenario: str
    method: str
    mean: float | None
    sd: float | None
    n_seeds: int
    n_failed: int
    delta: float | None = None
    best: bool = False


def aggregate(reports, metric: str = "accuracy") -> dict:
    """Mean/sd over seeds per (scenario, method), delta vs baseline, best per row."""
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate: no reports")
    groups: dict = {}
    for r in reports:
        if not isinstance(r, RunReport):
            raise TypeError("aggregate expects RunReport objects")
        groups.setdefault((r.scenario, r.method), []).append(r)
    for key, rs in groups.items():
        seeds = [r.seed for r in rs]
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"duplicate seed in group {key}: reports need distinct grouping keys")
    cells = {}
    for (sc, me), rs in groups.items():
        ok = sorted((r for r in rs if not r.failed), key=lambda r: r.seed)
        vals = [getattr(r, metric) for r in ok]
        mean = math.fsum(vals) / len(vals) if vals else None
        sd = (math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))
              if vals else None)
        cells[(sc, me)] = SummaryCell(sc, me, mean, sd, len(rs), len(rs) - len(ok))
    for sc in {k[0] for k in cells}:
        row = {me: c for (s, me), c in cells.items() if s == sc}
        base = row.get("baseline")
        for c in row.values():
            if base is not None and base.mean is not None and c.mean is not None:
                c.delta = c.mean - base.mean
        scored = [c for c in row.values() if c.mean is not None]
        if scored:
            top = max(c.mean for c in scored)
            for c in scored:
                c.best = c.mean == top
    return cells


def summary_json(cells: dict, reports) -> dict:
    scen = sorted({k[0] for k in cells})
    meth = sorted({k[1] for k in cells}, key=_method_key)
    sims = {}
    for r in reports:
        sims.setdefault(r.scenario, []).append(r.similarity)
    return {
        "scenarios": scen,
        "methods": meth,
        "cells": [asdict(cells[(s, m)]) for s in scen for m in meth if (s, m) in cells],
        "similarity": {s: math.fsum(v) / len(v) for s, v in sorted(sims.items())},
        "best": {s: sorted(m for m in meth if (s, m) in cells and cells[(s, m)].best)
                 for s in scen},
        "any_failed": any(r.failed for r in reports),
    }


def _method_key(m):
    order = list(METHODS)
    return (order.index(m) if m in order else len(order), m)


# --- CSV I/O ------------------------------------------------------------------


def sort_reports(reports):
    return sorted(reports, key=lambda r: (r.scenario, _method_key(r.method), r.seed))


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in sort_reports(reports):
        w.writerow(r.row())
    return buf.getvalue()


def latency_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "method", "seed", "ms_per_batch"])
    for r in sort_reports(reports):
        w.writerow([r.scenario, r.method, r.seed, f"{r.ms_per_batch:.4f}"])
    return buf.getvalue()


def reports_from_csv(text: str) -> list[RunReport]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    if rows[0] != REPORT_COLUMNS:
        raise ValueError(f"report CSV schema mismatch: {rows[0]}")
    out = []
    for r in rows[1:]:
        d = dict(zip(REPORT_COLUMNS, r))

        def f(k):
            return float(d[k]) if d[k] != "" else None

        out.append(RunReport(d["scenario"], d["method"], int(d["seed"]), f("accuracy"),
                             f("accuracy_true"), f("mean_entropy"), float(d["similarity"]),
                             int(d["n_samples"]), int(d["n_updates"]), d["failed"] == "1"))
    return out


# --- run configs ----------------------------------------------------------------

SCHEMA_VERSION = 1
_TOP_KEYS = {"schema_version", "seeds", "methods", "common", "hyper", "train", "suite",
             "scenarios", "data"}
_SUITE_KEYS = {"offsets", "noise", "orders", "run_length", "source"}
_DOMAIN_KEYS = {"name", "n_classes", "dim", "separation", "cov_scale", "label_noise", "seed"}
_TARGET_KEYS = {"name", "base", "offset", "angle", "scale", "label_noise", "direction_seed"}
_STREAM_KEYS = {"order", "run_length", "batch_size", "class_weights", "length"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenarios: list
    methods: list
    seeds: tuple
    hyper: dict
    n_data: int | None = None  # samples per domain file for gen-data


def _keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return d


def _allowed_hyper(method):
    import inspect

    names = set()
    for cls in METHODS[method].__mro__:
        if "__init__" in vars(cls):
            names |= set(inspect.signature(cls.__init__).parameters)
    return names - {"self", "model", "kw", "seed"}


def _domain(d, where, default_name):
    _keys(d, _DOMAIN_KEYS, where)
    kw = {k: d[k] for k in ("n_classes", "dim", "separation", "cov_scale", "label_noise", "seed")
          if k in d}
    kw.setdefault("separation", SUITE_SEPARATION)
    kw.setdefault("cov_scale", SUITE_COV_SCALE)
    kw.setdefault("seed", 2024)
    return random_domain(d.get("name", default_name), **kw)


def _stream(d, where):
    _keys(d, _STREAM_KEYS, where)
    d = dict(d)
    if d.get("class_weights") is not None:
        d["class_weights"] = tuple(float(w) for w in d["class_weights"])
    d.setdefault("batch_size", 16)
    return StreamSpec(**d)


def _scenario(d, i, seeds, train):
    where = f"scenarios[{i}]"
    _keys(d, {"id", "sources", "target", "stream"}, where)
    if "id" not in d or "sources" not in d or "target" not in d:
        raise ConfigError(f"{where}: id, sources and target are required")
    if not isinstance(d["sources"], list) or not d["sources"]:
        raise ConfigError(f"{where}: sources must be a nonempty list")
    sources = [_domain(s, f"{where}.sources[{j}]", f"source{j}")
               for j, s in enumerate(d["sources"])]
    t = _keys(d["target"], _TARGET_KEYS, f"{where}.target")
    base = sources[int(t.get("base", 0))]
    shift = ShiftTransform.from_magnitude(base.dim, float(t.get("offset", 0.0)),
                                          angle=float(t.get("angle", 0.0)),
                                          scale=float(t.get("scale", 1.0)),
                                          seed=int(t.get("direction_seed", 7)))
    target = derive_target(base, shift, float(t.get("label_noise", 0.0)),
                           name=t.get("name", f"{d['id']}-target"))
    stream = _stream(d.get("stream", {}), f"{where}.stream")
    return Scenario(str(d["id"]), sources, target, stream, seeds, train)


def parse_run_config(doc) -> RunConfig:
    """Validate a run-config mapping and build scenarios; no side effects."""
    try:
        return _parse(doc)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError, IndexError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse(doc):
    _keys(doc, _TOP_KEYS, "config")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    methods = doc.get("methods", list(METHODS))
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods must be a nonempty list")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    if len(set(methods)) != len(methods):
        raise ConfigError("methods must not repeat")
    seeds = doc.get("seeds", [0, 1, 2])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a nonempty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    common = doc.get("common", {}) or {}
    hyper_in = doc.get("hyper", {}) or {}
    _keys(hyper_in, set(METHODS), "hyper")
    hyper = {}
    for m in methods:
        hp = {**common, **(hyper_in.get(m) or {})}
        bad = set(hp) - _allowed_hyper(m)
        if bad:
            raise ConfigError(f"hyper.{m}: unknown hyperparameters {sorted(bad)}")
        hyper[m] = hp
    train_d = doc.get("train", {}) or {}
    _keys(train_d, set(TrainConfig.__dataclass_fields__), "train")
    train = TrainConfig(**train_d)
    seeds = tuple(seeds)
    scenarios = []
    if "suite" in doc:
        s = _keys(doc["suite"] or {}, _SUITE_KEYS, "suite")
        src_d = s.get("source")
        src = _domain(src_d, "suite.source", "source") if src_d else default_source()
        scenarios += default_suite(seeds, train, tuple(s.get("offsets", SUITE_OFFSETS)),
                                   tuple(s.get("noise", SUITE_NOISE)),
                                   tuple(s.get("orders", SUITE_ORDERS)),
                                   int(s.get("run_length", 100)), source=src)
    for i, d in enumerate(doc.get("scenarios", []) or []):
        scenarios.append(_scenario(d, i, seeds, train))
    if not scenarios:
        raise ConfigError("config defines no scenarios (need suite or scenarios)")
    ids = [s.id for s in scenarios]
    if len(set(ids)) != len(ids):
        raise ConfigError("scenario ids must be unique")
    data = _keys(doc.get("data", {}) or {}, {"n"}, "data")
    return RunConfig(scenarios, list(methods), seeds, hyper, data.get("n"))


def load_run_config(text: str) -> RunConfig:
    import yaml

    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return parse_run_config(doc)


# --- grid execution -----------------------------------------------------------


def _run_unit(args):
    scenario, seed, methods, hyper = args
    return run_scenario_seed(scenario, seed, methods, hyper)


def run_grid(cfg: RunConfig, workers: int = 1) -> list[RunReport]:
    """Every (scenario, seed) unit, optionally across processes; output order is fixed."""
    units = [(sc, seed, cfg.methods, cfg.hyper) for sc in cfg.scenarios for seed in sc.seeds]
    if workers <= 1 or len(units) == 1:
        results = [_run_unit(u) for u in units]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_unit, units))
    return sort_reports([r for rs in results for r in rs])


def latency_summary(reports) -> dict:
    """Median ms per batch per method and its ratio to the baseline median."""
    per = {}
    for r in reports:
        if not r.failed and math.isfinite(r.ms_per_batch):
            per.setdefault(r.method, []).append(r.ms_per_batch)
    ms = {m: float(np.median(v)) for m, v in sorted(per.items(), key=lambda kv: _method_key(kv[0]))}
    base = ms.get("baseline")
    ratio = {m: (v / base if base else None) for m, v in ms.items()}
    return {"ms_per_batch": ms, "ratio_to_baseline": ratio}
