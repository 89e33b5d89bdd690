"""Acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line (shown in the pytest terminal
summary, or printed directly when the file is run as a script) and then
asserts. The full-suite run is shared by criteria 6, 8 and 9.

    pytest tests/test_acceptance.py -v
    python tests/test_acceptance.py
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from gradcases import ADAPTER_CASES, LAYER_CASES, adapter_case, layer_case
from oracles import brute_mmd2, chi2_uniform
from ttabench import adapters as A
from ttabench import harness as H
from ttabench.numcore import entropy, make_rng
from ttabench.shiftlab import StreamSpec
from ttabench.similarity import MmdConfig, median_bandwidth, mmd_squared, similarity_score

SUITE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "suite.yaml"
DEFAULT_SCENARIO = "off1.5-eta0.0-iid"
LINES: dict[int, str] = {}


def record(n: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    LINES[n] = line
    print(line)
    assert ok, line


def _params_equal(a, b):
    return all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


@pytest.fixture(scope="module")
def default_ctx():
    sc = next(s for s in H.default_suite() if s.id == DEFAULT_SCENARIO)
    return H.prepare_seed(sc, 0)


@pytest.fixture(scope="module")
def suite_run():
    text = SUITE_CONFIG.read_text()
    cfg = H.load_run_config(text)
    t0 = time.perf_counter()
    reports = H.run_grid(cfg, workers=os.cpu_count() or 1)
    return text, reports, time.perf_counter() - t0


# 1 ---------------------------------------------------------------------------


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(100):
        for kind, mode in LAYER_CASES:
            key = f"{kind}/{mode}"
            worst[key] = max(worst.get(key, 0.0), layer_case(kind, mode, seed))
        for method in ADAPTER_CASES:
            worst[method] = max(worst.get(method, 0.0), adapter_case(method, seed))
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and dt < 60
    record(1, ok, f"{len(worst)} cases x 100 seeds, worst rel err {worst[top]:.1e} ({top}), "
                  f"{dt:.1f}s")


# 2 ---------------------------------------------------------------------------


def test_criterion_2_mmd_oracle():
    t0 = time.perf_counter()
    rng = make_rng(2024)
    worst = 0.0
    for i in range(200):
        m, n, d = int(rng.integers(2, 51)), int(rng.integers(2, 51)), int(rng.integers(1, 9))
        X = rng.normal(size=(m, d))
        Y = rng.normal(size=(n, d)) * rng.uniform(0.5, 2.0) + rng.normal()
        sigma = median_bandwidth(np.vstack([X, Y])) if i % 2 else float(rng.uniform(0.2, 4.0))
        for est in ("biased", "unbiased"):
            got = mmd_squared(X, Y, MmdConfig(bandwidth=sigma, estimator=est))
            worst = max(worst, abs(got - brute_mmd2(X, Y, sigma, est == "unbiased")))
    X = make_rng(1).normal(size=(500, 6))
    s_self = similarity_score(X, X.copy()).S
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and s_self == 1.0 and dt < 60
    record(2, ok, f"200 pairs x 2 estimators, max |diff| {worst:.1e}, S(X,X)={s_self!r}, "
                  f"{dt:.1f}s")


# 3 ---------------------------------------------------------------------------


def test_criterion_3_similarity():
    t0 = time.perf_counter()
    d = 8
    rng = make_rng(3)
    X = rng.normal(size=(2000, d))
    direction = np.ones(d) / math.sqrt(d)
    cfg = MmdConfig(bandwidth=median_bandwidth(X))
    S = [similarity_score(X, rng.normal(size=(2000, d)) + off * direction, cfg).S
         for off in (0, 1, 2, 3, 5)]
    monotone = all(a > b for a, b in zip(S, S[1:]))
    Z = make_rng(4).normal(size=(2000, d))
    order = make_rng(5).permutation(2000)
    sigma = median_bandwidth(Z)
    s_split = similarity_score(Z[order[:1000]], Z[order[1000:]], MmdConfig(bandwidth=sigma)).S
    # what the biased estimator gives under the null, in expectation
    floor = math.exp(-math.sqrt((2 / 1000) * (1 - (1 + 2 / sigma ** 2) ** (-d / 2))))
    dt = time.perf_counter() - t0
    ok = monotone and s_split >= 0.98 and dt < 120
    record(3, ok, "S over offsets 0,1,2,3,5 = " + ", ".join(f"{s:.4f}" for s in S)
           + f" (strictly decreasing: {monotone}); self-split S = {s_split:.4f} "
           f"(needs >= 0.98; biased-estimator null expectation {floor:.4f}); {dt:.1f}s")


# 4 ---------------------------------------------------------------------------


def test_criterion_4_reductions(default_ctx):
    src = default_ctx.models["layer"]
    C = src.n_classes
    stream = [b.X for b in default_ctx.stream[:20]]
    checks = {}

    t, e = A.Tent(src.clone(), seed=1), A.Eata(src.clone(), e_margin=math.log(C), d_margin=1.01,
                                              fisher_lambda=0.0, seed=1)
    ok = True
    for x in stream:
        ok &= t.step(x).tobytes() == e.step(x).tobytes() and _params_equal(t.model, e.model)
    checks["eata->tent"] = ok

    t, s = A.Tent(src.clone(), e_margin=A.default_margin(C)), A.Sar(src.clone(), rho=0.0)
    ok = True
    for x in stream:
        ok &= t.step(x).tobytes() == s.step(x).tobytes() and _params_equal(t.model, s.model)
    checks["sar(rho=0)->filtered tent"] = ok

    m = src.clone()
    c = A.Cotta(m, restore_prob=1.0)
    ok = True
    for x in stream:
        c.step(x)
        ok &= all(m.params[k].tobytes() == m.theta0["params"][k].tobytes() for k in m.params)
    checks["cotta(p_rst=1) pinned"] = ok

    m = src.clone()
    t3 = A.T3a(m)
    for x in stream:
        t3.step(x)
    checks["t3a immutable"] = _params_equal(m, src)
    record(4, all(checks.values()), ", ".join(f"{k}: {v}" for k, v in checks.items()))


# 5 ---------------------------------------------------------------------------


def test_criterion_5_tent_descent(default_ctx):
    m = default_ctx.models["layer"].clone()
    x = default_ctx.stream[0].X
    ad = A.Tent(m)
    h0 = float(entropy(m.predict_proba(x)).mean())
    for _ in range(50):
        ad.step(x)
    h50 = float(entropy(m.predict_proba(x)).mean())
    drop = 1 - h50 / h0
    record(5, drop >= 0.20, f"{DEFAULT_SCENARIO}, batch of {len(x)}: mean entropy "
                            f"{h0:.4f} -> {h50:.4f} ({100 * drop:.1f}% drop, needs >= 20%)")


# 6 ---------------------------------------------------------------------------


def _deltas(reports, method):
    by = {(r.scenario, r.method, r.seed): r.accuracy for r in reports if not r.failed}
    out = {}
    for (sc, m, seed), acc in by.items():
        if m == method and (sc, "baseline", seed) in by:
            out.setdefault(sc, []).append(100 * (acc - by[(sc, "baseline", seed)]))
    return {sc: float(np.mean(v)) for sc, v in out.items()}


def _group(deltas, pred):
    vals = {sc: d for sc, d in deltas.items() if pred(sc)}
    return float(np.mean(list(vals.values()))), vals


def _fmt(vals):
    return ", ".join(f"{sc} {d:+.2f}" for sc, d in sorted(vals.items()))


def test_criterion_6_patterns(suite_run):
    _, reports, dt = suite_run
    seeds = {r.seed for r in reports}
    scen = {r.scenario for r in reports}
    a_tent, va_t = _group(_deltas(reports, "tent"), lambda s: s.startswith("off1.5-eta0.0"))
    a_sar, va_s = _group(_deltas(reports, "sar"), lambda s: s.startswith("off1.5-eta0.0"))
    b_shot, vb = _group(_deltas(reports, "shot"), lambda s: "-eta0.3-" in s)
    t3a = _deltas(reports, "t3a")
    c_big, vc_big = _group(t3a, lambda s: s.startswith("off3.0-"))
    c_small, vc_small = _group(t3a, lambda s: s.startswith("off0.5-"))
    ok_a = max(a_tent, a_sar) >= 1.0
    ok_b = b_shot >= 2.0
    ok_c = c_big > c_small
    print(f"  (a) tent: {_fmt(va_t)}; sar: {_fmt(va_s)}")
    print(f"  (b) shot: {_fmt(vb)}")
    print(f"  (c) t3a offset 3.0: {_fmt(vc_big)}; offset 0.5: {_fmt(vc_small)}")
    record(6, ok_a and ok_b and ok_c and len(scen) == 12 and len(seeds) == 3,
           f"{len(scen)} scenarios x {len(seeds)} seeds in {dt:.0f}s; "
           f"(a) tent {a_tent:+.2f} / sar {a_sar:+.2f} pts (needs one >= +1): {ok_a}; "
           f"(b) shot {b_shot:+.2f} pts on noisy targets (needs >= +2): {ok_b}; "
           f"(c) t3a {c_big:+.2f} at offset 3.0 vs {c_small:+.2f} at 0.5: {ok_c}")


# 7 ---------------------------------------------------------------------------


def test_criterion_7_memory_balance():
    details, ok = [], True
    base = next(s for s in H.default_suite() if s.id == "off1.5-eta0.0-correlated")
    for seed in range(3):
        sc = H.Scenario(base.id, base.sources, base.target,
                        StreamSpec(order="correlated", run_length=100, batch_size=16),
                        (seed,), H.TrainConfig(n_target=1000))
        ctx = H.prepare_seed(sc, seed, kinds=("iabn", "rbn"))
        label_of = {}
        for b in ctx.stream:
            for x, y in zip(b.X, b.y_true):
                label_of[x.tobytes()] = int(y)
        stream_labels = np.concatenate([b.y_true for b in ctx.stream])
        C = sc.target.n_classes
        for name, adapter in (("note", A.Note(ctx.models["iabn"].clone(), seed=seed)),
                              ("rotta", A.Rotta(ctx.models["rbn"].clone(), seed=seed))):
            for b in ctx.stream:
                adapter.step(b.X)
            xm = adapter.memory.data()
            xm = xm[0] if isinstance(xm, tuple) else xm
            mem_labels = np.array([label_of[x.tobytes()] for x in xm])
            k = len(mem_labels)
            mem = chi2_uniform(np.bincount(mem_labels, minlength=C))
            win = chi2_uniform(np.bincount(stream_labels[-k:], minlength=C))
            ok &= mem < win
            details.append(f"seed {seed} {name} {mem:.1f} vs {win:.1f}")
    record(7, ok, "chi-square to uniform, memory vs trailing window (true labels, "
                  "1000-sample run-length-100 stream): " + "; ".join(details))


# 8 ---------------------------------------------------------------------------


def test_criterion_8_determinism(suite_run):
    text, reports, _ = suite_run
    again = H.run_grid(H.load_run_config(text), workers=os.cpu_count() or 1)
    a, b = H.reports_to_csv(reports), H.reports_to_csv(again)
    record(8, a.encode() == b.encode(),
           f"full suite rerun: {len(a.splitlines()) - 1} rows, byte-identical CSV: {a == b}")


# 9 ---------------------------------------------------------------------------


def test_criterion_9_latency(suite_run):
    _, reports, _ = suite_run
    ms = H.latency_summary(reports)["ms_per_batch"]
    fam = {m: ms[m] for m in A.FAMILIES["entropy"]}
    ok = ms["baseline"] <= ms["t3a"] < min(fam.values()) and max(fam.values()) < ms["cotta"]
    record(9, ok, "median ms/batch: " + ", ".join(
        f"{m} {ms[m]:.3f}" for m in ["baseline", "t3a", *fam, "cotta"])
        + " (baseline <= t3a < entropy family < cotta)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
