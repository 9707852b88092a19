"""Acceptance criteria 1-9.  Each test prints one PASS/FAIL line.

Every criterion is computed by a ``run_cN`` function returning its verdict
inputs plus a CSV artifact; criterion 9 reruns them and compares the CSV
bytes.  Results are cached per session so the training run is shared by
criteria 6, 8 and 9.
"""
import csv
import io
import time

import numpy as np
import pytest

from spcaps import capsroute, explain
from spcaps.backbone import Conv3x3, MaxPool2
from spcaps.data import stratified_split, synth_dataset
from spcaps.entropy import entropy_sweep, loglog_slope
from spcaps.gradcheck import end_to_end
from spcaps.model import Model, ModelConfig, param_count
from spcaps.slic import SlicParams, segment
from spcaps.sppool import pool_backward, pool_forward, tile_map
from spcaps.synth import scene_image, shape_image
from spcaps.tensorio import Image
from spcaps.train import dataset_pools, sweep, train

from .helpers import fd_grad, rel_err

pytestmark = pytest.mark.slow

SWEEP_COUNTS = [1, 13, 24, 145, 425, 894, 7185]
SCENE_SEEDS = range(10)
TRAIN_CONFIG = ModelConfig(S=36, Q=16, epochs=40, seed=0)
TABLE_S = [10, 16, 25, 36, 50, 100, 200]
TABLE_Q = [16, 64]

_cache = {}


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{x:.10g}" if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def cached(name, fn):
    if name not in _cache:
        t0 = time.perf_counter()
        out = fn()
        out["seconds"] = time.perf_counter() - t0
        _cache[name] = out
    return _cache[name]


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")


# ----------------------------------------------------------------- runners


def run_entropy():
    rows, slopes, ratios = [], [], []
    for seed in SCENE_SEEDS:
        img = Image.rgb(scene_image(np.random.default_rng(seed)))
        reps = entropy_sweep(img, SWEEP_COUNTS)
        slope = loglog_slope(reps)
        slopes.append(slope)
        ratios.append(max(r.sp_entropy / r.conv_entropy for r in reps if r.S >= 13))
        for r in reps:
            rows.append([seed, r.S, r.T, r.sp_entropy, r.conv_entropy, r.global_entropy, r.M, slope])
    text = _csv(["seed", "S", "T", "sp_entropy", "conv_entropy", "global_entropy", "M", "slope"], rows)
    return {"csv": text, "slopes": slopes, "ratios": ratios}


def brute_pool(x_up, labels, n):
    out = np.zeros((n, x_up.shape[2]))
    for j in range(n):
        sel = labels == j
        if sel.any():
            out[j] = x_up[sel].mean(axis=0)
    return out


def run_pooling():
    rng = np.random.default_rng(3)
    rows, worst_fwd, worst_adj = [], 0.0, 0.0
    for k in range(100):
        t = int(rng.choice([1, 2, 4, 8]))
        f = int(rng.integers(2, 9)) if t < 8 else int(rng.integers(2, 5))
        size = f * t
        img = Image.rgb(rng.integers(0, 256, (size, size, 3)) if k % 2 else shape_image(rng, k % 4, size)[0])
        S = int(rng.integers(1, min(60, size * size) + 1))
        seg = segment(img, SlicParams(S))
        assoc = tile_map((f, f), (size, size))
        x = rng.standard_normal((f, f, 5))
        y = pool_forward(x, seg, assoc).values
        ref = brute_pool(np.repeat(np.repeat(x, t, 0), t, 1), seg.labels, seg.count)
        err = float(np.max(np.abs(y - ref)) / max(np.max(np.abs(ref)), 1e-300))
        g = rng.standard_normal(y.shape)
        lhs, rhs = np.sum(y * g), np.sum(x * pool_backward(g, seg, assoc))
        adj = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
        worst_fwd, worst_adj = max(worst_fwd, err), max(worst_adj, adj)
        rows.append([k, t, S, err, adj])
    return {"csv": _csv(["instance", "t", "S", "forward_rel_err", "adjoint_rel_err"], rows),
            "fwd": worst_fwd, "adj": worst_adj}


def _probe(f, x, grad, rng, n, eps=1e-6):
    out = []
    for flat in rng.choice(x.size, size=min(n, x.size), replace=False):
        idx = np.unravel_index(int(flat), x.shape)
        out.append(rel_err(float(grad[idx]), fd_grad(f, x, idx, eps)))
    return out


def run_gradients():
    rng = np.random.default_rng(4)
    errs = {}

    conv = Conv3x3(3, 4, rng, np.float64)
    conv.b[:] = rng.standard_normal(4) * 0.1
    x = rng.standard_normal((2, 5, 5, 3))
    G = rng.standard_normal((2, 5, 5, 4))
    f = lambda: float(np.sum(conv.forward(x) * G))
    f()
    gx, gW, gb = conv.backward(G)
    errs["conv"] = _probe(f, x, gx, rng, 12) + _probe(f, conv.W, gW, rng, 12) + _probe(f, conv.b, gb, rng, 4)

    pool = MaxPool2()
    x = rng.permutation(2 * 6 * 6 * 3).reshape(2, 6, 6, 3).astype(np.float64) / 7.0
    G = rng.standard_normal((2, 3, 3, 3))
    f = lambda: float(np.sum(pool.forward(x)[0] * G))
    f()
    errs["maxpool"] = _probe(f, x, pool.backward(G), rng, 24, eps=1e-4)

    img = Image.rgb(shape_image(rng, 1, 16)[0])
    seg = segment(img, SlicParams(7))
    assoc = tile_map((4, 4), (16, 16))
    x = rng.standard_normal((4, 4, 3))
    G = rng.standard_normal((7, 3))
    f = lambda: float(np.sum(pool_forward(x, seg, assoc).values * G))
    errs["pooling"] = _probe(f, x, pool_backward(G, seg, assoc), rng, 24)

    u = rng.standard_normal((2, 5, 4))
    W = rng.standard_normal((5, 3, 3, 4)) * 0.5
    mask = np.array([[1, 1, 1, 0, 1], [1, 1, 1, 1, 1]], bool)
    G = rng.standard_normal((2, 3, 3))
    f = lambda: float(np.sum(capsroute.capsule_forward(u, W, mask, 3).v * G))
    _, g_u, g_W = capsroute.routing_backward(capsroute.capsule_forward(u, W, mask, 3), G, W)
    errs["routing"] = _probe(f, W, g_W, rng, 14) + _probe(f, u, g_u, rng, 10)

    v = rng.standard_normal((4, 4, 5)) * 0.3
    t = np.array([0, 1, 2, 3])
    _, g = capsroute.margin_loss(v, t)
    f = lambda: float(capsroute.margin_loss(v, t)[0].sum())
    errs["margin_loss"] = _probe(f, v, g, rng, 24)

    errs["end_to_end"] = [p.rel_error for seed in range(2) for p in end_to_end(seed, 12)]
    rows = [[name, len(e), max(e)] for name, e in errs.items()]
    return {"csv": _csv(["component", "probes", "max_rel_err"], rows), "errs": errs}


def run_routing_invariants():
    rng = np.random.default_rng(5)
    worst = {"simplex": 0.0, "norm": 0.0, "identity": 0.0}
    negative = 0
    for _ in range(1000):
        S, J, K = int(rng.integers(1, 40)), int(rng.integers(2, 8)), int(rng.integers(1, 17))
        mask = rng.random(S) < 0.85
        mask[rng.integers(S)] = True
        u_hat = rng.standard_normal((S, J, K)) * rng.uniform(0.01, 3.0) * mask[:, None, None]
        st = capsroute.dynamic_routing(u_hat, mask, 3)
        for c in st.cs:
            worst["simplex"] = max(worst["simplex"], float(np.max(np.abs(c[0][mask].sum(axis=1) - 1))))
            negative += int(np.sum(c < 0))
        worst["norm"] = max(worst["norm"], float(np.max(np.linalg.norm(st.v, axis=-1))))
        cm = explain.contribution(st)
        ok = ~cm.degenerate
        diff = explain.weighted_contribution(st, cm)[ok] - np.linalg.norm(st.s[0], axis=-1)[ok]
        worst["identity"] = max(worst["identity"], float(np.max(np.abs(diff), initial=0.0)))
    text = _csv(["check", "worst"], [[k, v] for k, v in worst.items()] + [["negative_c", negative]])
    return {"csv": text, "worst": worst, "negative": negative}


def run_training():
    ds = synth_dataset(267, 0)
    tr, va = stratified_split(ds, 0.25, TRAIN_CONFIG.seed)
    assert (len(tr), len(va)) == (800, 268)
    model, metrics = train(TRAIN_CONFIG, tr, va)
    return {"csv": metrics.to_csv(), "metrics": metrics, "model": model, "val": va}


def run_params():
    ds = synth_dataset(6, 1)
    cfg = ModelConfig(epochs=1, seed=0)
    text = sweep(cfg, TABLE_S, TABLE_Q, ds)
    rows = list(csv.DictReader(io.StringIO(text)))
    params = {(int(r["S"]), int(r["Q"])): int(r["params"]) for r in rows}
    return {"csv": text, "params": params, "capsules": param_count(ModelConfig()).capsules}


def run_explain(train_result):
    model, va = train_result["model"], train_result["val"]
    pools = dataset_pools(model, va)
    slic = model.config.slic
    rows = []
    for i, sample in enumerate(va.samples):
        fwd = model.forward(sample.image.data[None], pools[i : i + 1])
        if int(np.argmax(fwd.probs[0])) != sample.label:
            continue
        seg = sample.segmentation(slic)
        z = explain.contribution(fwd.state).z[:, sample.label]
        fg_pixels = np.bincount(seg.labels.ravel(), weights=sample.fg_mask.ravel(), minlength=seg.count)
        valid = seg.mask
        fg = valid & (fg_pixels > 0)
        bg = valid & (fg_pixels == 0)
        if not fg.any() or not bg.any():
            continue
        rows.append([i, sample.label, float(z[fg].mean()), float(z[bg].mean())])
        if len(rows) == 50:
            break
    wins = sum(r[2] > r[3] for r in rows)
    return {"csv": _csv(["val_index", "label", "fg_mean_z", "bg_mean_z"], rows), "n": len(rows), "wins": wins}


# ----------------------------------------------------------------- criteria


def test_criterion_1_entropy_slope(capsys):
    r = cached("entropy", run_entropy)
    lo, hi = min(r["slopes"]), max(r["slopes"])
    ok = all(-1.3 <= s <= -0.7 for s in r["slopes"]) and r["seconds"] < 300
    report(capsys, 1, ok, f"log-log slopes in [{lo:.3f}, {hi:.3f}] over 10 images, {r['seconds']:.0f}s")
    assert ok


def test_criterion_2_superpixel_below_window(capsys):
    r = cached("entropy", run_entropy)
    worst = max(r["ratios"])
    ok = worst < 0.5
    report(capsys, 2, ok, f"max superpixel/window entropy ratio over S>=13: {worst:.3f}")
    assert ok


def test_criterion_3_pooling_exact(capsys):
    r = cached("pooling", run_pooling)
    ok = r["fwd"] <= 1e-6 and r["adj"] <= 1e-10 and r["seconds"] < 60
    report(capsys, 3, ok, f"forward rel err {r['fwd']:.1e}, adjoint rel err {r['adj']:.1e}, {r['seconds']:.1f}s")
    assert ok


def test_criterion_4_gradients(capsys):
    r = cached("gradients", run_gradients)
    parts = []
    ok = r["seconds"] < 120
    for name, e in r["errs"].items():
        tol = 1e-3 if name == "end_to_end" else 1e-4
        ok &= len(e) >= 20 and max(e) <= tol
        parts.append(f"{name} {max(e):.1e}")
    report(capsys, 4, ok, ", ".join(parts))
    assert ok


def test_criterion_5_routing_invariants(capsys):
    r = cached("routing", run_routing_invariants)
    w = r["worst"]
    ok = w["simplex"] <= 1e-9 and w["norm"] < 1 and w["identity"] <= 1e-6 and r["negative"] == 0 and r["seconds"] < 30
    report(capsys, 5, ok, f"simplex {w['simplex']:.1e}, max |v| {w['norm']:.4f}, identity {w['identity']:.1e}, {r['seconds']:.1f}s")
    assert ok


def test_criterion_6_learning(capsys):
    r = cached("training", run_training)
    _, _, _, train_acc = r["metrics"].last("train")
    _, _, _, val_acc = r["metrics"].last("val")
    ok = val_acc >= 0.85 and abs(train_acc - val_acc) <= 0.08 and r["seconds"] < 1800
    report(capsys, 6, ok, f"val acc {val_acc:.4f}, train acc {train_acc:.4f} after 40 epochs, {r['seconds'] / 60:.1f} min")
    assert ok


def test_criterion_7_parameter_accounting(capsys):
    r = cached("params", run_params)
    p = r["params"]
    mono_s = all(p[(a, q)] < p[(b, q)] for q in TABLE_Q for a, b in zip(TABLE_S, TABLE_S[1:]))
    mono_q = all(p[(s, 16)] < p[(s, 64)] for s in TABLE_S)
    ok = r["capsules"] == 147_456 and mono_s and mono_q
    report(capsys, 7, ok, f"capsule params {r['capsules']}, sweep params monotone in S: {mono_s}, in Q: {mono_q}")
    assert ok


def test_criterion_8_explanations(capsys):
    tr = cached("training", run_training)
    r = cached("explain", lambda: run_explain(tr))
    frac = r["wins"] / max(r["n"], 1)
    ok = r["n"] == 50 and frac >= 0.8
    report(capsys, 8, ok, f"foreground mean z above background in {r['wins']}/{r['n']} correct predictions")
    assert ok


def test_criterion_9_determinism(capsys):
    first = {
        "entropy": cached("entropy", run_entropy)["csv"],
        "pooling": cached("pooling", run_pooling)["csv"],
        "gradients": cached("gradients", run_gradients)["csv"],
        "routing": cached("routing", run_routing_invariants)["csv"],
        "training": cached("training", run_training)["csv"],
        "params": cached("params", run_params)["csv"],
    }
    first["explain"] = cached("explain", lambda: run_explain(_cache["training"]))["csv"]
    second = {
        "entropy": run_entropy()["csv"],
        "pooling": run_pooling()["csv"],
        "gradients": run_gradients()["csv"],
        "routing": run_routing_invariants()["csv"],
        "params": run_params()["csv"],
    }
    rerun = run_training()
    second["training"] = rerun["csv"]
    second["explain"] = run_explain(rerun)["csv"]
    differ = [k for k in first if first[k].encode() != second[k].encode()]
    ok = not differ
    report(capsys, 9, ok, "all CSV outputs byte-identical on rerun" if ok else f"differences in {differ}")
    assert ok
