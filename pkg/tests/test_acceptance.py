"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also repeated in pytest's terminal summary (see conftest).
Criteria 6-8 run the real study presets through the CLI and take several
minutes each on one core.
"""

import itertools
import json
import math
import os
import time

import numpy as np

from eps_wsss import cli
from eps_wsss import epscore as ec
from eps_wsss import formats as fm
from eps_wsss import metrics as mt
from eps_wsss import model as md
from eps_wsss import numerics as nx
from eps_wsss import synthdata as sd

from conftest import small_scene_config
from test_epscore import fgbg_oracle, lcls_oracle, lsal_oracle, overlap_oracle
from test_metrics import miou_oracle, ratio_oracle

RESULTS = []


def verdict(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _away_from_kinks(a):
    a = a.copy()
    for k in (0.0, 1.0):
        near = np.abs(a - k) < 1e-3
        a[near] += 0.01
    return a


# ---------------------------------------------------------------- 1. gradients

def test_criterion_1_gradient_correctness():
    start = time.time()
    rng = np.random.default_rng(0)
    x = nx.parameter(_away_from_kinks(rng.normal(size=(2, 3, 5, 5))))
    y = nx.parameter(rng.uniform(0.5, 2.0, size=(2, 3, 5, 5)))
    w = rng.normal(size=(2, 3, 5, 5))
    k = nx.parameter(rng.normal(size=(4, 3, 3, 3)))
    b = nx.parameter(rng.normal(size=4))

    def weighted(t):
        return nx.sum_(t * rng_w(t.shape))

    weights = {}

    def rng_w(shape):
        if shape not in weights:
            weights[shape] = np.random.default_rng(len(weights) + 1).normal(size=shape)
        return weights[shape]

    primitives = {
        "add": (lambda: weighted(x + y), [x, y]),
        "sub": (lambda: weighted(x - y), [x, y]),
        "mul": (lambda: weighted(x * y), [x, y]),
        "div": (lambda: weighted(x / y), [x, y]),
        "neg": (lambda: weighted(-x), [x]),
        "square": (lambda: weighted(nx.square(x)), [x]),
        "relu": (lambda: weighted(nx.relu(x)), [x]),
        "sigmoid": (lambda: weighted(nx.sigmoid(x)), [x]),
        "softplus": (lambda: weighted(nx.softplus(x)), [x]),
        "clamp01": (lambda: weighted(nx.clamp01(x)), [x]),
        "sum": (lambda: nx.sum_(x * w), [x]),
        "mean": (lambda: nx.mean(nx.square(x)), [x]),
        "global_avg_pool": (lambda: weighted(nx.global_avg_pool(x)), [x]),
        "max_detached": (lambda: weighted(x / (nx.max_detached(nx.relu(x), axis=(-2, -1), keepdims=True) + 1.0)),
                         [x]),
        "take": (lambda: weighted(x[1, :2]), [x]),
        "stack": (lambda: weighted(nx.stack([x[0], y[1]])), [x, y]),
        "flip_lr": (lambda: weighted(nx.flip_lr(x)), [x]),
        "permute": (lambda: weighted(nx.permute(x, (0, 2, 3, 1))), [x]),
        "conv2d": (lambda: weighted(nx.conv2d(x, k, b)), [x, k, b]),
    }
    worst = {}
    for name, (fn, params) in primitives.items():
        rep = nx.finite_diff_check(fn, params, epsilon=1e-5, tolerance=1e-6)
        worst[name] = max(rep.max_rel_error)
    prim_ok = all(v <= 1e-6 for v in worst.values())

    cfg = small_scene_config(seed=3)
    scene = next(s for s in sd.generate_scenes(cfg, 50) if s.labels.sum() >= 2)
    params = md.init_params(md.ClassifierConfig(num_classes=3, hidden=[8, 8], seed=1))
    rep = nx.finite_diff_check(lambda: ec.total_loss(scene, params)[1], params.tensors(),
                               epsilon=1e-5, tolerance=1e-4)
    total_err = max(rep.max_rel_error)
    elapsed = time.time() - start
    ok = prim_ok and total_err <= 1e-4 and elapsed < 60
    worst_name = max(worst, key=worst.get)
    verdict(1, ok, f"{len(worst)} primitives max rel err {worst[worst_name]:.2e} ({worst_name}) <= 1e-6; "
                   f"L_total on 16x16 C=3 rel err {total_err:.2e} <= 1e-4; {elapsed:.1f}s < 60s")


# ---------------------------------------------------------- 2. identities

def test_criterion_2_equation_identities():
    rng = np.random.default_rng(1)
    fg, bg = rng.random((8, 8)), rng.random((8, 8))
    pair = ec.FgBgMaps(nx.Tensor(fg), nx.Tensor(bg))
    lam1 = np.array_equal(ec.estimate_saliency(pair, 1.0).data, fg)
    lam0 = np.array_equal(ec.estimate_saliency(pair, 0.0).data, 1.0 - bg)
    m = rng.random((8, 8))
    sal_same = ec.saliency_loss(m, nx.Tensor(m)).item() == 0.0
    sal_one = ec.saliency_loss(np.ones((8, 8)), nx.Tensor(np.zeros((8, 8)))).item() == 1.0
    ln2_err = abs(ec.classification_loss(nx.Tensor(np.zeros(3)), np.array([1.0, 0.0, 1.0])).item() - math.log(2))
    ok = lam1 and lam0 and sal_same and sal_one and ln2_err <= 1e-12
    verdict(2, ok, f"lam=1 -> fg exact {lam1}; lam=0 -> 1-bg exact {lam0}; L_sal(M,M)=0 {sal_same}; "
                   f"L_sal(1,0)=1 {sal_one}; |L_cls(0)-ln2|={ln2_err:.1e} <= 1e-12")


# ------------------------------------------------------------- 3. oracles

def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(2)
    n = 150
    counts = dict.fromkeys(["overlap_ratio", "build_fg_bg", "L_sal", "L_cls", "mIoU", "confusion_ratio"], 0)
    worst_real = 0.0
    for _ in range(n):
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        c = int(rng.integers(1, 5))
        b_i = rng.random((h, w)) < rng.random()
        b_s = rng.random((h, w)) < rng.random()
        counts["overlap_ratio"] += ec.overlap_ratio(b_i, b_s) == overlap_oracle(b_i, b_s)

        maps = rng.random((c + 1, h, w))
        y = (rng.random(c) < 0.6).astype(float)
        y[rng.integers(c)] = 1.0
        sal = rng.random((h, w))
        sel = ec.select_maps(maps, y, sal, ec.FusionConfig(tau=rng.random()))
        out = ec.build_fg_bg(nx.Tensor(maps), y, sel)
        f_o, b_o = fgbg_oracle(maps, y, set(sel.foreground), set(sel.background))
        err = max(np.abs(out.fg.data - f_o).max(), np.abs(out.bg.data - b_o).max())
        worst_real = max(worst_real, err)
        counts["build_fg_bg"] += err <= 1e-12

        est = rng.random((h, w))
        err = abs(ec.saliency_loss(sal, nx.Tensor(est)).item() - lsal_oracle(sal, est))
        worst_real = max(worst_real, err)
        counts["L_sal"] += err <= 1e-12

        z = rng.normal(scale=3.0, size=c)
        err = abs(ec.classification_loss(nx.Tensor(z), y).item() - lcls_oracle(z, y))
        worst_real = max(worst_real, err)
        counts["L_cls"] += err <= 1e-12

        gts = [rng.integers(0, c + 1, size=(h, w)) for _ in range(2)]
        preds = [rng.integers(0, c + 1, size=(h, w)) for _ in range(2)]
        rep = mt.miou(preds, gts, c)
        ious, mean = miou_oracle(preds, gts, c)
        exact = all((np.isnan(rep.iou[k]) if ious[k] is None else rep.iou[k] == ious[k]) for k in range(c + 1))
        counts["mIoU"] += exact and abs(rep.mean - mean) <= 1e-12

        ctx = np.where(gts[0] == 0, rng.integers(0, 3, size=(h, w)), 0)
        k_ctx, c_t = int(rng.integers(1, 3)), int(rng.integers(1, c + 1))
        r = mt.confusion_ratio(preds[0], gts[0], ctx, k_ctx, c_t)
        fp, tp = ratio_oracle(preds[0], gts[0], ctx, k_ctx, c_t)
        m_ok = (r.m == fp / tp) if tp else math.isnan(r.m)
        counts["confusion_ratio"] += (r.fp, r.tp) == (fp, tp) and m_ok
    ok = all(v == n for v in counts.values())
    verdict(3, ok, ", ".join(f"{k} {v}/{n}" for k, v in counts.items()) +
            f"; worst real-valued error {worst_real:.1e}")


# ----------------------------------------------------------- 4. selection

def test_criterion_4_selection_semantics():
    cfg = ec.FusionConfig(tau=0.4)
    checks = []
    # O exactly tau: 5 map pixels, 2 salient -> 0.4
    maps = np.zeros((2, 1, 5))
    maps[0] = 0.9
    sal = np.array([[1.0, 1.0, 0.0, 0.0, 0.0]])
    sel = ec.select_maps(maps, np.array([1.0]), sal, cfg)
    checks.append(sel.overlap[0] == 0.4 and sel.assignment(0) == "background")
    sel = ec.select_maps(maps, np.array([1.0]), np.ones((1, 5)), cfg)
    checks.append(sel.overlap[0] == 1.0 and sel.assignment(0) == "foreground")
    empty = np.zeros((2, 1, 5))
    empty[0] = 0.5  # not strictly above the binarisation level
    sel = ec.select_maps(empty, np.array([1.0]), np.ones((1, 5)), cfg)
    checks.append(sel.overlap[0] == 0.0 and sel.assignment(0) == "background")

    # every 3x3 binary class map against every 3x3 saliency map, at three thresholds
    exhaustive = 0
    agree_naive = 0
    cases = 0
    patterns = [np.array(b, dtype=float).reshape(3, 3) for b in itertools.product([0.0, 1.0], repeat=9)]
    sal_patterns = patterns[::7]
    for tau in (0.0, 0.4, 0.5):
        fc = ec.FusionConfig(tau=tau)
        naive = ec.FusionConfig(strategy="naive")
        for mi in patterns:
            for ms in sal_patterns:
                maps = np.stack([mi, np.zeros((3, 3))])
                sel = ec.select_maps(maps, np.array([1.0]), ms, fc)
                o = overlap_oracle(mi > 0.5, ms > 0.5)
                expect = "foreground" if o > tau else "background"
                exhaustive += sel.overlap[0] == o and sel.assignment(0) == expect
                if o > tau:
                    nsel = ec.select_maps(maps, np.array([1.0]), ms, naive)
                    agree_naive += (sel.foreground, sel.background) == (nsel.foreground, nsel.background)
                    cases += 1
    total = 3 * len(patterns) * len(sal_patterns)
    ok = all(checks) and exhaustive == total and agree_naive == cases and cases > 0
    verdict(4, ok, f"O=tau->bg, O=1->fg, empty->bg: {checks}; exhaustive 3x3 cases {exhaustive}/{total}; "
                   f"adaptive==naive when O>tau {agree_naive}/{cases}")


# ------------------------------------------------------------- 5. routing

def test_criterion_5_gradient_routing():
    cfg = small_scene_config(seed=3)
    scene = next(s for s in sd.generate_scenes(cfg, 50) if s.labels.sum() >= 2)
    params = md.init_params(md.ClassifierConfig(num_classes=3, hidden=[8, 8], seed=1))
    out = md.forward(params, scene.image)
    g = nx.backward(ec.classification_loss(out.logits, scene.labels), params.tensors())
    cls_zero = bool(np.all(g[-2][-1] == 0.0) and g[-1][-1] == 0.0)
    _, root = ec.total_loss(scene, params)
    g = nx.backward(root, params.tensors())
    total_norm = float(np.abs(g[-2][-1]).sum() + abs(g[-1][-1]))
    verdict(5, cls_zero and total_norm > 0,
            f"L_cls only: background head gradient exactly zero {cls_zero}; "
            f"L_total: background head |grad|_1 = {total_norm:.3e} > 0")


# ----------------------------------------------------- 6-8. study presets

def _study(tmp_path, name):
    out = tmp_path / name
    start = time.time()
    code = cli.main(["study", "--preset", name, "--out", str(out)])
    elapsed = time.time() - start
    assert code == 0
    return out, elapsed


def test_criterion_6_cooccurrence_trend(tmp_path):
    out, elapsed = _study(tmp_path, "cooccurrence")
    rows = {(r["method"], r["context"], r["target"]): r for r in cli.read_csv(out / "cooccurrence.csv")}
    cam, eps = rows[("CAM", "1", "2")], rows[("EPS", "1", "2")]
    m_cam, m_eps = float(cam["m"]), float(eps["m"])
    iou_cam, iou_eps = float(cam["iou"]), float(eps["iou"])
    rel_drop = (m_cam - m_eps) / m_cam if m_cam > 0 else float("nan")
    ok = rel_drop >= 0.5 and (iou_eps - iou_cam) >= 0.10 and elapsed < 300
    verdict(6, ok, f"stripes->square m {m_cam:.3f} -> {m_eps:.3f} (drop {100 * rel_drop:.0f}% >= 50%), "
                   f"IoU {100 * iou_cam:.1f} -> {100 * iou_eps:.1f} (+{100 * (iou_eps - iou_cam):.1f} >= 10), "
                   f"{elapsed:.0f}s < 300s")


def test_criterion_7_selection_ablation(tmp_path):
    out, elapsed = _study(tmp_path, "selection_ablation")
    miou = {r["strategy"]: float(r["miou"]) for r in cli.read_csv(out / "selection_ablation.csv")}
    ok = miou["adaptive"] > miou["naive"] and miou["adaptive"] >= miou["baseline"]
    verdict(7, ok, "mean mIoU over 3 seeds: " + ", ".join(f"{k} {100 * v:.1f}" for k, v in miou.items()) +
            f"; need adaptive > naive and adaptive >= baseline ({elapsed:.0f}s)")


def test_criterion_8_boundary_trend(tmp_path):
    out, elapsed = _study(tmp_path, "boundary")
    f1 = {r["method"]: float(r["f1"]) for r in cli.read_csv(out / "boundary.csv")}
    per_seed = {}
    for r in cli.read_csv(out / "study_runs.csv"):
        per_seed.setdefault(r["arm"], {})[r["seed"]] = float(r["boundary_f1"])
    gap = f1["EPS"] - f1["CAM"]
    detail = "; ".join(f"{a} " + "/".join(f"{100 * v:.1f}" for v in s.values()) for a, s in per_seed.items())
    verdict(8, gap >= 0.10, f"mean boundary F1 EPS {100 * f1['EPS']:.1f} vs CAM {100 * f1['CAM']:.1f} "
                            f"(gap {100 * gap:.1f} >= 10) over 3 seeds [{detail}] ({elapsed:.0f}s)")


# ------------------------------------------------------- 9. determinism

SMALL = {
    "n": 3,
    "scene": {"height": 20, "width": 20, "size_range": [5, 7], "instances": [2, 3],
              "cooccurrence": [{"cls": 2, "context": 1, "thickness": 3}]},
    "model": {"hidden": [4]},
    "train": {"steps": 4, "batch_size": 2},
    "inference": {"scales": [1.0, 0.75]},
}


def _tree(directory):
    out = {}
    for root, _, files in os.walk(directory):
        for f in files:
            p = os.path.join(root, f)
            data = open(p, "rb").read()
            if f == "run_manifest.json":
                m = json.loads(data)
                m.pop("wall_clock_s")
                m.pop("arm_wall_clock_s", None)
                data = json.dumps(m, sort_keys=True).encode()
            out[os.path.relpath(p, directory)] = data
    return out


def test_criterion_9_determinism_and_round_trip(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(SMALL))
    study_cfg = tmp_path / "study.json"
    study_cfg.write_text(json.dumps({k: SMALL[k] for k in ("n", "model", "train", "inference")}))
    same = {}
    for rep in ("a", "b"):
        d = tmp_path / rep
        assert cli.main(["generate", "--config", str(cfg), "--out", str(d / "data")]) == 0
        assert cli.main(["train", "--config", str(cfg), "--dataset", str(d / "data"), "--out", str(d / "run")]) == 0
        assert cli.main(["infer", "--config", str(cfg), "--checkpoint", str(d / "run" / "model.ckpt"),
                         "--dataset", str(d / "data"), "--out", str(d / "masks")]) == 0
        assert cli.main(["evaluate", "--config", str(cfg), "--masks", str(d / "masks"), "--dataset", str(d / "data"),
                         "--out", str(d / "eval" / "metrics.csv")]) == 0
        assert cli.main(["study", "--preset", "cooccurrence", "--config", str(study_cfg),
                         "--out", str(d / "study")]) == 0
    for part in ("data", "run", "masks", "eval", "study"):
        same[part] = _tree(tmp_path / "a" / part) == _tree(tmp_path / "b" / part)

    rng = np.random.default_rng(9)
    arr = rng.normal(size=(3, 5, 7)).astype(np.float32)
    fm.write_epsf(tmp_path / "x.epsf", arr)
    epsf_ok = np.array_equal(fm.read_epsf(tmp_path / "x.epsf"), arr)
    mask = rng.integers(0, 256, size=(6, 9))
    fm.write_pgm(tmp_path / "x.pgm", mask)
    pgm_ok = np.array_equal(fm.read_pgm(tmp_path / "x.pgm"), mask)
    params = md.init_params(md.ClassifierConfig(hidden=[5, 6], seed=4))
    md.save_checkpoint(params, tmp_path / "x.ckpt")
    back = md.load_checkpoint(tmp_path / "x.ckpt")
    ckpt_ok = all(a.data.tobytes() == b.data.tobytes() and a.shape == b.shape
                  for a, b in zip(params.tensors(), back.tensors()))
    ok = all(same.values()) and epsf_ok and pgm_ok and ckpt_ok
    verdict(9, ok, "byte-identical reruns " + ", ".join(f"{k} {v}" for k, v in same.items()) +
            f"; round-trips epsf {epsf_ok}, pgm {pgm_ok}, checkpoint {ckpt_ok}")
