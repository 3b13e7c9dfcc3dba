"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The overfit and ablation runs take several minutes on one CPU core; they share
a module-level cache so criterion 7 reuses the full-loss run of criterion 6.
"""
import csv
import itertools
import time

import numpy as np
import pytest
import torch

from acceptance_log import record
from oracles import brute_dataset, brute_f, brute_precision_recall, central_differences_multi
from reflect_sod import config as cfg
from reflect_sod.cli import main
from reflect_sod.data import SaliencyDataset, SyntheticSceneSpec, generate_synthetic
from reflect_sod.losses import (FeatureNet, LossWeights, bce_loss, smooth_l1_loss, total_loss,
                                weighted_bce_loss)
from reflect_sod.metrics import (evaluate_dataset, f_measure, precision_recall, precision_recall_sweep,
                                 s_measure)
from reflect_sod.network import SFCNConfig, foreground_probability, init_params, to_nchw
from reflect_sod.reflection import MeanImage, reflect
from test_metrics import fixture_set, write_fixture

OVERFIT_STEPS = 1000
ABLATION_SEEDS = (0, 1, 2)


def _masks(n, h, w, seed):
    """Random rectangles and ellipses, never all-foreground or all-background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:h, :w]
    out = []
    while len(out) < n:
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.15, 0.4) * h, rng.uniform(0.15, 0.4) * w
        if rng.random() < 0.5:
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            m = (abs(yy - cy) <= ry) & (abs(xx - cx) <= rx)
        if 0 < m.sum() < m.size:
            out.append(m)
    return out


# --- 1 ---

def test_criterion_1_gradients():
    start = time.perf_counter()
    config = SFCNConfig(levels=3, convs_per_level=(1, 1, 1), channels_per_level=(4, 8, 8), input_size=(16, 16))
    model = init_params(config, seed=0, dtype=torch.float64).train()
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 16, 16, 3, generator=g, dtype=torch.float64)
    pair = reflect(x, MeanImage.constant(0.45, 0.45, 0.4))
    origin, reflected = to_nchw(pair.origin), to_nchw(pair.reflected)
    gt = torch.from_numpy(np.stack(_masks(2, 16, 16, seed=2))).double()
    weights = LossWeights()
    featnet = FeatureNet(seed=0).double()

    def terms():
        pred = foreground_probability(model(origin, reflected))
        total, parts = total_loss(pred, gt, weights, featnet)
        return {**parts, "bce": bce_loss(pred, gt), "total": total}

    params = dict(model.named_parameters())
    analytic = {}
    for key, value in terms().items():
        analytic[key] = dict(zip(params, torch.autograd.grad(value, list(params.values()), retain_graph=True)))
    numeric = central_differences_multi(terms, params, step=1e-5)
    worst, failures = 0.0, []
    for key in analytic:
        for name in params:
            a, n = analytic[key][name], numeric[key][name]
            excess = ((a - n).abs() - (1e-6 + 1e-3 * n.abs())).max().item()
            worst = max(worst, ((a - n).abs() / (1e-6 + 1e-3 * n.abs())).max().item())
            if excess > 0:
                failures.append(f"{key}/{name}")
    elapsed = time.perf_counter() - start
    n_entries = sum(p.numel() for p in params.values())
    ok = not failures and elapsed < 300
    record(1, ok, f"{len(analytic)} terms x {n_entries} weights, worst error/tolerance {worst:.3f}, "
                  f"{elapsed:.0f}s" + (f"; mismatches {failures[:5]}" if failures else ""))
    assert ok


# --- 2 ---

def _independent_terms(pred, gt, featnet, weights):
    """Loss terms re-derived in float64 numpy straight from their definitions."""
    p = np.clip(pred.numpy(), 1e-7, 1 - 1e-7)
    y = gt.numpy()
    n_pix = y.shape[1] * y.shape[2]
    wbce = []
    for pi, yi in zip(p, y):
        beta = 1.0 - yi.mean()
        pos = -np.sum(yi * np.log(pi))
        neg = -np.sum((1 - yi) * np.log(1 - pi))
        wbce.append((beta * pos + (1 - beta) * neg) / n_pix)
    d = np.abs(y - pred.numpy())
    eps = weights.epsilon
    s1 = np.where(d < eps, 0.5 * d ** 2, eps * d - 0.5 * eps ** 2).mean()
    feats_p = [f.numpy() for f in featnet(pred.unsqueeze(1))]
    feats_g = [f.numpy() for f in featnet(gt.unsqueeze(1))]
    sc = np.mean([sum(lam * np.sqrt(np.sum((fg[i] - fp[i]) ** 2))
                      for lam, fg, fp in zip(weights.lambdas, feats_g, feats_p)) for i in range(len(p))])
    return float(np.mean(wbce)), float(sc), float(s1)


def test_criterion_2_loss_identities():
    rng = np.random.default_rng(2)
    weights = LossWeights()
    featnet = FeatureNet(seed=0).double()
    half_err, breakdown_err = 0.0, 0.0
    for _ in range(100):
        pred = torch.from_numpy(rng.uniform(0.001, 0.999, (2, 8, 8)))
        balanced = torch.from_numpy(np.stack([rng.permutation(np.repeat([0.0, 1.0], 32)).reshape(8, 8)
                                              for _ in range(2)]))
        half_err = max(half_err, abs(float(weighted_bce_loss(pred, balanced))
                                     - 0.5 * float(bce_loss(pred, balanced))))
        gt = torch.from_numpy(np.stack([m.astype(np.float64) for m in
                                        _masks(2, 8, 8, seed=int(rng.integers(1 << 30)))]))
        total, parts = total_loss(pred, gt, weights, featnet)
        wbce, sc, s1 = _independent_terms(pred, gt, featnet, weights)
        expected = wbce + weights.mu * sc + weights.gamma * s1
        breakdown_err = max(breakdown_err, abs(float(total) - expected), abs(float(parts["wbce"]) - wbce),
                            abs(float(parts["sc"]) - sc), abs(float(parts["s1"]) - s1))
    eps = 0.5
    gt1 = torch.zeros(1, 1, 1, dtype=torch.float64)
    below = float(smooth_l1_loss(torch.full_like(gt1, np.nextafter(eps, 0)), gt1, eps))
    at = float(smooth_l1_loss(torch.full_like(gt1, eps), gt1, eps))
    quadratic, linear = 0.5 * eps * eps, eps * eps - 0.5 * eps ** 2
    continuity = max(abs(at - quadratic), abs(below - quadratic), abs(quadratic - linear))
    ok = half_err <= 1e-12 and continuity <= 1e-12 and breakdown_err <= 1e-9
    record(2, ok, f"balanced wBCE vs BCE/2 {half_err:.1e}, smooth-L1 jump at eps {continuity:.1e}, "
                  f"breakdown vs independent sums {breakdown_err:.1e} (100 instances)")
    assert ok


# --- 3 ---

def test_criterion_3_metric_oracle(tmp_path):
    grids = [np.array(bits, dtype=bool).reshape(2, 2) for bits in itertools.product([0, 1], repeat=4)]
    mismatches = 0
    for pred, gt in itertools.product(grids, grids):
        p, r = precision_recall(pred.astype(float), gt, 0.5)
        bp, br = brute_precision_recall(pred.astype(float), gt, 0.5)
        sp, sr = precision_recall_sweep(pred.astype(float), gt, np.array([0.5]))
        if (p, r) != (bp, br) or (sp[0], sr[0]) != (bp, br) or f_measure(p, r) != brute_f(bp, br):
            mismatches += 1
    preds, gts = fixture_set()
    pd, gd = write_fixture(tmp_path, preds, gts)
    report = evaluate_dataset(pd, gd)
    per_image, fmax, mean_mae, _ = brute_dataset({k: v / 255.0 for k, v in preds.items()}, gts)
    fixture_err = max([abs(report.f_max - fmax), abs(report.mae - mean_mae)]
                      + [abs(m.fmax - per_image[m.name][0]) for m in report.per_image]
                      + [abs(m.mae - per_image[m.name][1]) for m in report.per_image])
    hand = f_measure(1.0, 0.5, 0.3)
    ok = mismatches == 0 and fixture_err <= 1e-9 and hand == 0.8125
    record(3, ok, f"2x2 grid mismatches {mismatches}/256, fixture max error {fixture_err:.1e}, "
                  f"F(1, 0.5) = {hand!r}")
    assert ok


# --- 4 ---

def _pair(config, n=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    h, w = config.input_size
    pair = reflect(torch.rand(n, h, w, 3, generator=g, dtype=torch.float64), MeanImage.constant(0.5, 0.5, 0.5))
    return to_nchw(pair.origin), to_nchw(pair.reflected)


def _stats(model, branch):
    return [t.clone() for bn in model.bn[branch] for t in (bn.running_mean, bn.running_var)]


def test_criterion_4_architecture():
    config = SFCNConfig(levels=3, convs_per_level=(1, 1, 1), channels_per_level=(4, 8, 8), input_size=(16, 16))
    model = init_params(config, seed=0, dtype=torch.float64).eval()
    origin, reflected = _pair(config)
    before = [model.branch_forward(x, b)[-1] for x, b in ((origin, "origin"), (reflected, "reflect"))]
    with torch.no_grad():
        model.branch.conv[0].weight[0, 0, 1, 1] += 0.5
    after = [model.branch_forward(x, b)[-1] for x, b in ((origin, "origin"), (reflected, "reflect"))]
    shared = all((a - b).abs().max() > 1e-6 for a, b in zip(after, before))

    isolated = True
    for branch, other in (("origin", "reflect"), ("reflect", "origin")):
        model = init_params(config, seed=0, dtype=torch.float64).train()
        sel, oth = _stats(model, branch), _stats(model, other)
        model.branch_forward(origin if branch == "origin" else reflected, branch)
        isolated &= all(torch.equal(a, b) for a, b in zip(oth, _stats(model, other)))
        isolated &= not all(torch.equal(a, b) for a, b in zip(sel, _stats(model, branch)))

    sizes_ok = []
    for levels, size in itertools.product([2, 3, 4], [32, 64, 128]):
        c = SFCNConfig(levels=levels, convs_per_level=(1,) * levels, channels_per_level=(4, 6, 8, 8)[:levels],
                       input_size=(size, size))
        for fusion in ("hierarchical", "concat"):
            c.fusion = fusion
            o, r = _pair(c)
            with torch.no_grad():
                out = init_params(c, 0, torch.float64)(o, r)
            sizes_ok.append(tuple(out.shape) == (2, 2, size, size))
    ok = shared and isolated and all(sizes_ok)
    record(4, ok, f"weight sharing {'ok' if shared else 'broken'}, AdaBN isolation "
                  f"{'ok' if isolated else 'broken'}, resolution {sum(sizes_ok)}/{len(sizes_ok)} configs")
    assert ok


# --- 5 ---

def test_criterion_5_reflection():
    rng = np.random.default_rng(5)
    violations = 0
    for k in (0.5, 1.0, 2.0):
        for _ in range(20):
            x = rng.random((24, 24, 3))
            mean = MeanImage("scalar-per-channel", rng.random(3))
            pair = reflect(x, mean, k)
            violations += int(np.count_nonzero(pair.reflected + k * pair.origin))
    ok = violations == 0
    record(5, ok, f"nonzero entries of reflected + k*origin over 60 images: {violations}")
    assert ok


# --- 6 and 7: overfit experiment ---

@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    generate_synthetic(SyntheticSceneSpec(size=(64, 64), seed=0), 8, root)
    return SaliencyDataset(root, "train", (64, 64))


_RUNS = {}


def overfit_run(dataset, preset, seed):
    """Train on the 8 images without augmentation; returns (log, report on the same images)."""
    key = (preset, seed)
    if key not in _RUNS:
        from reflect_sod.training import Trainer
        config = cfg.load_config(None, [f"train.ablation_preset={preset}", f"train.seed={seed}",
                                        "train.augment=false", f"train.max_steps={OVERFIT_STEPS}"])
        trainer = Trainer(config, dataset)
        trainer.run(OVERFIT_STEPS)
        _RUNS[key] = (list(trainer.log), trainer.evaluate(dataset))
    return _RUNS[key]


@pytest.mark.slow
def test_criterion_6_overfit(overfit_data):
    start = time.perf_counter()
    log, report = overfit_run(overfit_data, "full", 0)
    elapsed = time.perf_counter() - start
    ratio = log[-1].total / log[9].total
    ok = (ratio < 0.25 and report.f_max > 0.95 and report.mae < 0.05 and report.s_measure > 0.90
          and elapsed < 900)
    record(6, ok, f"{len(log)} steps in {elapsed:.0f}s: loss {log[9].total:.4f} (step 10) -> {log[-1].total:.4f} "
                  f"(ratio {ratio:.3f}), max-F {report.f_max:.4f}, MAE {report.mae:.4f}, "
                  f"S {report.s_measure:.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_7_ablation(overfit_data):
    means = {}
    for preset in ("a", "b", "c", "full"):
        reports = [overfit_run(overfit_data, preset, seed)[1] for seed in ABLATION_SEEDS]
        means[preset] = (np.mean([r.f_max for r in reports]), np.mean([r.mae for r in reports]))
    f_gap = means["a"][0] - means["b"][0]
    mae_gap = means["full"][1] - means["c"][1]
    ok = f_gap <= 0.02 and mae_gap <= 0.02
    record(7, ok, f"max-F (a) {means['a'][0]:.4f} vs (b) {means['b'][0]:.4f}; MAE (c) {means['c'][1]:.4f} "
                  f"vs full {means['full'][1]:.4f} ({len(ABLATION_SEEDS)} seeds)")
    assert ok


# --- 8 ---

def test_criterion_8_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--n", "6", "--size", "32", "--seed", "3", "--out", str(data)]) == 0
    common = ["train", "--data", str(data), "--set", "model.input_size=[32,32]", "--set", "train.eval_every=50",
              "--set", "train.plateau_patience=10"]
    for run in ("r1", "r2"):
        assert main(common + ["--out", str(tmp_path / run), "--steps", "100"]) == 0
    names = ("checkpoint.ckpt", "checkpoint_000050.ckpt", "checkpoint_000100.ckpt", "train_log.csv")
    identical = all((tmp_path / "r1" / n).read_bytes() == (tmp_path / "r2" / n).read_bytes() for n in names)
    assert main(common + ["--out", str(tmp_path / "resumed"), "--steps", "100",
                          "--resume", str(tmp_path / "r1" / "checkpoint_000050.ckpt")]) == 0
    resumed = all((tmp_path / "r1" / n).read_bytes() == (tmp_path / "resumed" / n).read_bytes()
                  for n in ("checkpoint.ckpt", "train_log.csv"))
    with open(tmp_path / "resumed" / "train_log.csv") as fh:
        steps = [int(r["step"]) for r in csv.DictReader(fh)]
    ok = identical and resumed and steps == list(range(1, 101))
    record(8, ok, f"repeat run bitwise identical: {identical}; resume 50 -> 100 identical: {resumed}")
    assert ok


# --- 9 ---

def test_criterion_9_s_measure():
    rng = np.random.default_rng(9)
    masks = _masks(50, 48, 48, seed=9)
    self_scores, inverted, flipped = [], [], []
    for g in masks:
        gf = g.astype(np.float64)
        self_scores.append(s_measure(gf, g))
        noisy = g.copy()
        idx = rng.choice(g.size, size=int(round(0.05 * g.size)), replace=False)
        noisy.flat[idx] = ~noisy.flat[idx]
        inverted.append(s_measure(1.0 - gf, g))
        flipped.append(s_measure(noisy.astype(np.float64), g))
    self_ok = all(1 - 1e-6 <= s <= 1 for s in self_scores)
    order_ok = all(i < f for i, f in zip(inverted, flipped))
    ok = self_ok and order_ok
    record(9, ok, f"S(g, g) in [{min(self_scores):.9f}, {max(self_scores):.9f}]; S(1-g, g) max "
                  f"{max(inverted):.4f} < 5%-flip min {min(flipped):.4f}: {order_ok}")
    assert ok
