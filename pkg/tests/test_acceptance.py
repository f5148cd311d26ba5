"""Acceptance gate: one test per top-level criterion, each printing a PASS/FAIL line."""

import contextlib
import math
import time

import numpy as np
import pytest
from scipy.integrate import quad

from oracles import brute_force_assignment, central_difference, relative_error
from ovdkit.denoise import label_denoise_queries, make_noise_group, noise_box_array
from ovdkit.evalkit import COCO_THRESHOLDS, DetectionRecord, GroundTruth, ap_at_iou, recall_at_iou
from ovdkit.foreground import ForegroundEstimator, WeibullParams, fit, foreground_likelihood, pdf, sample, scale_scores
from ovdkit.geometry import Box, iou_matrix
from ovdkit.harness import ScenarioConfig, SimulationConfig, simulate, synth_dataset
from ovdkit.losses import FocalParams, focal_loss, giou_loss, l1_box_loss
from ovdkit.matcher import WILDCARD, UnknownObject, hungarian, pseudo_loss, wildcard_loss
from ovdkit.pipeline import FilterConfig, OracleProposalSource, run_pipeline

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def report(capsys):
    """Yields a callable ``report(name, detail)`` used inside a ``with`` block."""

    @contextlib.contextmanager
    def run(name):
        detail = {}
        start = time.perf_counter()
        ok = False
        try:
            yield detail
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            extra = "  ".join(f"{k}={v}" for k, v in detail.items())
            with capsys.disabled():
                print(f"\n[{'PASS' if ok else 'FAIL'}] {name} ({elapsed:.2f}s) {extra}")

    return run


def test_hungarian_exactness(report):
    with report("hungarian exactness") as d:
        rng = np.random.default_rng(2024)
        problems = []
        for _ in range(200):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(n, 8))
            problems.append(rng.uniform(0, 10, (n, m)))
        start = time.perf_counter()
        solved = [hungarian(c).total_cost for c in problems]
        solver_time = time.perf_counter() - start
        mismatches = sum(s != brute_force_assignment(c) for s, c in zip(solved, problems))
        d["matrices"] = len(problems)
        d["mismatches"] = mismatches
        d["solver_s"] = f"{solver_time:.3f}"
        assert mismatches == 0
        assert solver_time < 1.0


def _far_from_ties(b: np.ndarray, bh: np.ndarray, margin: float = 1e-3) -> bool:
    c1 = np.array([b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2])
    c2 = np.array([bh[0] - bh[2] / 2, bh[1] - bh[3] / 2, bh[0] + bh[2] / 2, bh[1] + bh[3] / 2])
    xs1, xs2 = c1[[0, 2]], c2[[0, 2]]
    ys1, ys2 = c1[[1, 3]], c2[[1, 3]]
    gaps = np.concatenate([np.abs(xs1[:, None] - xs2[None]).ravel(), np.abs(ys1[:, None] - ys2[None]).ravel()])
    return bool(np.all(gaps > margin) and np.all(np.abs(b - bh) > margin))


def test_gradient_checks(report):
    with report("loss gradients vs central differences") as d:
        start = time.perf_counter()
        rng = np.random.default_rng(99)
        fp = FocalParams()
        worst = {"focal": 0.0, "l1": 0.0, "giou": 0.0}
        count = 0
        while count < 1000:
            b = rng.uniform([0.2, 0.2, 0.05, 0.05], [0.8, 0.8, 0.4, 0.4])
            bh = rng.uniform([0.2, 0.2, 0.05, 0.05], [0.8, 0.8, 0.4, 0.4])
            if not _far_from_ties(b, bh):
                continue
            count += 1
            p, t = float(rng.uniform(0.01, 0.99)), int(rng.integers(2))
            g = focal_loss(p, t, fp)[1]
            fd = central_difference(lambda x: focal_loss(x[0], t, fp)[0], [p])
            worst["focal"] = max(worst["focal"], relative_error([g], fd))
            g = l1_box_loss(Box(*b), Box(*bh))[1]
            fd = central_difference(lambda x: l1_box_loss(Box(*b), Box(*x))[0], bh)
            worst["l1"] = max(worst["l1"], relative_error(g, fd))
            g = giou_loss(Box(*b), Box(*bh))[1]
            fd = central_difference(lambda x: giou_loss(Box(*b), Box(*x))[0], bh)
            worst["giou"] = max(worst["giou"], relative_error(g, fd))
        elapsed = time.perf_counter() - start
        d.update({k: f"{v:.1e}" for k, v in worst.items()})
        d["inputs"] = count
        assert max(worst.values()) < 1e-4
        assert elapsed < 5.0


def test_weibull_recovery(report):
    with report("exponentiated Weibull recovery and normalization") as d:
        start = time.perf_counter()
        for seed, (a, c) in enumerate([(1, 1), (2.5, 1.2), (0.7, 2)]):
            got = fit(sample(WeibullParams(a, c), 10_000, seed=seed))
            err = max(abs(got.a - a) / a, abs(got.c - c) / c)
            f = lambda x: pdf(x, WeibullParams(a, c)) if x > 0 else 0.0
            mass = quad(f, 0, 1, limit=200, epsabs=1e-12)[0] + quad(f, 1, np.inf, limit=200, epsabs=1e-12)[0]
            d[f"({a},{c})"] = f"rel={err:.4f},mass={mass:.9f}"
            assert err < 0.05
            assert abs(mass - 1.0) < 1e-6
        assert time.perf_counter() - start < 10.0


def test_foreground_score_semantics(report):
    with report("foreground likelihood and score scaling") as d:
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = WeibullParams(*rng.uniform(0.3, 4, 2))
            eta = rng.uniform(0.01, 5, 100)
            assert np.all(foreground_likelihood(eta, ForegroundEstimator(p, p)) == 0.5)
        w = rng.uniform(0, 1, 1000)
        assert np.all(scale_scores(w, 0.0) == 1.0)
        for gamma in rng.uniform(0, 4, 50):
            order = np.argsort(w)
            assert np.all(np.diff(scale_scores(w, gamma)[order]) >= 0)
        d["checks"] = "equal-params=0.5, gamma0=1, order-preserving"


def test_denoise_statistics(report):
    with report("denoising box and label statistics") as d:
        start = time.perf_counter()
        n = 100_000
        src = Box(0.5, 0.5, 0.2, 0.3)
        boxes = noise_box_array(src, n, seed=7)
        ious = iou_matrix(src.to_array()[None], boxes)[0]
        pos, neg = ious[:n], ious[n:]
        g = label_denoise_queries(make_noise_group(UnknownObject(src, 0.9, 1.0), n, seed=8), 0.25, 10, seed=9)
        freq = float(np.mean(np.array(g.conditions[n:]) != WILDCARD))
        elapsed = time.perf_counter() - start
        d.update(min_pos_iou=f"{pos.min():.4f}", pos_mean=f"{pos.mean():.4f}", neg_mean=f"{neg.mean():.4f}", rho_hat=f"{freq:.4f}")
        assert np.all(pos > 0)
        assert pos.mean() > neg.mean()
        assert abs(freq - 0.25) <= 0.01
        assert elapsed < 10.0


def test_pseudo_loss_box_insensitive(report):
    with report("pseudo-label loss ignores predicted boxes") as d:
        rng = np.random.default_rng(11)
        for _ in range(200):
            us = [
                UnknownObject(Box(*rng.uniform([0.1, 0.1, 0.05, 0.05], [0.9, 0.9, 0.4, 0.4])), 0.9, float(rng.uniform()))
                for _ in range(int(rng.integers(1, 5)))
            ]
            preds = [
                (Box(*rng.uniform([0.1, 0.1, 0.05, 0.05], [0.9, 0.9, 0.4, 0.4])), float(rng.uniform(0.01, 0.99)))
                for _ in range(len(us) + int(rng.integers(0, 4)))
            ]
            _, a = wildcard_loss(us, preds)
            before = pseudo_loss(us, preds, a)
            moved = [(Box(*rng.uniform([0, 0, 0, 0], [1, 1, 1, 1])), m) for _, m in preds]
            assert pseudo_loss(us, moved, a) - before == 0.0
        d["trials"] = 200


def _det(box, conf, cat=0, image=0):
    return DetectionRecord(image, box, cat, conf)


def _gt(box, cat=0, image=0):
    return GroundTruth(image, box, cat)


def test_metric_oracle(report):
    with report("evaluator on hand-traced scenes") as d:
        A, B = Box(0.25, 0.25, 0.2, 0.2), Box(0.75, 0.75, 0.2, 0.2)
        off = Box(0.75, 0.25, 0.1, 0.1)
        shifted = Box(0.35, 0.25, 0.2, 0.2)  # IoU 1/3 with A
        scenes = {
            "perfect": (ap_at_iou([_det(A, 0.9), _det(B, 0.8)], [_gt(A), _gt(B)])[0], 1.0),
            "duplicate": (ap_at_iou([_det(A, 0.9), _det(B, 0.8), _det(A, 0.7)], [_gt(A), _gt(B)])[0], 1.0),
            "fp-first": (ap_at_iou([_det(off, 0.9), _det(A, 0.8)], [_gt(A)])[0], 0.5),
            "tp-fp-tp": (ap_at_iou([_det(A, 0.9), _det(off, 0.8), _det(B, 0.7)], [_gt(A), _gt(B)])[0], 253 / 303),
            "shift@0.5": (ap_at_iou([_det(shifted, 0.9)], [_gt(A)], 0.5)[0], 0.0),
            "shift@0.3": (ap_at_iou([_det(shifted, 0.9)], [_gt(A)], 0.3)[0], 1.0),
            "no-dets-category": (ap_at_iou([_det(A, 0.9)], [_gt(A), _gt(B, cat=1)])[1], 0.0),
            "dup-recall": (recall_at_iou({0: [A, B, A]}, {0: [A, B]}), 1.0),
            "recall-2of3": (recall_at_iou({0: [A, B]}, {0: [A, B, Box(0.25, 0.75, 0.2, 0.2)]}), 2 / 3),
        }
        for name, (got, want) in scenes.items():
            assert abs(got - want) <= 1e-12, (name, got, want)
        rng = np.random.default_rng(12)
        for _ in range(200):
            gts, dets = [], []
            for img in range(3):
                for _ in range(int(rng.integers(1, 5))):
                    box = Box(*rng.uniform([0.2, 0.2, 0.05, 0.05], [0.8, 0.8, 0.3, 0.3]))
                    gts.append(_gt(box, 0, img))
                    moved = Box.clamped(*(box.to_array() + rng.normal(0, 0.03, 4)))
                    dets.append(_det(moved, float(rng.uniform()), 0, img))
            aps = [ap_at_iou(dets, gts, t)[0] for t in COCO_THRESHOLDS]
            assert all(y <= x for x, y in zip(aps, aps[1:]))
        d["scenes"] = len(scenes)
        d["monotone_trials"] = 200


def test_pipeline_trend(report):
    with report("pseudo-label recall non-decreasing over iterations") as d:
        start = time.perf_counter()
        fe = ForegroundEstimator(WeibullParams(3, 2), WeibullParams(1, 1))
        for seed in SEEDS:
            dataset, _ = synth_dataset(ScenarioConfig(seed=seed))
            src = OracleProposalSource(dataset, seed=seed)
            _, log = run_pipeline(dataset, src, 3, FilterConfig(), fe, src.eta)
            d[f"seed{seed}"] = "/".join(f"{v:.3f}" for v in log)
            assert all(y >= x for x, y in zip(log, log[1:]))
        assert time.perf_counter() - start < 60.0


def test_ablation_directions(report):
    with report("wildcard and selection ablations") as d:
        for seed in SEEDS:
            sc = ScenarioConfig(seed=seed)
            full = simulate(SimulationConfig(scenario=sc)).diagnostics
            no_wild = simulate(SimulationConfig(scenario=sc, wildcard=False)).diagnostics
            no_sim = simulate(SimulationConfig(scenario=sc, alpha=0.0)).diagnostics
            d[f"seed{seed}"] = (
                f"AR[{no_wild['novel_matched_ar50']:.3f}->{full['novel_matched_ar50']:.3f}]"
                f"sel[{no_sim['novel_selection_recall']:.3f}->{full['novel_selection_recall']:.3f}]"
            )
            assert full["novel_matched_ar50"] > no_wild["novel_matched_ar50"]
            assert full["novel_selection_recall"] >= no_sim["novel_selection_recall"]


def test_simulate_determinism(report, tmp_path):
    with report("simulate byte-identical artifacts") as d:
        cfg = SimulationConfig(scenario=ScenarioConfig(seed=3))
        simulate(cfg, tmp_path / "a")
        simulate(cfg, tmp_path / "b")
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        d["files"] = len(files)
