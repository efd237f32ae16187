"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary block at
the end of the pytest output lists every criterion.
"""

import math
import time

import numpy as np
import pytest

from discgan import tensor as T
from discgan.clustering import assign_cluster, elbow_scan, extract_style_features, kmeans_fit, suggest_k
from discgan.metrics import FeatureCloud, fid, frechet_distance, psnr, sqrtm_eigh, sqrtm_newton_schulz, ssim
from discgan.network import StyleBank, encode_content, encode_style, generate, init_generator
from discgan.physics import WaterType, load_water_types, render_underwater
from discgan.scenes import build_dataset
from discgan.tensor import Tensor
from discgan.training import ClusterData, Pair, TrainConfig, init_params, reconstruction_l1, synthesize, train_cluster

from gradcheck import worst_case_error
from oracles import blobs, exhaustive_kmeans
from pipeline_runs import run_smoke, tree_bytes


def test_autodiff_correctness(criterion):
    start = time.perf_counter()
    errors = worst_case_error(range(5))
    worst_op = max(errors, key=errors.get)
    rng = np.random.default_rng(0)
    adjoint_gap = 0.0
    for stride, padding, size in [(1, 0, 5), (1, 1, 6), (2, 1, 5), (2, 0, 7), (3, 2, 8)]:
        for _ in range(5):
            k = rng.standard_normal((3, 2, 3, 3))
            x = rng.standard_normal((2, 2, size, size))
            fwd = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
            y = rng.standard_normal(fwd.shape)
            back = T.conv2d_transpose(Tensor(y), Tensor(k), stride=stride, padding=padding).data
            adjoint_gap = max(adjoint_gap, abs(np.sum(fwd * y) - np.sum(x * back)))
    elapsed = time.perf_counter() - start
    passed = errors[worst_op] < 1e-4 and adjoint_gap < 1e-10 and elapsed < 60
    criterion(1, "autodiff", passed,
              f"{len(errors)} ops x 5 seeds, worst rel err {errors[worst_op]:.2e} ({worst_op}); "
              f"adjoint gap {adjoint_gap:.1e}; {elapsed:.1f}s")
    assert passed


def test_renderer_physics(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    img = rng.random((8, 8, 3))
    depth = rng.random((8, 8)) * 10
    murky = WaterType("murky", (0.8, 0.4, 0.3), (0.1, 0.3, 0.5))
    identity = (np.array_equal(render_underwater(img, np.zeros((8, 8)), murky), img)
                and np.array_equal(render_underwater(img, depth, WaterType("clear", (0, 0, 0), (0.2, 0.5, 0.7))), img))
    violations = 0
    draws = 0
    for _ in range(1000):
        J = rng.random((1, 1000, 3))
        d = rng.exponential(5.0, (1, 1000))
        water = WaterType("w", tuple(rng.exponential(1.0, 3)), tuple(rng.random(3)))
        out = render_underwater(J, d, water)
        B = np.asarray(water.B)
        violations += int(np.sum((out < np.minimum(J, B)) | (out > np.maximum(J, B))))
        draws += J.shape[1]
    limit_gap = 0.0
    for _ in range(200):
        K = rng.uniform(0.01, 5.0, 3)
        B = rng.random(3)
        water = WaterType("w", tuple(K), tuple(B))
        d = np.full((1, 1), 20.0 / K.min()) * rng.uniform(1.0, 3.0)
        limit_gap = max(limit_gap, float(np.abs(render_underwater(rng.random((1, 1, 3)), d, water) - B).max()))
    elapsed = time.perf_counter() - start
    passed = identity and violations == 0 and draws >= 10**6 and limit_gap < 1e-6 and elapsed < 30
    criterion(2, "renderer", passed,
              f"identities exact={identity}; {violations} convexity violations in {draws} draws; "
              f"K*d>=20 gap {limit_gap:.1e}; {elapsed:.1f}s")
    assert passed


def test_clustering_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    monotone = True
    for draw in range(50):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(3, n) + 1))
        X = rng.random((n, int(rng.integers(1, 4))))
        model = kmeans_fit(X, k, seed=draw, restarts=16)
        worst = max(worst, abs(model.inertia - exhaustive_kmeans(X, k)))
        monotone &= all(all(b <= a for a, b in zip(tr, tr[1:])) for tr in model.restart_traces)
    elapsed = time.perf_counter() - start
    passed = worst < 1e-9 and monotone and elapsed < 60
    criterion(3, "clustering oracle", passed,
              f"50 draws, max |inertia - optimum| {worst:.1e}; traces monotone={monotone}; {elapsed:.1f}s")
    assert passed


def test_elbow_recovery(criterion):
    start = time.perf_counter()
    hits = sum(suggest_k(elbow_scan(blobs(seed)[0], range(2, 9), seed=seed)) == 4 for seed in range(100))
    elapsed = time.perf_counter() - start
    passed = hits >= 95 and elapsed < 120
    criterion(4, "elbow", passed, f"suggest_k == 4 on {hits}/100 seeds; {elapsed:.1f}s")
    assert passed


def test_adain_contract(criterion):
    bank = StyleBank(0)
    worst = 0.0
    injections = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        gen = init_generator(rng)
        size = int(rng.choice([16, 32, 64]))
        content = list(rng.random((3, size, size, 3)))
        style = list(rng.random((3, size, size, 3)) ** rng.uniform(0.3, 3.0))
        code = encode_style(style, bank, with_gram=False)
        taps = []
        generate(encode_content(content, gen), code, gen, taps=taps)
        for tap, (m, s) in zip(taps, code.injection_targets()):
            mean, std = T.instance_stats(tap)
            worst = max(worst, float(np.abs(mean.data - m).max()), float(np.abs(std.data - s).max()))
            injections += 1
    passed = worst < 1e-4 and injections == 20
    criterion(5, "AdaIN contract", passed, f"{injections} injections over 10 pairs, max stat error {worst:.1e}")
    assert passed


def test_metric_golden_values(criterion):
    rng = np.random.default_rng(3)
    X = rng.standard_normal((40, 5))
    checks = {
        "fid(X,X)": fid(FeatureCloud(X), FeatureCloud(X)) < 1e-8,
        "fid 1-D mean shift": abs(frechet_distance([0.0], [[1.0]], [1.0], [[1.0]]) - 1.0) < 1e-9,
        "fid 1-D variance": abs(frechet_distance([0.0], [[4.0]], [0.0], [[1.0]]) - 1.0) < 1e-9,
    }
    img = rng.random((16, 16, 3))
    checks["ssim(x,x)"] = ssim(img, img) == 1.0
    c1 = 0.01 ** 2
    checks["ssim constants"] = abs(ssim(np.zeros((8, 8, 3)), np.ones((8, 8, 3))) - c1 / (1 + c1)) < 1e-9
    checks["psnr 20 dB"] = abs(psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) - 20.0) < 1e-9
    worst_sqrt = 0.0
    for dim in range(1, 17):
        A = rng.standard_normal((dim, dim))
        A = A @ A.T + 0.1 * np.eye(dim)
        worst_sqrt = max(worst_sqrt, float(np.abs(sqrtm_eigh(A) - sqrtm_newton_schulz(A)).max()))
    checks["sqrtm cross-check"] = worst_sqrt < 1e-6
    failed = [k for k, ok in checks.items() if not ok]
    passed = not failed
    criterion(6, "metric golden values", passed,
              f"{len(checks) - len(failed)}/{len(checks)} checks, sqrtm routes differ by {worst_sqrt:.1e}"
              + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert passed


def _smoke_training(seed):
    """16 scenes at 32x32 under 4 water types, k=4, 30 epochs per cluster."""
    train, val = build_dataset(16, 0.8, seed=seed, resolution=32)
    waters = load_water_types()
    assert len(waters) == 4

    def render(samples):
        return [(s, render_underwater(s.image, s.depth, w)) for s in samples for w in waters]

    train_r, val_r = render(train), render(val)
    model = kmeans_fit([extract_style_features(r, s.depth) for s, r in train_r], 4, seed=seed)
    val_labels = [assign_cluster(model, extract_style_features(r, s.depth)) for s, r in val_r]
    bank = StyleBank(seed)
    config = TrainConfig(epochs=30, batch_size=4, lambda_rec=100.0, lambda_adv=1.0, lr=2e-4,
                         beta1=0.5, beta2=0.999, seed=seed, resolution=32)
    results = {}
    for c in range(4):
        pairs = [Pair(s.id, s.image, r) for (s, r), lab in zip(train_r, model.labels) if lab == c]
        vpairs = [Pair(s.id, s.image, r) for (s, r), lab in zip(val_r, val_labels) if lab == c]
        data = ClusterData(pairs, vpairs)
        initial = reconstruction_l1(init_params(seed, c)[0], pairs, data.pool(), bank, np.random.default_rng(c))
        gen, log = train_cluster(c, data, config, bank=bank)
        final = reconstruction_l1(gen, pairs, data.pool(), bank, np.random.default_rng(c))
        outputs = [synthesize(p.content, c, data.pool(), gen, seed, bank) for p in vpairs]
        results[c] = dict(initial=initial, final=final, log=log, outputs=outputs,
                          depths=[s.depth for (s, _), lab in zip(val_r, val_labels) if lab == c])
    return model, results


@pytest.mark.slow
def test_training_smoke(criterion):
    start = time.perf_counter()
    model, first = _smoke_training(seed=0)
    _, second = _smoke_training(seed=0)
    ratios = {c: r["final"] / r["initial"] for c, r in first.items()}
    halved = all(v < 0.5 for v in ratios.values())
    identical = all(first[c]["log"] == second[c]["log"] and len(first[c]["log"]) == 30 for c in first)
    hits = total = 0
    for c, r in first.items():
        for out, depth in zip(r["outputs"], r["depths"]):
            v = extract_style_features(out, depth).vector()
            d = np.sum((model.centroids - v) ** 2, axis=1)
            hits += bool(np.all(d[c] < np.delete(d, c)))
            total += 1
    share = hits / total if total else math.nan
    elapsed = time.perf_counter() - start
    passed = halved and identical and total > 0 and share >= 0.75
    detail = ", ".join(f"c{c} {first[c]['initial']:.3f}->{first[c]['final']:.3f}" for c in first)
    criterion(7, "training smoke", passed,
              f"(a) L1 {detail}; (b) logs bit-identical={identical}; "
              f"(c) {hits}/{total} outputs nearest own centroid; {elapsed:.0f}s incl. repeat run")
    assert passed


@pytest.mark.slow
def test_pipeline_determinism(criterion, tmp_path):
    start = time.perf_counter()
    raw = {"seed": 11, "dataset": {"n_scenes": 32}, "clustering": {"k": 4}, "train": {"epochs": 5}}
    a = tree_bytes(run_smoke(tmp_path / "a", raw))
    b = tree_bytes(run_smoke(tmp_path / "b", raw))
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    elapsed = time.perf_counter() - start
    passed = not differing and len(a) > 0
    criterion(8, "pipeline determinism", passed,
              f"{len(a)} files compared, {len(differing)} differ; {elapsed:.0f}s for two runs")
    assert passed, differing[:5]
