#!/usr/bin/env python3
import json
import math

import numpy as np
import pytest
from scipy import linalg

from aligndiff.embeddings import ParamSpaceProvider, PixelStatProvider
from aligndiff.metrics import (
    MetricReport,
    accuracy,
    evaluate_sets,
    f1,
    frechet_distance,
    gaussian_stats,
    match_pairs,
    meteor_lite,
    mse,
    ncc,
    plip_i,
    psnr,
    recall_at_k,
    silhouette,
    ssim,
)


def random_image(seed, high=1.0):
    return np.random.default_rng(seed).uniform(0.0, high, (32, 32, 3))


def brute_silhouette(x, labels):
    n = len(x)
    scores = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = np.mean([np.linalg.norm(x[i] - x[j]) for j in own])
        b = min(
            np.mean([np.linalg.norm(x[i] - x[j]) for j in range(n) if labels[j] == other])
            for other in set(labels) - {labels[i]}
        )
        scores.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
    return float(np.mean(scores))


def brute_recall(q, g, gt, k):
    hits = 0
    for i in range(len(q)):
        sims = [q[i] @ g[j] / (np.linalg.norm(q[i]) * np.linalg.norm(g[j])) for j in range(len(g))]
        better = sum(1 for j, s in enumerate(sims) if s > sims[gt[i]] or (s == sims[gt[i]] and j < gt[i]))
        hits += better < k
    return hits / len(q)


@pytest.mark.fast
def test_gaussian_stats_examples():
    same = gaussian_stats(np.ones((5, 3)))
    assert np.array_equal(same.cov, np.zeros((3, 3)))
    pair = gaussian_stats(np.array([[1.0], [-1.0]]))
    assert pair.mean.tolist() == [0.0]
    assert pair.cov.tolist() == [[2.0]]
    x = np.random.default_rng(0).normal(size=(20, 4))
    a, b = gaussian_stats(x), gaussian_stats(x[::-1])
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-12)
    with pytest.raises(ValueError):
        gaussian_stats(np.ones((1, 3)))


@pytest.mark.fast
def test_frechet_distance_identity():
    stats = gaussian_stats(np.random.default_rng(1).normal(size=(50, 6)))
    assert frechet_distance(stats, stats) <= 1e-8


@pytest.mark.fast
def test_frechet_distance_shifted_mean():
    x = np.random.default_rng(2).normal(size=(40, 5))
    v = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
    assert frechet_distance(gaussian_stats(x), gaussian_stats(x + v)) == pytest.approx(v @ v, abs=1e-8)


@pytest.mark.fast
def test_frechet_distance_diagonal_closed_form():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(400, 4)) * np.array([1.0, 2.0, 0.5, 3.0]) + 1.0
    y = rng.normal(size=(400, 4)) * np.array([2.0, 0.3, 1.0, 1.5])
    r, s = gaussian_stats(x), gaussian_stats(y)
    r_diag = r.__class__(mean=r.mean, cov=np.diag(np.diag(r.cov)), n=r.n)
    s_diag = s.__class__(mean=s.mean, cov=np.diag(np.diag(s.cov)), n=s.n)
    expected = float(np.sum((r.mean - s.mean) ** 2) + np.sum((np.sqrt(np.diag(r.cov)) - np.sqrt(np.diag(s.cov))) ** 2))
    assert frechet_distance(r_diag, s_diag) == pytest.approx(expected, abs=1e-6)


@pytest.mark.fast
def test_frechet_distance_matches_sqrtm_reference():
    rng = np.random.default_rng(4)
    r = gaussian_stats(rng.normal(size=(60, 5)))
    s = gaussian_stats(rng.normal(size=(60, 5)) @ rng.normal(size=(5, 5)))
    covmean = linalg.sqrtm(r.cov @ s.cov).real
    diff = r.mean - s.mean
    expected = diff @ diff + np.trace(r.cov) + np.trace(s.cov) - 2 * np.trace(covmean)
    assert frechet_distance(r, s) == pytest.approx(expected, rel=1e-6)


@pytest.mark.fast
def test_frechet_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        frechet_distance(gaussian_stats(np.eye(3)), gaussian_stats(np.eye(4)))


@pytest.mark.fast
def test_plip():
    v = np.array([0.2, 0.4, 0.1])
    assert plip_i(v, v) == pytest.approx(1.0, abs=1e-12)
    assert plip_i(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    with pytest.raises(ValueError):
        plip_i(np.zeros(2), np.ones(2))


@pytest.mark.fast
def test_silhouette_separation_limit():
    scores = []
    for gap in (1.0, 10.0, 1000.0):
        points = np.array([[0.0, 0.0], [0.1, 0.0], [gap, 0.0], [gap + 0.1, 0.0]])
        scores.append(silhouette(points, [0, 0, 1, 1]))
    assert scores[0] < scores[1] < scores[2]
    assert scores[2] > 0.999


@pytest.mark.fast
def test_silhouette_identical_points():
    assert silhouette(np.zeros((6, 3)), [0, 0, 0, 1, 1, 1]) == 0.0


@pytest.mark.fast
def test_silhouette_matches_brute_force():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(40, 3))
    labels = list(np.arange(40) % 3)
    assert silhouette(x, labels) == pytest.approx(brute_silhouette(x, labels), abs=1e-9)


@pytest.mark.fast
def test_silhouette_errors():
    with pytest.raises(ValueError):
        silhouette(np.zeros((1, 2)), [0])
    with pytest.raises(ValueError):
        silhouette(np.zeros((4, 2)), [0, 0, 0, 0])


@pytest.mark.fast
def test_recall_self_retrieval():
    x = np.random.default_rng(6).normal(size=(20, 8))
    assert recall_at_k(x, x, np.arange(20), k=1) == 1.0
    assert recall_at_k(x, x[::-1], np.arange(20), k=20) == 1.0


@pytest.mark.fast
def test_recall_matches_brute_force():
    rng = np.random.default_rng(7)
    q, g = rng.normal(size=(100, 6)), rng.normal(size=(100, 6))
    gt = rng.integers(0, 100, size=100)
    for k in (1, 5, 10):
        assert recall_at_k(q, g, gt, k) == brute_recall(q, g, gt, k)


@pytest.mark.fast
def test_recall_errors():
    x = np.ones((3, 2))
    with pytest.raises(ValueError):
        recall_at_k(x, x, [0, 1, 2], k=0)
    with pytest.raises(ValueError):
        recall_at_k(x, np.zeros((0, 2)), [0, 1, 2])
    with pytest.raises(ValueError):
        recall_at_k(x, x, [0, 1, 3])


@pytest.mark.fast
def test_accuracy_and_f1():
    labels = [0, 1, 2, 1]
    assert accuracy(labels, labels) == 1.0
    assert f1(labels, labels) == 1.0
    assert accuracy([1, 0, 0], [0, 1, 1]) == 0.0
    assert f1([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


@pytest.mark.fast
def test_f1_uses_declared_classes():
    true = [0, 1, 0, 1]
    pred = [0, 1, 1, 1]
    assert f1(pred, true) == pytest.approx(0.8)
    per_class = [2 / 3, 0.8, 0.0, 0.0]
    assert f1(pred, true, n_classes=4) == pytest.approx(np.mean(per_class))
    assert f1(pred, true, n_classes=2) == pytest.approx(0.8)
    labels = [0, 1, 2, 3]
    assert f1(labels, labels, n_classes=4) == 1.0
    assert f1([-1, 1, 2, 3], labels, n_classes=4) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        f1(labels, labels, n_classes=1)


@pytest.mark.fast
def test_meteor():
    ref = "a carcinoma patch with many large nuclei"
    m = 7
    assert meteor_lite(ref, ref) == pytest.approx(1 - 0.5 / m**3, abs=1e-12)
    assert meteor_lite("zebra stripes", ref) == 0.0
    assert meteor_lite("", ref) == 0.0
    assert meteor_lite("nuclei patch a", "a patch nuclei") == pytest.approx(0.5, abs=1e-12)
    recall = 3 / 7
    fmean = recall / (0.9 * 1.0 + 0.1 * recall)
    assert meteor_lite("a carcinoma patch", ref) == pytest.approx(fmean * (1 - 0.5 / 27), abs=1e-12)


@pytest.mark.fast
def test_meteor_long_reference():
    words = [f"w{i}" for i in range(20)]
    text = " ".join(words)
    assert meteor_lite(text, text) == pytest.approx(1 - 0.5 / 20**3, abs=1e-12)


@pytest.mark.fast
def test_image_metrics_identity():
    x = random_image(0)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert mse(x, x) == 0.0
    assert ncc(x, x) == pytest.approx(1.0, abs=1e-12)
    assert psnr(x, x) == math.inf


@pytest.mark.fast
def test_ssim_uses_one_global_window():
    x, y = random_image(2), random_image(3)
    order = np.random.default_rng(5).permutation(32 * 32)

    def shuffle(img):
        return img.reshape(-1, 3)[order].reshape(32, 32, 3)

    assert ssim(shuffle(x), shuffle(y)) == pytest.approx(ssim(x, y), abs=1e-12)
    assert ssim(x, y) < 1.0


@pytest.mark.fast
def test_ncc_of_inverted_image():
    x = random_image(1)
    assert ncc(x, 1.0 - x) == pytest.approx(-1.0, abs=1e-12)


@pytest.mark.fast
def test_constant_offset():
    x = random_image(2, high=0.9)
    y = x + 0.1
    assert mse(x, y) == pytest.approx(0.01, abs=1e-12)
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-8)


@pytest.mark.fast
def test_image_metric_errors():
    with pytest.raises(ValueError):
        ncc(np.full((32, 32, 3), 0.5), random_image(3))
    with pytest.raises(ValueError):
        mse(random_image(0), np.zeros((16, 16, 3)))
    with pytest.raises(ValueError):
        ssim(random_image(0), np.full((32, 32, 3), 2.0))


@pytest.mark.fast
def test_match_pairs_in_occurrence_order():
    real = ["a", "b", "a", "c"]
    synth = ["a", "a", "a", "d", "c"]
    assert match_pairs(real, synth) == [(0, 0), (2, 1), (3, 4)]


@pytest.mark.fast
def test_report_files(tmp_path):
    report = MetricReport(provider="paramspace", seed=3)
    report.add("fid", "synth_vs_real", 1.5)
    report.add("psnr", "paired", math.inf)
    assert report.get("psnr", "paired") == math.inf
    report.write(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "metric,dataset,value"
    report.write(tmp_path / "r.json")
    loaded = json.loads((tmp_path / "r.json").read_text())
    assert loaded["metrics"]["synth_vs_real"]["fid"] == 1.5
    assert loaded["metrics"]["paired"]["psnr"] == math.inf
    with pytest.raises(ValueError):
        report.write(tmp_path / "r.txt")
    with pytest.raises(KeyError):
        report.get("fid", "paired")


@pytest.mark.fast
def test_evaluate_real_against_itself(corpus):
    images = [s.image for s in corpus]
    captions = [s.caption for s in corpus]
    report = evaluate_sets(images, captions, images, captions, ParamSpaceProvider(4), seed=0)
    assert report.get("fid", "synth_vs_real") <= 1e-6
    assert report.get("plip_i", "paired") == pytest.approx(1.0, abs=1e-12)
    assert report.get("mse", "paired") == 0.0
    assert report.get("psnr", "paired") == math.inf
    assert report.get("ssim", "paired") == pytest.approx(1.0, abs=1e-12)
    for metric in ("plip_t", "r@5_image_to_text", "r@5_text_to_image", "silhouette", "accuracy", "f1", "meteor"):
        assert any(m == metric for m, _, _ in report.rows)


@pytest.mark.fast
def test_evaluate_is_deterministic(corpus, tmp_path):
    real = corpus[:12]
    synth = corpus[12:]
    args = ([s.image for s in real], [s.caption for s in real], [s.image for s in synth], [s.caption for s in synth])
    evaluate_sets(*args, PixelStatProvider(), seed=1).write(tmp_path / "a.csv")
    evaluate_sets(*args, PixelStatProvider(), seed=1).write(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.mark.fast
def test_evaluate_text_metrics_need_text_provider(corpus):
    images = [s.image for s in corpus[:4]]
    captions = [s.caption for s in corpus[:4]]
    with pytest.raises(ValueError):
        evaluate_sets(images, captions, images, captions, PixelStatProvider(), text_metrics=True)
    report = evaluate_sets(images, captions, images, captions, PixelStatProvider())
    assert not any(m == "plip_t" for m, _, _ in report.rows)
