import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmtpf import analysis as an

from oracles import planted_blobs


def _random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


# -- PCA ------------------------------------------------------------------

def test_pca_rank_one():
    t = np.linspace(-1, 1, 11)
    res = an.pca(np.stack([t, t], axis=1))
    np.testing.assert_allclose(res.evr, [1, 0], atol=1e-12)
    np.testing.assert_allclose(res.components[0], [2**-0.5, 2**-0.5], atol=1e-12)


def test_pca_isotropic():
    x = np.random.default_rng(0).normal(size=(1000, 2))
    res = an.pca(x)
    assert abs(res.evr[0] - 0.5) < 0.05


@given(st.integers(0, 10_000), st.integers(3, 30), st.integers(2, 8))
def test_pca_invariants(seed, n, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d)) * rng.uniform(0.1, 3, size=d) + rng.normal(size=d)
    res = an.pca(x)
    assert abs(res.evr.sum() - 1) <= 1e-10
    assert np.all(np.diff(res.evr) <= 1e-15)
    np.testing.assert_allclose(res.components @ res.components.T, np.eye(d), atol=1e-8)
    scores = an.project(x, res, d)
    np.testing.assert_allclose(an.inverse_project(scores, res), x, atol=1e-10)
    cov = np.cov(scores, rowvar=False)
    assert np.abs(cov - np.diag(np.diag(cov))).max() <= 1e-8 * max(1.0, np.abs(cov).max())
    np.testing.assert_allclose(np.diag(cov), res.evr * res.variances.sum(), rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(an.project(res.mean[None], res, 2), 0, atol=1e-12)
    pivots = np.abs(res.components).argmax(axis=1)
    assert np.all(res.components[np.arange(d), pivots] > 0)


def test_pca_errors():
    with pytest.raises(an.AnalysisError):
        an.pca(np.ones((1, 3)))
    with pytest.raises(an.AnalysisError):
        an.pca(np.ones((4, 3)))
    with pytest.raises(an.AnalysisError):
        an.project(np.ones((2, 2)), an.pca(np.eye(2)), 3)


# -- k-means --------------------------------------------------------------

def test_kmeans_k1_is_mean():
    x = np.random.default_rng(1).normal(size=(20, 3))
    res = an.kmeans(x, 1)
    np.testing.assert_allclose(res.centroids[0], x.mean(axis=0), atol=1e-14)
    assert res.silhouette is None


def test_kmeans_two_pairs():
    x = np.array([[0, 0], [0.1, 0], [10, 10], [10, 10.1]])
    res = an.kmeans(x, 2, seed=0)
    assert res.assignments[0] == res.assignments[1] != res.assignments[2] == res.assignments[3]


def _best_partition_inertia(x, k):
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels.tolist())) < k:
            continue
        tot = sum(((x[labels == j] - x[labels == j].mean(0)) ** 2).sum() for j in range(k))
        best = min(best, tot)
    return best


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_global_optimum_on_8_points(seed):
    x = np.random.default_rng(seed).normal(size=(8, 2))
    res = an.kmeans(x, 2, seed=seed, restarts=10)
    assert res.inertia == pytest.approx(_best_partition_inertia(x, 2), rel=1e-12)


def test_kmeans_properties():
    x, _ = planted_blobs(3, k=4, n_per=20)
    res = an.kmeans(x, 4, seed=0)
    assert np.all(np.diff(res.inertia_history) <= 1e-9)
    assert sorted(set(res.assignments.tolist())) == [0, 1, 2, 3]
    again = an.kmeans(x, 4, seed=0)
    assert again.centroids.tobytes() == res.centroids.tobytes()
    with pytest.raises(an.AnalysisError):
        an.kmeans(x, len(x) + 1)
    with pytest.raises(an.AnalysisError):
        an.kmeans(x, 2, restarts=0)


@given(st.integers(0, 10_000), st.integers(2, 12))
def test_kmeans_clusters_nonempty(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    k = int(rng.integers(1, n + 1))
    res = an.kmeans(x, k, seed=seed, restarts=2)
    assert len(set(res.assignments.tolist())) == k


# -- silhouette -----------------------------------------------------------

def test_silhouette_vs_sklearn():
    sk = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(4)
    for trial in range(5):
        x = rng.normal(size=(40, 3))
        labels = rng.integers(0, 4, size=40)
        assert abs(an.silhouette(x, labels) - sk.silhouette_score(x, labels)) <= 1e-12


def test_silhouette_constructed_cases():
    rng = np.random.default_rng(5)
    blobs = np.concatenate([rng.normal(0, 0.1, (20, 2)), rng.normal(10, 0.1, (20, 2))])
    assert an.silhouette(blobs, np.repeat([0, 1], 20)) > 0.9
    iso = rng.normal(size=(400, 2))
    assert abs(an.silhouette(iso, rng.integers(0, 3, 400))) < 0.1
    with pytest.raises(an.AnalysisError):
        an.silhouette(iso[:5], [1] * 5)


def test_silhouette_singleton_scores_zero():
    x = np.array([[0.0], [0.1], [5.0]])
    # point 2 is a singleton and scores 0; points 0, 1 have a = 0.1, b = 5.0 / 4.9
    s0 = (5.0 - 0.1) / 5.0
    s1 = (4.9 - 0.1) / 4.9
    assert an.silhouette(x, [0, 0, 1]) == pytest.approx((s0 + s1) / 3, rel=1e-14)


def test_silhouette_rigid_motion_invariant():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(30, 4))
    labels = rng.integers(0, 3, 30)
    base = an.silhouette(x, labels)
    for _ in range(5):
        Q = _random_orthogonal(rng, 4)
        assert an.silhouette(x @ Q.T + rng.normal(size=4) * 10, labels) == pytest.approx(base, abs=1e-10)


def test_select_k_recovers_eight_blobs():
    hits = 0
    for seed in range(20):
        pts, _ = planted_blobs(seed)
        best, scores, _ = an.select_k(pts, range(2, 11), seed=seed, restarts=10)
        hits += best == 8
        assert set(scores) == set(range(2, 11))
    assert hits / 20 >= 0.95


def test_select_k_tie_goes_to_smaller_and_limits():
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    best, scores, _ = an.select_k(x, range(2, 11))
    assert best == 2 and set(scores) == {2, 3}
    pair = np.array([[0.0], [1.0], [2.0], [3.0]])
    _, sc, _ = an.select_k(pair, [2, 3])
    if sc[2] == sc[3]:
        assert an.select_k(pair, [2, 3])[0] == 2
    with pytest.raises(an.AnalysisError):
        an.select_k(x[:2], range(2, 3))


# -- latent probes --------------------------------------------------------

def test_latent_vectors_and_ablation(tiny_model, tiny_pack):
    from hmtpf.dataio import gen_advecting_gaussian

    packs = [tiny_pack, gen_advecting_gaussian(10, 6, 3, 0.05, seed=4)]
    z0, trajs = an.latent_vectors(tiny_model, packs)
    assert z0.shape == (2, 8) and trajs.shape == (2, 3 * 8)
    stored = z0[0].copy()
    full = an.segment_ablation(z0[0], (0, 8), tiny_model, tiny_pack)
    np.testing.assert_array_equal(full, tiny_model.predict(tiny_pack))
    half_a = an.segment_ablation(z0[0], (0, 4), tiny_model, tiny_pack)
    half_b = an.segment_ablation(z0[0], (4, 8), tiny_model, tiny_pack)
    assert not np.allclose(half_a, full) and not np.allclose(half_b, full)
    assert z0[0].tobytes() == stored.tobytes()
    for bad in ((3, 3), (-1, 2), (0, 9)):
        with pytest.raises(an.AnalysisError):
            an.segment_ablation(z0[0], bad, tiny_model, tiny_pack)


def test_segments_and_normalize():
    assert an.segments(40, 16) == [(0, 16), (16, 32), (32, 40)]
    assert an.std_normalize([2.0, 2.0]).tolist() == [2.0, 2.0]
    assert np.std(an.std_normalize([1.0, 3.0, 8.0])) == pytest.approx(1.0)


def test_csv_outputs():
    res = an.pca(np.random.default_rng(7).normal(size=(10, 3)))
    lines = an.evr_csv(res).splitlines()
    assert lines[0] == "component,evr,cumulative" and len(lines) == 4
    assert float(lines[-1].split(",")[2]) == pytest.approx(1.0)
    sc = an.scores_csv(["a", "b"], np.ones((2, 3)), np.array([0, 1])).splitlines()
    assert sc[0] == "sample_id,p1,p2,p3,cluster" and sc[2].endswith(",1")
    assert an.silhouette_csv({3: 0.5, 2: 0.25}) == "k,silhouette\n2,0.25\n3,0.5\n"

