"""Latent-space probes: PCA of z0, k-means with silhouette model selection,
and z0 segment ablation."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import latent
from . import tensor as tn
from .dataio import FieldPack
from .model import Model
from .tensor import Tensor


class AnalysisError(ValueError):
    pass


# -- PCA ------------------------------------------------------------------

@dataclass
class PcaResult:
    components: np.ndarray  # rows are unit principal directions, by decreasing variance
    evr: np.ndarray
    mean: np.ndarray
    variances: np.ndarray


def pca(vectors) -> PcaResult:
    """Eigendecomposition of the sample covariance.

    Each component is signed so its largest-magnitude coordinate is positive
    (first such coordinate on ties).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise AnalysisError(f"pca needs at least 2 vectors, got shape {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals = np.clip(vals[order], 0.0, None)
    comps = vecs[:, order].T.copy()
    pivot = np.abs(comps).argmax(axis=1)
    comps *= np.where(comps[np.arange(len(comps)), pivot] < 0, -1.0, 1.0)[:, None]
    total = vals.sum()
    if not total > 0:
        raise AnalysisError("all vectors are identical; explained variance is undefined")
    return PcaResult(components=comps, evr=vals / total, mean=mean, variances=vals)


def project(vectors, result: PcaResult, m: int) -> np.ndarray:
    if not 0 <= m <= result.components.shape[0]:
        raise AnalysisError(f"m={m} outside 0..{result.components.shape[0]}")
    return (np.asarray(vectors, dtype=np.float64) - result.mean) @ result.components[:m].T


def inverse_project(scores, result: PcaResult) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return scores @ result.components[: scores.shape[1]] + result.mean


# -- k-means --------------------------------------------------------------

@dataclass
class ClusterResult:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    silhouette: float | None = None
    inertia_history: list = field(default_factory=list)
    restart: int = 0


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (points * points).sum(1)[:, None] - 2.0 * points @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    idx = [int(rng.integers(n))]
    closest = _sq_dists(points, points[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        nxt = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=closest / total))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(points, points[[nxt]])[:, 0])
    return points[idx].copy()


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int):
    history = []
    labels = None
    for _ in range(max_iter):
        d = _sq_dists(points, centers)
        new = d.argmin(axis=1)
        inertia = float(d[np.arange(len(points)), new].sum())
        history.append(inertia)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centers)):
            members = points[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # refill an empty cluster with the point farthest from its centroid
                far = int(d[np.arange(len(points)), labels].argmax())
                centers[j] = points[far]
                labels = labels.copy()
                labels[far] = j
    d = _sq_dists(points, centers)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(len(points)), labels].sum())
    if not history or inertia != history[-1]:
        history.append(inertia)
    return labels, centers, inertia, history


def kmeans(points, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> ClusterResult:
    """Lloyd iterations from k-means++ seeding; the lowest-inertia restart wins,
    ties going to the earliest restart."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise AnalysisError(f"points must be a non-empty [n, m] array, got {x.shape}")
    if not 1 <= k <= len(x):
        raise AnalysisError(f"k={k} must be in 1..{len(x)}")
    if restarts < 1:
        raise AnalysisError("restarts must be >= 1")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        labels, centers, inertia, hist = _lloyd(x, kmeans_pp_init(x, k, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = ClusterResult(k, labels, centers, inertia, None, hist, r)
    if k >= 2 and len(np.unique(best.assignments)) >= 2:
        best.silhouette = silhouette(x, best.assignments)
    return best


def silhouette(points, assignments) -> float:
    """Mean of (b - a) / max(a, b); members of singleton clusters score 0."""
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(assignments)
    uniq, labels = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise AnalysisError("silhouette needs at least 2 clusters")
    dist = np.sqrt(_sq_dists(x, x))
    np.fill_diagonal(dist, 0.0)
    onehot = np.eye(len(uniq))[labels]  # [n, k]
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot  # total distance from each point to each cluster
    own = sizes[labels]
    a = np.where(own > 1, sums[np.arange(len(x)), labels] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes
    mean_other[np.arange(len(x)), labels] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def select_k(points, ks: Sequence[int] = range(2, 11), seed: int = 0, restarts: int = 10):
    """(best k by silhouette, {k: score}, {k: ClusterResult}); ties go to the smaller k."""
    x = np.asarray(points, dtype=np.float64)
    scores, results = {}, {}
    for k in ks:
        if k < 2 or k > len(x) - 1:
            continue
        res = kmeans(x, k, seed=seed, restarts=restarts)
        if res.silhouette is None:
            continue
        scores[k], results[k] = res.silhouette, res
    if not scores:
        raise AnalysisError("no admissible k for the given number of points")
    best = max(scores, key=lambda k: (scores[k], -k))
    return best, scores, results


# -- latent probes --------------------------------------------------------

def latent_vectors(model: Model, samples: Sequence[FieldPack]) -> tuple[np.ndarray, np.ndarray]:
    """z0 per sample [n, n_g] and the flattened trajectories [n, t * n_g]."""
    z0s, trajs = [], []
    with tn.no_grad():
        for s in samples:
            enc = model.encode(s)
            z0s.append(enc.traj.z0.data[0])
            trajs.append(enc.traj.z.data.reshape(-1))
    return np.stack(z0s), np.stack(trajs)


def segment_ablation(z0, segment: tuple[int, int], model: Model, sample: FieldPack, g0=None) -> np.ndarray:
    """Fields decoded after zeroing every z0 component outside ``segment`` = [start, stop)."""
    z0 = np.asarray(z0.data if isinstance(z0, Tensor) else z0, dtype=np.float64).reshape(1, -1)
    start, stop = segment
    if not 0 <= start < stop <= z0.shape[1]:
        raise AnalysisError(f"segment {segment} is empty or outside 0..{z0.shape[1]}")
    kept = np.zeros_like(z0)
    kept[:, start:stop] = z0[:, start:stop]
    with tn.no_grad():
        if g0 is None:
            g0 = model.encode(sample).g0
        traj = latent.rollout(Tensor(kept), sample.t, model.params)
        phi = model.decode(traj.z, g0, model.encode_queries(sample.x_q))
    return phi.data


def segments(n_g: int, width: int = 16) -> list[tuple[int, int]]:
    return [(s, min(s + width, n_g)) for s in range(0, n_g, width)]


def std_normalize(values) -> np.ndarray:
    """Scale by the standard deviation for display only."""
    v = np.asarray(values, dtype=np.float64)
    sd = v.std()
    return v / sd if sd > 0 else v.copy()


# -- CSV ------------------------------------------------------------------

def evr_csv(result: PcaResult) -> str:
    buf = io.StringIO()
    buf.write("component,evr,cumulative\n")
    for i, (e, c) in enumerate(zip(result.evr, np.cumsum(result.evr))):
        buf.write(f"{i + 1},{float(e)!r},{float(c)!r}\n")
    return buf.getvalue()


def scores_csv(sample_ids: Sequence, scores: np.ndarray, clusters: np.ndarray) -> str:
    m = scores.shape[1]
    buf = io.StringIO()
    buf.write(",".join(["sample_id"] + [f"p{j + 1}" for j in range(m)] + ["cluster"]) + "\n")
    for sid, row, c in zip(sample_ids, scores, clusters):
        buf.write(",".join([str(sid)] + [repr(float(v)) for v in row] + [str(int(c))]) + "\n")
    return buf.getvalue()


def silhouette_csv(scores: dict) -> str:
    return "k,silhouette\n" + "".join(f"{k},{float(v)!r}\n" for k, v in sorted(scores.items()))
