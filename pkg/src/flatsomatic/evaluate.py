"""Assessment of reconstructions and embeddings.

Cross-validated reconstruction F1, k-means + NMI against known labels with a
PCA baseline, and a linear downstream classifier usable on raw occurrence
rows or on embeddings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, TextIO

import numpy as np

from . import _random
from .data import KFoldPlan, OccurrenceMatrix, kfold_split
from .errors import ParseError, ShapeError
from .metrics import binarize, confusion_counts, cosine_similarity, f1_from_counts, micro_f1
from .vae import VaeConfig, reconstruct, train

__all__ = [
    "binarize", "micro_f1", "cosine_similarity", "MetricsReport", "cross_validate",
    "Clustering", "kmeans", "nmi", "PcaResult", "pca", "cluster_compare", "classify",
    "write_embeddings_tsv", "read_embeddings_tsv",
]


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)
    per_fold: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    histories: list = field(default_factory=list, repr=False, compare=False)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        out = dict(self.values)
        out["per_fold"] = list(self.per_fold)
        out["metadata"] = dict(self.metadata)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        per_fold = d.pop("per_fold", [])
        metadata = d.pop("metadata", {})
        return cls(d, per_fold, metadata)


def _mean_of(rows: list, key: str) -> float:
    return float(np.mean([r[key] for r in rows]))


def cross_validate(matrix: OccurrenceMatrix, config: VaeConfig, k: int = 5,
                   seed: Optional[int] = None, threshold: float = 0.5) -> MetricsReport:
    """k-fold reconstruction quality of the VAE.

    Each fold trains on the other ``k - 1`` folds and scores the held-out
    rows in inference mode: micro-F1 of the reconstruction binarized at
    ``threshold`` and cosine similarity of the raw probabilities. The
    reported values are arithmetic means over folds.
    """
    seed = config.seed if seed is None else seed
    plan = kfold_split(matrix.n_samples, k, seed)
    rows, histories = [], []
    for i in range(k):
        _, held = plan.split(i)
        model, history = train(matrix, config, validation_indices=held)
        x = matrix.dense(held)
        x_hat = reconstruct(model, x)
        f1, prec, rec = micro_f1(x, binarize(x_hat, threshold))
        rows.append({"fold": i, "f1": f1, "precision": prec, "recall": rec,
                     "cosine": cosine_similarity(x, x_hat), "n_held_out": len(held)})
        histories.append(history)
    values = {key: _mean_of(rows, key) for key in ("f1", "precision", "recall", "cosine")}
    meta = {"seed": seed, "k": k, "latent_dim": config.latent_dim, "loss_kind": config.loss_kind}
    return MetricsReport(values, rows, meta, histories)


# --------------------------------------------------------------------------
# k-means


@dataclass
class Clustering:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_trace: list = field(default_factory=list, repr=False)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining mass is zero: fall back to an unused index
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _lloyd(X: np.ndarray, centroids: np.ndarray, max_iters: int) -> Clustering:
    n, k = X.shape[0], centroids.shape[0]
    labels = None
    trace = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(X, centroids)
        new = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        point_d2 = d2[np.arange(n), labels].copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                centroids[j] = X[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the worst-served point
            far = int(point_d2.argmax())
            centroids[j] = X[far]
            labels[far] = j
            point_d2[far] = 0.0
    else:
        d2 = _sq_dists(X, centroids)
        labels = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(n), labels].sum()))
    return Clustering(labels, centroids, trace[-1], it, trace)


def kmeans(X, k: int = 32, restarts: int = 10, max_iters: int = 300, seed: int = 0) -> Clustering:
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia restart wins."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {X.shape}")
    n = X.shape[0]
    if k < 1 or k > n:
        raise ShapeError(f"need 1 <= k <= n, got k={k} with n={n} samples")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best = None
    for r in range(restarts):
        rng = _random.stream(seed, _random.KMEANS, r)
        result = _lloyd(X, _kmeans_pp(X, k, rng), max_iters)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


# --------------------------------------------------------------------------
# normalized mutual information


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(labels_a: Sequence, labels_b: Sequence) -> float:
    """``2 I(A;B) / (H(A) + H(B))`` with natural logarithms.

    Two constant labelings give 1; exactly one constant labeling gives 0.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"label arrays differ: {a.shape} vs {b.shape}")
    n = len(a)
    if n == 0:
        raise ValueError("need at least one label")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    row, col = table.sum(axis=1), table.sum(axis=0)
    h_a, h_b = _entropy(row, n), _entropy(col, n)
    if h_a == 0.0 and h_b == 0.0:
        return 1.0
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    nz = table > 0
    pij = table[nz] / n
    outer = (row[:, None] * col[None, :])[nz] / (n * n)
    mi = float((pij * np.log(pij / outer)).sum())
    return min(1.0, max(0.0, 2.0 * mi / (h_a + h_b)))


# --------------------------------------------------------------------------
# PCA


@dataclass
class PcaResult:
    projection: np.ndarray
    components: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.projection @ self.components + self.mean


def pca(X, d: int) -> PcaResult:
    """Top-``d`` principal components of ``X`` (rows are samples) via SVD.

    Each component is flipped so its largest-magnitude entry is positive.
    """
    if isinstance(X, OccurrenceMatrix):
        X = X.dense()
    X = np.asarray(X, dtype=np.float64)
    n, m = X.shape
    if n < 2:
        raise ShapeError("PCA needs at least two samples")
    if not 1 <= d <= min(n, m):
        raise ShapeError(f"need 1 <= d <= min(n, m) = {min(n, m)}, got d={d}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:d].copy()
    flip = np.sign(comps[np.arange(d), np.abs(comps).argmax(axis=1)])
    comps *= flip[:, None]
    var = s ** 2
    total = var.sum()
    ratio = var[:d] / total if total > 0 else np.zeros(d)
    return PcaResult(Xc @ comps.T, comps, ratio, mean)


def cluster_compare(embeddings, pca_projection, true_labels, k: int = 32, seed: int = 0,
                    restarts: int = 10) -> MetricsReport:
    """NMI against ``true_labels`` of k-means on each representation."""
    emb = np.asarray(embeddings, dtype=np.float64)
    proj = np.asarray(pca_projection, dtype=np.float64)
    labels = np.asarray(true_labels)
    if not (len(emb) == len(proj) == len(labels)):
        raise ShapeError(f"row counts differ: embeddings {len(emb)}, PCA {len(proj)}, labels {len(labels)}")
    c_vae = kmeans(emb, k, restarts=restarts, seed=seed)
    c_pca = kmeans(proj, k, restarts=restarts, seed=seed)
    values = {"nmi_vae": nmi(labels, c_vae.assignments), "nmi_pca": nmi(labels, c_pca.assignments)}
    return MetricsReport(values, [], {"k": k, "seed": seed, "restarts": restarts,
                                      "dim_vae": emb.shape[1], "dim_pca": proj.shape[1]})


# --------------------------------------------------------------------------
# downstream classification


def _binary_labels(labels) -> np.ndarray:
    """0/1 float labels; the larger of the two sorted class values is positive."""
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) != 2:
        raise ValueError(f"need exactly two classes, got {len(classes)}")
    return (y == classes[1]).astype(np.float64)


def _top_singular_sq(X: np.ndarray, iters: int = 100) -> float:
    """Largest eigenvalue of ``X.T @ X`` by power iteration from a fixed start."""
    v = np.ones(X.shape[1])
    lam = 0.0
    for _ in range(iters):
        w = X.T @ (X @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        lam = norm / np.linalg.norm(v)
        v = w / norm
    return lam


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def predict(self, X) -> np.ndarray:
        return (self.decision(X) >= 0).astype(np.int64)


def fit_logistic(X, y, l2: float = 1e-2, iters: int = 1000) -> LogisticModel:
    """L2-regularized logistic regression by accelerated gradient descent.

    Minimizes ``mean(log(1 + exp(-s * (X w + b)))) + l2 / 2 * |w|^2`` with
    separate fixed step sizes for ``w`` and the unpenalized bias.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    # curvature bounds: 1/4 * |X|^2 / n for w, 1/4 for b; halved for the joint step
    lr_w = 1.0 / (2.0 * (0.25 * _top_singular_sq(X) / n) + l2) if X.shape[1] else 0.0
    lr_b = 1.0 / (2.0 * 0.25)
    w = np.zeros(X.shape[1])
    b = 0.0
    w_prev, b_prev = w, b
    for t in range(1, iters + 1):
        mom = (t - 1) / (t + 2)
        vw = w + mom * (w - w_prev)
        vb = b + mom * (b - b_prev)
        p = 1.0 / (1.0 + np.exp(-np.clip(X @ vw + vb, -500, 500)))
        r = (p - y) / n
        gw = X.T @ r + l2 * vw
        gb = r.sum()
        w_prev, b_prev = w, b
        w = vw - lr_w * gw
        b = vb - lr_b * gb
    return LogisticModel(w, float(b))


def classify(features, labels, folds=5, seed: int = 0, l2: float = 1e-2,
             iters: int = 1000) -> MetricsReport:
    """Cross-validated linear classification.

    ``features`` may be an :class:`OccurrenceMatrix` (raw occurrence rows) or
    an ``n x d`` array (embeddings). ``folds`` is a fold count or a
    :class:`KFoldPlan`. Precision, recall and F1 are micro-averaged over the
    pooled held-out predictions at probability threshold 0.5.
    """
    X = features.dense() if isinstance(features, OccurrenceMatrix) else np.asarray(features, dtype=np.float64)
    y = _binary_labels(labels)
    if X.shape[0] != len(y):
        raise ShapeError(f"{X.shape[0]} feature rows but {len(y)} labels")
    counts = np.bincount(y.astype(np.int64), minlength=2)
    if counts.min() < 2:
        raise ValueError(f"each class needs at least two samples, got counts {counts.tolist()}")
    plan = folds if isinstance(folds, KFoldPlan) else kfold_split(len(y), int(folds), seed)
    tp = fp = fn = 0
    rows = []
    for i in range(plan.k):
        tr, te = plan.split(i)
        if len(np.unique(y[tr])) < 2:
            raise ValueError(f"fold {i} training split holds a single class")
        model = fit_logistic(X[tr], y[tr], l2, iters)
        c = confusion_counts(y[te], model.predict(X[te]))
        f1, prec, rec = f1_from_counts(*c)
        rows.append({"fold": i, "f1": f1, "precision": prec, "recall": rec})
        tp, fp, fn = tp + c[0], fp + c[1], fn + c[2]
    f1, prec, rec = f1_from_counts(tp, fp, fn)
    meta = {"seed": seed, "k": plan.k, "dimensionality": int(X.shape[1]), "l2": l2}
    return MetricsReport({"precision": prec, "recall": rec, "f1": f1}, rows, meta)


# --------------------------------------------------------------------------
# embeddings TSV


def write_embeddings_tsv(sample_ids: Sequence[str], Z, stream: TextIO) -> None:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or len(sample_ids) != Z.shape[0]:
        raise ShapeError(f"{len(sample_ids)} sample ids for embeddings of shape {Z.shape}")
    stream.write("\t".join(["sample_id"] + [f"z{j}" for j in range(Z.shape[1])]) + "\n")
    for sid, row in zip(sample_ids, Z):
        stream.write(sid + "\t" + "\t".join(format(float(v), ".17g") for v in row) + "\n")


def read_embeddings_tsv(stream: TextIO) -> tuple[list[str], np.ndarray]:
    header = stream.readline().rstrip("\r\n").split("\t")
    if not header or header[0] != "sample_id":
        raise ParseError("embeddings TSV must start with a sample_id column", line=1)
    d = len(header) - 1
    ids, rows = [], []
    for lineno, line in enumerate(stream, start=2):
        if not line.strip():
            continue
        fields = line.rstrip("\r\n").split("\t")
        if len(fields) != d + 1:
            raise ParseError(f"expected {d + 1} fields, got {len(fields)}", line=lineno)
        try:
            rows.append([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        ids.append(fields[0])
    Z = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    if not np.all(np.isfinite(Z)):
        raise ParseError("embeddings contain non-finite values")
    return ids, Z

