"""Deterministic random-forest classifier (CART, Gini impurity, bootstrap, sqrt(d) features per split)."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLabels, DimensionError, FormatError, InsufficientData

RF_MAGIC = b"RF 1\n"


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf. Samples with ``x[f] <= threshold`` go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    prob: np.ndarray  # probability of class 1 at each node

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.prob[node]
            go_left = X[rows[inner], f[inner]] <= self.threshold[node[inner]]
            node[inner] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])

    @property
    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)


@dataclass(frozen=True, eq=False)
class RandomForest:
    trees: list
    n_features: int
    max_depth: int
    seed: int
    oob_accuracy: float = float("nan")

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _best_split(X, y, feats):
    """Lowest weighted Gini over candidate features; ties keep the lowest feature, then lowest threshold."""
    n = y.shape[0]
    best = (math.inf, -1, 0.0)
    for f in feats:
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        distinct = np.nonzero(xs[1:] > xs[:-1])[0]  # split after position i
        if distinct.size == 0:
            continue
        c1 = np.cumsum(ys)[distinct]
        nl = distinct + 1.0
        nr = n - nl
        pl, pr = c1 / nl, (ys.sum() - c1) / nr
        gini = nl * 2 * pl * (1 - pl) + nr * 2 * pr * (1 - pr)
        i = int(np.argmin(gini))
        if gini[i] < best[0]:
            thr = 0.5 * (xs[distinct[i]] + xs[distinct[i] + 1])
            if not thr < xs[distinct[i] + 1]:
                thr = xs[distinct[i]]
            best = (float(gini[i]), int(f), float(thr))
    return best


def _grow(X, y, max_depth, rng, n_sub):
    feature, threshold, left, right, prob = [], [], [], [], []

    def node(idx, depth):
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        yy = y[idx]
        prob.append(float(yy.mean()))
        if depth >= max_depth or idx.size < 2 or yy.min() == yy.max():
            return i
        feats = np.sort(rng.choice(X.shape[1], size=n_sub, replace=False))
        g, f, thr = _best_split(X[idx], yy, feats)
        if f < 0:
            return i
        parent = idx.size * 2 * prob[i] * (1 - prob[i])
        if g >= parent:
            return i
        mask = X[idx, f] <= thr
        feature[i], threshold[i] = f, thr
        left[i] = node(idx[mask], depth + 1)
        right[i] = node(idx[~mask], depth + 1)
        return i

    node(np.arange(X.shape[0]), 0)
    return Tree(np.array(feature, dtype=np.int32), np.array(threshold), np.array(left, dtype=np.int32),
                np.array(right, dtype=np.int32), np.array(prob))


def train_forest(features, labels, n_trees: int = 50, max_depth: int = 6, seed: int = 0) -> RandomForest:
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels).astype(float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionError("features must be (n_samples, n_features) matching labels")
    if X.shape[0] < 2:
        raise InsufficientData("forest training needs at least 2 samples")
    if not np.all(np.isfinite(X)):
        raise DimensionError("features must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise DegenerateLabels("labels must be binary 0/1")
    if y.min() == y.max():
        raise DegenerateLabels("training labels contain a single class")
    n, d = X.shape
    n_sub = max(1, int(math.isqrt(d)))
    rng = np.random.default_rng(seed)
    trees = []
    votes = np.zeros(n)
    counts = np.zeros(n)
    for _ in range(n_trees):
        boot = rng.integers(0, n, size=n)
        t = _grow(X[boot], y[boot], max_depth, rng, n_sub)
        trees.append(t)
        oob = np.setdiff1d(np.arange(n), boot)
        if oob.size:
            votes[oob] += t.predict(X[oob])
            counts[oob] += 1
    seen = counts > 0
    oob_acc = float(((votes[seen] / counts[seen] >= 0.5) == (y[seen] == 1)).mean()) if seen.any() else float("nan")
    return RandomForest(trees, d, max_depth, seed, oob_acc)


def forest_predict(rf: RandomForest, f) -> float | np.ndarray:
    """Mean leaf probability of class 1; accepts one vector or a (n, d) matrix."""
    x = np.asarray(getattr(f, "values", f), dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != rf.n_features:
        raise DimensionError(f"feature length {X.shape[1]} does not match forest schema {rf.n_features}")
    p = np.mean([t.predict(X) for t in rf.trees], axis=0)
    p = np.clip(p, 0.0, 1.0)
    return float(p[0]) if single else p


def rf_to_bytes(rf: RandomForest) -> bytes:
    buf = io.BytesIO()
    buf.write(RF_MAGIC)
    buf.write(struct.pack("<IIIqd", rf.n_trees, rf.max_depth, rf.n_features, rf.seed, rf.oob_accuracy))
    for t in rf.trees:
        buf.write(struct.pack("<I", t.feature.shape[0]))
        buf.write(t.feature.astype("<i4").tobytes())
        buf.write(t.threshold.astype("<f8").tobytes())
        buf.write(t.left.astype("<i4").tobytes())
        buf.write(t.right.astype("<i4").tobytes())
        buf.write(t.prob.astype("<f8").tobytes())
    return buf.getvalue()


def rf_from_bytes(data: bytes, path=None) -> RandomForest:
    if not data.startswith(RF_MAGIC):
        raise FormatError("not a random-forest blob (missing 'RF 1' header)", path)
    off = len(RF_MAGIC)
    head = struct.Struct("<IIIqd")
    try:
        n_trees, max_depth, d, seed, oob = head.unpack_from(data, off)
        off += head.size
        trees = []
        for _ in range(n_trees):
            (m,) = struct.unpack_from("<I", data, off)
            off += 4
            arrs = []
            for dt in ("<i4", "<f8", "<i4", "<i4", "<f8"):
                size = np.dtype(dt).itemsize * m
                if off + size > len(data):
                    raise FormatError("truncated forest blob", path)
                arrs.append(np.frombuffer(data, dtype=dt, count=m, offset=off).astype(dt[1:]))
                off += size
            t = Tree(arrs[0].astype(np.int32), arrs[1].astype(float), arrs[2].astype(np.int32),
                     arrs[3].astype(np.int32), arrs[4].astype(float))
            if np.any(t.feature >= d):
                raise FormatError("tree split feature outside schema", path)
            trees.append(t)
    except struct.error as e:
        raise FormatError(f"truncated forest blob: {e}", path) from None
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after forest", path)
    return RandomForest(trees, d, max_depth, seed, oob)


def save_forest(rf: RandomForest, path) -> None:
    with open(path, "wb") as f:
        f.write(rf_to_bytes(rf))


def load_forest(path) -> RandomForest:
    with open(path, "rb") as f:
        return rf_from_bytes(f.read(), path)
