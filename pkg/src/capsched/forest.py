"""Bagged CART regression forest.

Trees are stored as flat arrays (split feature, threshold, children, leaf
value) so a model serializes to plain lists and prediction is a tight loop.
Growth and traversal are compiled with numba.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

LEAF = -1


@numba.njit(cache=True)
def _grow_tree(X, y, idx, max_depth, min_leaf, n_sub, seed):
    np.random.seed(seed)
    d = X.shape[1]
    cap = 2 * idx.shape[0] + 1
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap, np.float64)

    # stack of (node id, start, stop, depth) over the shared index buffer
    stack = np.empty((cap, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = idx.shape[0]
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    feats = np.arange(d)
    xs = np.empty(idx.shape[0], np.float64)
    ys = np.empty(idx.shape[0], np.float64)

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        stop = stack[top, 2]
        depth = stack[top, 3]
        m = stop - start

        total = 0.0
        for i in range(start, stop):
            total += y[idx[i]]
        value[node] = total / m

        if depth >= max_depth or m < 2 * min_leaf:
            continue
        y0 = y[idx[start]]
        pure = True
        for i in range(start + 1, stop):
            if y[idx[i]] != y0:
                pure = False
                break
        if pure:
            continue

        # partial Fisher-Yates draw of n_sub candidate features
        for k in range(n_sub):
            j = k + np.random.randint(d - k)
            tmp = feats[k]
            feats[k] = feats[j]
            feats[j] = tmp

        best_score = -1.0
        best_feat = -1
        best_thr = 0.0
        base = total * total / m
        for k in range(n_sub):
            f = feats[k]
            for i in range(m):
                xs[i] = X[idx[start + i], f]
            order = np.argsort(xs[:m], kind="mergesort")
            for i in range(m):
                ys[i] = y[idx[start + order[i]]]
            s_left = 0.0
            for i in range(m - 1):
                s_left += ys[i]
                n_left = i + 1
                if n_left < min_leaf or m - n_left < min_leaf:
                    continue
                a = xs[order[i]]
                b = xs[order[i + 1]]
                if a == b:
                    continue
                s_right = total - s_left
                score = s_left * s_left / n_left + s_right * s_right / (m - n_left) - base
                if score > best_score + 1e-12:
                    best_score = score
                    best_feat = f
                    best_thr = 0.5 * (a + b)
                    if best_thr == b:
                        best_thr = a

        if best_feat < 0 or best_score <= 1e-12:
            continue

        # partition idx[start:stop] around the threshold
        lo = start
        hi = stop - 1
        while lo <= hi:
            if X[idx[lo], best_feat] <= best_thr:
                lo += 1
            else:
                tmp = idx[lo]
                idx[lo] = idx[hi]
                idx[hi] = tmp
                hi -= 1
        mid = lo
        if mid - start < min_leaf or stop - mid < min_leaf:
            continue

        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[top, 0] = n_nodes
        stack[top, 1] = start
        stack[top, 2] = mid
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = n_nodes + 1
        stack[top, 1] = mid
        stack[top, 2] = stop
        stack[top, 3] = depth + 1
        top += 1
        n_nodes += 2

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
    )


@numba.njit(cache=True)
def _predict(X, offsets, feature, threshold, left, right, value):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n, np.float64)
    for r in range(n):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] >= 0:
                if X[r, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += value[base + node]
        out[r] = acc / n_trees
    return out


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 50
    max_depth: int = 12
    min_leaf: int = 2
    feature_subsample: float = 1 / 3
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("n_trees >= 1, max_depth >= 0 and min_leaf >= 1 required")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must be in (0, 1]")


@dataclass
class RegressionForest:
    params: ForestParams
    n_features: int
    # concatenated node arrays; tree t occupies offsets[t]:offsets[t+1]
    offsets: np.ndarray = field(repr=False)
    feature: np.ndarray = field(repr=False)
    threshold: np.ndarray = field(repr=False)
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    value: np.ndarray = field(repr=False)

    @property
    def n_trees(self) -> int:
        return len(self.offsets) - 1

    def tree(self, t: int) -> dict[str, np.ndarray]:
        s = slice(self.offsets[t], self.offsets[t + 1])
        return {
            "feature": self.feature[s],
            "threshold": self.threshold[s],
            "left": self.left[s],
            "right": self.right[s],
            "value": self.value[s],
        }

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected rows of width {self.n_features}, got shape {X.shape}")
        return _predict(X, self.offsets, self.feature, self.threshold, self.left, self.right, self.value)

    def to_dict(self) -> dict:
        return {
            "params": {
                "n_trees": self.params.n_trees,
                "max_depth": self.params.max_depth,
                "min_leaf": self.params.min_leaf,
                "feature_subsample": self.params.feature_subsample,
                "seed": self.params.seed,
            },
            "n_features": self.n_features,
            "offsets": self.offsets.tolist(),
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionForest":
        return cls(
            params=ForestParams(**d["params"]),
            n_features=int(d["n_features"]),
            offsets=np.asarray(d["offsets"], dtype=np.int64),
            feature=np.asarray(d["feature"], dtype=np.int32),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            value=np.asarray(d["value"], dtype=np.float64),
        )


def fit_forest(X, y, params: ForestParams = ForestParams()) -> RegressionForest:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("empty dataset")
    if len(y) != len(X):
        raise ValueError("X and y lengths differ")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite labels")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features")

    n, d = X.shape
    n_sub = max(1, int(round(d * params.feature_subsample)))
    rng = np.random.default_rng(params.seed)
    parts = []
    for _ in range(params.n_trees):
        idx = rng.integers(0, n, n).astype(np.int64)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        parts.append(_grow_tree(X, y, idx, params.max_depth, params.min_leaf, n_sub, tree_seed))

    sizes = [len(p[0]) for p in parts]
    offsets = np.zeros(len(parts) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(sizes)
    cat = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    # child pointers are tree-local; traversal adds the tree offset
    return RegressionForest(params, d, offsets, *cat)
