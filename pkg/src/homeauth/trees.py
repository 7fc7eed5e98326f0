"""Vectorized CART construction shared by the forest and boosting models.

Trees are plain nested dicts so they serialize to JSON directly: internal
nodes are {"f": feature, "t": threshold, "l": ..., "r": ...} with the test
``x[f] <= t`` routing left; leaves are {"p": [class frequencies]} for
classification and {"v": value} for regression.

Split scores are evaluated for every candidate boundary of every candidate
feature at once. Ties are broken deterministically: lowest feature index
first, then lowest boundary position.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

_NEG_INF = -np.inf


def _pick_best(score: np.ndarray, sorted_x: np.ndarray) -> tuple[int, int] | None:
    """Best (feature column, boundary) from an (n-1, k) score matrix.

    Boundaries between equal adjacent sorted values are invalid. Scanning the
    transposed matrix makes argmax's first-occurrence rule resolve ties to the
    lowest feature column, then the lowest boundary.
    """
    valid = sorted_x[1:] > sorted_x[:-1]
    if not valid.any():
        return None
    score = np.where(valid, score, _NEG_INF)
    flat = np.ascontiguousarray(score.T)
    j = int(np.argmax(flat))
    fi, bi = divmod(j, score.shape[0])
    if flat[fi, bi] == _NEG_INF:
        return None
    return fi, bi


def _threshold(a: float, b: float) -> float:
    # midpoint between consecutive sorted values; if rounding lands on b the
    # right side would become empty under x <= t, so fall back to a
    t = a + (b - a) / 2.0
    if t >= b:
        t = a
    return t


def _gini_split(X, y, idx, feats, n_classes):
    """Maximize sum_c l_c^2/n_l + sum_c r_c^2/n_r (equivalent to min weighted Gini)."""
    n = idx.size
    sub = X[np.ix_(idx, feats)]
    order = np.argsort(sub, axis=0, kind="stable")
    sorted_x = np.take_along_axis(sub, order, axis=0)
    sorted_y = y[idx][order]

    onehot = sorted_y[:, :, None] == np.arange(n_classes)
    cum = np.cumsum(onehot, axis=0, dtype=np.float64)
    left = cum[:-1]
    right = cum[-1][None, :, :] - left
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    score = (left * left).sum(axis=2) / n_left + (right * right).sum(axis=2) / (n - n_left)

    best = _pick_best(score, sorted_x)
    if best is None:
        return None
    fi, bi = best
    return int(feats[fi]), _threshold(float(sorted_x[bi, fi]), float(sorted_x[bi + 1, fi]))


def build_classification_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    max_features: int,
    rng: np.random.Generator,
    min_leaf: int = 1,
) -> dict:
    """Gini CART grown until nodes are pure or at min_leaf samples.

    At each split, max_features candidate features are drawn without
    replacement (sorted so the tie rule sees ascending indices). Zero-gain
    splits are still taken while the node is impure, so small parity-style
    datasets get shattered.
    """
    d = X.shape[1]
    if d == 0:
        raise ValueError("cannot grow a tree with zero features")
    root: dict = {}
    stack = [(np.arange(X.shape[0]), root)]
    while stack:
        idx, node = stack.pop()
        counts = np.bincount(y[idx], minlength=n_classes)
        if idx.size <= min_leaf or counts.max() == idx.size:
            node["p"] = (counts / idx.size).tolist()
            continue
        feats = np.sort(rng.choice(d, size=min(max_features, d), replace=False))
        split = _gini_split(X, y, idx, feats, n_classes)
        if split is None:
            node["p"] = (counts / idx.size).tolist()
            continue
        f, t = split
        mask = X[idx, f] <= t
        node["f"], node["t"] = f, t
        node["l"], node["r"] = {}, {}
        stack.append((idx[mask], node["l"]))
        stack.append((idx[~mask], node["r"]))
    return root


def _sse_split_presorted(X, target, mask, n_node, sort_idx):
    """_sse_split against a per-column presort of the full matrix.

    Restricting a stable full-matrix order to the node's rows gives exactly
    the stable per-node order, so results match sorting from scratch bit for
    bit while costing one boolean gather instead of an argsort per node.
    """
    d = X.shape[1]
    if n_node == mask.size:
        order = sort_idx
    else:
        keep = mask[sort_idx]
        order = sort_idx.T[keep.T].reshape(d, n_node).T
    sorted_x = np.take_along_axis(X, order, axis=0)
    sorted_t = target[order]

    cum = np.cumsum(sorted_t, axis=0)
    left = cum[:-1]
    right = cum[-1][None, :] - left
    n_left = np.arange(1, n_node, dtype=np.float64)[:, None]
    score = left * left / n_left + right * right / (n_node - n_left)

    best = _pick_best(score, sorted_x)
    if best is None:
        return None
    fi, bi = best
    return fi, _threshold(float(sorted_x[bi, fi]), float(sorted_x[bi + 1, fi]))


def build_regression_tree(
    X: np.ndarray,
    target: np.ndarray,
    max_depth: int,
    leaf_value: Callable[[np.ndarray], float],
    sort_idx: np.ndarray | None = None,
) -> tuple[dict, np.ndarray]:
    """Depth-limited squared-error tree; leaf payloads come from leaf_value.

    All features are candidates at every split. sort_idx is the stable
    per-column argsort of X and may be shared across many trees on the same
    matrix. Returns the tree and the per-row fitted values (the leaf value
    of the row's terminal region).
    """
    n, d = X.shape
    if d == 0:
        raise ValueError("cannot grow a tree with zero features")
    if sort_idx is None:
        sort_idx = np.argsort(X, axis=0, kind="stable")
    fitted = np.zeros(n)
    root: dict = {}
    stack = [(np.ones(n, dtype=bool), n, 0, root)]
    while stack:
        mask, n_node, depth, node = stack.pop()
        sub_t = target[mask]
        split = None
        if depth < max_depth and n_node >= 2 and sub_t.max() != sub_t.min():
            split = _sse_split_presorted(X, target, mask, n_node, sort_idx)
        if split is None:
            v = float(leaf_value(sub_t))
            node["v"] = v
            fitted[mask] = v
            continue
        f, t = split
        go_left = X[:, f] <= t
        left = mask & go_left
        right = mask & ~go_left
        node["f"], node["t"] = f, t
        node["l"], node["r"] = {}, {}
        stack.append((left, int(left.sum()), depth + 1, node["l"]))
        stack.append((right, n_node - int(left.sum()), depth + 1, node["r"]))
    return root, fitted


def tree_apply(node: dict, x: np.ndarray) -> dict:
    """Descend to the leaf for a single sample."""
    while "f" in node:
        node = node["l"] if x[node["f"]] <= node["t"] else node["r"]
    return node


def tree_predict_proba(node: dict, X: np.ndarray, n_classes: int) -> np.ndarray:
    """Route a batch through a classification tree; rows of leaf frequencies."""
    out = np.zeros((X.shape[0], n_classes))
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if idx.size == 0:
            continue
        if "f" not in nd:
            out[idx] = nd["p"]
            continue
        mask = X[idx, nd["f"]] <= nd["t"]
        stack.append((nd["l"], idx[mask]))
        stack.append((nd["r"], idx[~mask]))
    return out


def tree_predict_value(node: dict, X: np.ndarray) -> np.ndarray:
    """Route a batch through a regression tree; vector of leaf values."""
    out = np.zeros(X.shape[0])
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if idx.size == 0:
            continue
        if "f" not in nd:
            out[idx] = nd["v"]
            continue
        mask = X[idx, nd["f"]] <= nd["t"]
        stack.append((nd["l"], idx[mask]))
        stack.append((nd["r"], idx[~mask]))
    return out
