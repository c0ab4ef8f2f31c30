"""Isolation Forest anomaly detector trained on normal fingerprints.

Trees are stored as flat node arrays so that a whole forest can be scored
with a handful of vectorized passes (one per depth level).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .fingerprint import NORMAL, UNLABELED, Fingerprint, label_profile_id

EULER_GAMMA = 0.5772156649

ANOMALY = "anomaly"


def average_path_normalizer(n: int) -> float:
    """Average unsuccessful-search path length in a BST of ``n`` points.

    Uses H(i) ~ ln(i) + Euler's constant; c(2) = 1 and c(n <= 1) = 0.
    """
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n


def _c_array(sizes: np.ndarray) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=float)
    out = np.zeros_like(sizes)
    big = sizes > 2
    n = sizes[big]
    out[big] = 2.0 * (np.log(n - 1.0) + EULER_GAMMA) - 2.0 * (n - 1.0) / n
    out[sizes == 2] = 1.0
    return out


class DetectorError(ValueError):
    pass


class Detector(Protocol):
    """What the environment needs from a detector."""

    def is_anomaly(self, X: np.ndarray) -> np.ndarray: ...


@dataclass
class IsolationTree:
    # Node i is a leaf when feature[i] == -1.
    feature: np.ndarray
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    height_limit: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def leaf_index(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Leaf reached by each row of ``X`` and the number of edges to it."""
        X = np.atleast_2d(X)
        node = np.zeros(X.shape[0], dtype=int)
        depth = np.zeros(X.shape[0], dtype=int)
        rows = np.arange(X.shape[0])
        for _ in range(self.height_limit + 1):
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            go_left = X[rows, np.maximum(feat, 0)] < self.split[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, nxt, node)
            depth += internal
        return node, depth

    def path_length(self, X: np.ndarray) -> np.ndarray:
        node, depth = self.leaf_index(X)
        return depth + _c_array(self.size[node])

    def with_leaf_counts(self, X: np.ndarray) -> "IsolationTree":
        """Same splits, leaf sizes recounted from ``X``."""
        node, _ = self.leaf_index(X)
        size = np.zeros(self.n_nodes, dtype=int)
        np.add.at(size, node, 1)
        return IsolationTree(self.feature, self.split, self.left, self.right, size, self.height_limit)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "split": self.split.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "size": self.size.tolist(),
            "height_limit": self.height_limit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsolationTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=int),
            split=np.asarray(d["split"], dtype=float),
            left=np.asarray(d["left"], dtype=int),
            right=np.asarray(d["right"], dtype=int),
            size=np.asarray(d["size"], dtype=int),
            height_limit=int(d["height_limit"]),
        )


def build_tree(X: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    feature, split, left, right, size = [], [], [], [], []

    def new_node(n: int) -> int:
        feature.append(-1)
        split.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        return len(feature) - 1

    # Iterative depth-first build; children are created in (left, right) order.
    root = new_node(X.shape[0])
    stack = [(root, np.arange(X.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= height_limit or len(idx) <= 1:
            continue
        sub = X[idx]
        lo = sub.min(axis=0)
        hi = sub.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if len(candidates) == 0:
            continue
        f = int(candidates[rng.integers(len(candidates))])
        s = rng.uniform(lo[f], hi[f])
        while s <= lo[f]:
            s = rng.uniform(lo[f], hi[f])
        mask = sub[:, f] < s
        feature[node] = f
        split[node] = float(s)
        li = new_node(int(mask.sum()))
        ri = new_node(int((~mask).sum()))
        left[node], right[node] = li, ri
        stack.append((ri, idx[~mask], depth + 1))
        stack.append((li, idx[mask], depth + 1))

    return IsolationTree(
        feature=np.asarray(feature, dtype=int),
        split=np.asarray(split, dtype=float),
        left=np.asarray(left, dtype=int),
        right=np.asarray(right, dtype=int),
        size=np.asarray(size, dtype=int),
        height_limit=height_limit,
    )


@dataclass
class IsolationForestModel:
    trees: list[IsolationTree]
    subsample_size: int
    contamination: float
    threshold: float
    feature_names: list[str] = field(default_factory=list)
    n_features: int = 0

    def __post_init__(self):
        self._pack()

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _pack(self) -> None:
        # Pad every tree to the same node count so the forest scores in one pass.
        width = max(t.n_nodes for t in self.trees)
        n = len(self.trees)
        self._feature = np.full((n, width), -1, dtype=int)
        self._split = np.zeros((n, width))
        self._left = np.zeros((n, width), dtype=int)
        self._right = np.zeros((n, width), dtype=int)
        self._leaf_c = np.zeros((n, width))
        for i, t in enumerate(self.trees):
            m = t.n_nodes
            self._feature[i, :m] = t.feature
            self._split[i, :m] = t.split
            self._left[i, :m] = t.left
            self._right[i, :m] = t.right
            self._leaf_c[i, :m] = _c_array(t.size)
        self._max_depth = max(t.height_limit for t in self.trees)
        self._norm = average_path_normalizer(self.subsample_size)

    def mean_path_length(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.n_features and X.shape[1] != self.n_features:
            raise DetectorError(f"expected {self.n_features} features, got {X.shape[1]}")
        n_trees = len(self.trees)
        t_idx = np.arange(n_trees)[:, None]
        rows = np.arange(X.shape[0])[None, :]
        node = np.zeros((n_trees, X.shape[0]), dtype=int)
        depth = np.zeros((n_trees, X.shape[0]))
        for _ in range(self._max_depth + 1):
            feat = self._feature[t_idx, node]
            internal = feat >= 0
            if not internal.any():
                break
            go_left = X[rows, np.maximum(feat, 0)] < self._split[t_idx, node]
            nxt = np.where(go_left, self._left[t_idx, node], self._right[t_idx, node])
            node = np.where(internal, nxt, node)
            depth += internal
        return (depth + self._leaf_c[t_idx, node]).mean(axis=0)

    def score_many(self, X: np.ndarray) -> np.ndarray:
        return np.power(2.0, -self.mean_path_length(X) / self._norm)

    def is_anomaly(self, X: np.ndarray) -> np.ndarray:
        return self.score_many(X) > self.threshold

    def to_dict(self) -> dict:
        return {
            "kind": "isolation_forest",
            "subsample_size": self.subsample_size,
            "n_trees": self.n_trees,
            "contamination": self.contamination,
            "threshold": self.threshold,
            "feature_names": list(self.feature_names),
            "n_features": self.n_features,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsolationForestModel":
        return cls(
            trees=[IsolationTree.from_dict(t) for t in d["trees"]],
            subsample_size=int(d["subsample_size"]),
            contamination=float(d["contamination"]),
            threshold=float(d["threshold"]),
            feature_names=list(d.get("feature_names", [])),
            n_features=int(d.get("n_features", 0)),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "IsolationForestModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class DetectorConfig:
    subsample_size: int = 256
    n_trees: int = 100
    contamination: float = 0.05
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _as_matrix(data) -> tuple[np.ndarray, list[str]]:
    if isinstance(data, np.ndarray):
        return np.atleast_2d(data.astype(float)), []
    rows = list(data)
    if not rows:
        return np.zeros((0, 0)), []
    return np.vstack([fp.values for fp in rows]), [fp.label for fp in rows]


def fit(
    normal,
    subsample_size: int = 256,
    n_trees: int = 100,
    contamination: float = 0.05,
    seed: int = 0,
    feature_names: Sequence[str] = (),
) -> IsolationForestModel:
    """Fit a forest on normal-behaviour rows.

    ``normal`` is a sequence of :class:`Fingerprint` (all labeled normal or
    unlabeled) or a 2-D array. Training rows are put in a canonical
    (lexicographic) order before subsampling, so the forest depends on the
    seed and the set of rows, not on their order.
    """
    X, labels = _as_matrix(normal)
    bad = [lab for lab in labels if lab not in (NORMAL, UNLABELED)]
    if bad:
        raise DetectorError(f"training data must be normal, found label {bad[0]!r}")
    if not 0 < contamination <= 0.5:
        raise DetectorError("contamination must be in (0, 0.5]")
    if subsample_size < 2:
        raise DetectorError("subsample_size must be >= 2")
    n = X.shape[0]
    if n < subsample_size:
        raise DetectorError(f"{n} training rows, subsample size is {subsample_size}")
    if not np.any(X.max(axis=0) > X.min(axis=0)):
        raise DetectorError("training data is constant; no feature can be split")

    X = X[np.lexsort(X.T[::-1])]
    height_limit = math.ceil(math.log2(subsample_size))
    streams = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    for ss in streams:
        rng = np.random.default_rng(ss)
        if subsample_size == n:
            sample = X
        else:
            sample = X[np.sort(rng.choice(n, size=subsample_size, replace=False))]
        trees.append(build_tree(sample, height_limit, rng))

    model = IsolationForestModel(
        trees=trees,
        subsample_size=subsample_size,
        contamination=contamination,
        threshold=math.inf,
        feature_names=list(feature_names),
        n_features=X.shape[1],
    )
    train_scores = model.score_many(X)
    # "higher" keeps the flagged training fraction at or below contamination.
    model.threshold = float(np.quantile(train_scores, 1.0 - contamination, method="higher"))
    return model


def fit_config(normal, config: DetectorConfig, feature_names: Sequence[str] = ()) -> IsolationForestModel:
    return fit(
        normal,
        subsample_size=config.subsample_size,
        n_trees=config.n_trees,
        contamination=config.contamination,
        seed=config.seed,
        feature_names=feature_names,
    )


def _values(model: IsolationForestModel, x) -> np.ndarray:
    vals = x.values if isinstance(x, Fingerprint) else np.asarray(x, dtype=float)
    if vals.ndim != 1 or (model.n_features and vals.shape[0] != model.n_features):
        raise DetectorError(f"fingerprint does not match model schema ({model.n_features} features)")
    return vals


def score(model: IsolationForestModel, x) -> float:
    return float(model.score_many(_values(model, x)[None, :])[0])


def predict(model: IsolationForestModel, x) -> str:
    """``anomaly`` iff the score is strictly above the threshold."""
    return ANOMALY if score(model, x) > model.threshold else NORMAL


@dataclass
class EvaluationReport:
    normal_tnr: Optional[float]
    fnr: dict[int, float]
    counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "normal_tnr": self.normal_tnr,
            "fnr": {str(k): v for k, v in sorted(self.fnr.items())},
            "counts": dict(self.counts),
        }


def evaluate(detector: Detector, labeled: Sequence[Fingerprint]) -> EvaluationReport:
    """Normal true-negative rate and per-profile false-negative rates."""
    rows = list(labeled)
    if any(fp.label == UNLABELED for fp in rows):
        raise DetectorError("evaluate needs labeled rows")
    X = np.vstack([fp.values for fp in rows])
    flagged = detector.is_anomaly(X)
    by_label: dict[str, list[bool]] = {}
    for fp, f in zip(rows, flagged):
        by_label.setdefault(fp.label, []).append(bool(f))

    tnr = None
    fnr: dict[int, float] = {}
    for label, flags in by_label.items():
        missed = 1.0 - float(np.mean(flags))
        if label == NORMAL:
            tnr = missed
        else:
            fnr[label_profile_id(label)] = missed
    counts = {label: len(flags) for label, flags in sorted(by_label.items())}
    return EvaluationReport(tnr, fnr, counts)
