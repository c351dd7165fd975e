"""Random-forest classifier over per-segment latency vectors.

Latency is too noisy to segment traces with, but it still separates some
otherwise-identical expansions (a division's execute step is slower than an
addition's). A small forest of Gini-split decision trees, trained on labeled
latency vectors, estimates per-opcode probabilities that the attack uses to
prune ambiguous candidate sets. Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ClassifierError, ParseError

PAD_VALUE = -1.0


@dataclass(frozen=True)
class TimingParams:
    n_trees: int = 50
    max_depth: int = 8
    min_samples_leaf: int = 2
    holdout_fraction: float = 0.25
    seed: int = 0


class _Node:
    __slots__ = ("feature", "threshold", "left", "right", "proba")

    def __init__(self, proba=None, feature=-1, threshold=0.0,
                 left=None, right=None):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.proba = proba  # leaf class distribution, None for internal nodes

    def to_dict(self) -> dict:
        if self.proba is not None:
            return {"p": [round(float(v), 6) for v in self.proba]}
        return {"f": self.feature, "t": self.threshold,
                "l": self.left.to_dict(), "r": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "_Node":
        if "p" in d:
            return cls(proba=np.asarray(d["p"], dtype=float))
        return cls(feature=d["f"], threshold=d["t"],
                   left=cls.from_dict(d["l"]), right=cls.from_dict(d["r"]))


def _gini_gain(y_left: np.ndarray, y_right: np.ndarray, n_classes: int) -> float:
    def impurity(y):
        counts = np.bincount(y, minlength=n_classes)
        p = counts / len(y)
        return 1.0 - float(np.sum(p * p))
    n = len(y_left) + len(y_right)
    return (len(y_left) * impurity(y_left)
            + len(y_right) * impurity(y_right)) / n


def _build_tree(X: np.ndarray, y: np.ndarray, depth: int, params: TimingParams,
                n_classes: int, rng: np.random.Generator) -> _Node:
    def leaf() -> _Node:
        counts = np.bincount(y, minlength=n_classes)
        return _Node(proba=counts / counts.sum())

    if depth >= params.max_depth or len(y) < 2 * params.min_samples_leaf \
            or len(np.unique(y)) == 1:
        return leaf()

    n_features = X.shape[1]
    k = max(1, int(np.ceil(np.sqrt(n_features))))
    features = rng.choice(n_features, size=k, replace=False)
    best = (None, None, np.inf)
    for f in sorted(features):
        values = np.unique(X[:, f])
        if len(values) < 2:
            continue
        if len(values) > 33:
            # cap threshold candidates at quantile midpoints
            values = np.unique(np.quantile(values, np.linspace(0, 1, 33)))
        thresholds = (values[:-1] + values[1:]) / 2.0
        for t in thresholds:
            mask = X[:, f] <= t
            nl = int(mask.sum())
            if nl < params.min_samples_leaf or len(y) - nl < params.min_samples_leaf:
                continue
            score = _gini_gain(y[mask], y[~mask], n_classes)
            if score < best[2]:
                best = (f, float(t), score)
    if best[0] is None:
        return leaf()
    f, t, _ = best
    mask = X[:, f] <= t
    return _Node(
        feature=int(f), threshold=t,
        left=_build_tree(X[mask], y[mask], depth + 1, params, n_classes, rng),
        right=_build_tree(X[~mask], y[~mask], depth + 1, params, n_classes, rng),
    )


def _tree_proba(node: _Node, x: np.ndarray) -> np.ndarray:
    while node.proba is None:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.proba


class TimingClassifier:
    """Forest over fixed-length latency vectors (short vectors are padded)."""

    def __init__(self, classes: list[str], vector_length: int,
                 trees: list[_Node], params: TimingParams,
                 holdout_accuracy: float | None = None):
        self.classes = classes
        self.vector_length = vector_length
        self.trees = trees
        self.params = params
        self.holdout_accuracy = holdout_accuracy

    def _vector(self, latencies) -> np.ndarray:
        x = np.full(self.vector_length, PAD_VALUE, dtype=float)
        clipped = list(latencies)[:self.vector_length]
        x[:len(clipped)] = clipped
        return x

    def predict_proba(self, latencies) -> dict[str, float]:
        x = self._vector(latencies)
        acc = np.zeros(len(self.classes))
        for tree in self.trees:
            acc += _tree_proba(tree, x)
        acc /= len(self.trees)
        return {label: float(p) for label, p in zip(self.classes, acc)}

    def predict(self, latencies) -> str:
        probs = self.predict_proba(latencies)
        return max(sorted(probs), key=lambda lbl: probs[lbl])

    def accuracy(self, samples: list[tuple[list[int], str]]) -> float:
        if not samples:
            raise ClassifierError("cannot score an empty sample set")
        hits = sum(1 for vec, label in samples if self.predict(vec) == label)
        return hits / len(samples)

    def save(self, path: str | Path) -> None:
        doc = {
            "classes": self.classes,
            "vector_length": self.vector_length,
            "params": {
                "n_trees": self.params.n_trees,
                "max_depth": self.params.max_depth,
                "min_samples_leaf": self.params.min_samples_leaf,
                "holdout_fraction": self.params.holdout_fraction,
                "seed": self.params.seed,
            },
            "holdout_accuracy": self.holdout_accuracy,
            "trees": [t.to_dict() for t in self.trees],
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TimingClassifier":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(
                classes=list(doc["classes"]),
                vector_length=int(doc["vector_length"]),
                trees=[_Node.from_dict(t) for t in doc["trees"]],
                params=TimingParams(**doc["params"]),
                holdout_accuracy=doc.get("holdout_accuracy"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"{path}: bad classifier file ({exc})") from None


def train_timing_classifier(samples: list[tuple[list[int], str]],
                            params: TimingParams = TimingParams()
                            ) -> TimingClassifier:
    """Fit a forest on (latency vector, opcode) samples.

    Holds out a stratified fraction for accuracy reporting; needs at least
    two classes and 20 samples per class.
    """
    by_class: dict[str, list[list[int]]] = {}
    for vec, label in samples:
        by_class.setdefault(label, []).append(list(vec))
    if len(by_class) < 2:
        raise ClassifierError("training needs at least two classes")
    for label, vecs in sorted(by_class.items()):
        if len(vecs) < 20:
            raise ClassifierError(
                f"class {label!r} has {len(vecs)} samples, need at least 20")

    classes = sorted(by_class)
    vector_length = max(len(vec) for vec, _ in samples)
    rng = np.random.default_rng(params.seed)

    def matrix(vecs: list[list[int]]) -> np.ndarray:
        m = np.full((len(vecs), vector_length), PAD_VALUE, dtype=float)
        for i, v in enumerate(vecs):
            m[i, :min(len(v), vector_length)] = v[:vector_length]
        return m

    train_X, train_y, test_X, test_y = [], [], [], []
    for ci, label in enumerate(classes):
        vecs = by_class[label]
        order = rng.permutation(len(vecs))
        n_test = max(1, int(len(vecs) * params.holdout_fraction))
        for j, idx in enumerate(order):
            if j < n_test:
                test_X.append(vecs[idx])
                test_y.append(ci)
            else:
                train_X.append(vecs[idx])
                train_y.append(ci)

    X = matrix(train_X)
    y = np.asarray(train_y)
    trees = []
    for _ in range(params.n_trees):
        boot = rng.integers(0, len(y), size=len(y))
        trees.append(_build_tree(X[boot], y[boot], 0, params, len(classes), rng))

    clf = TimingClassifier(classes, vector_length, trees, params)
    Xt = matrix(test_X)
    hits = 0
    for i in range(len(test_y)):
        acc = np.zeros(len(classes))
        for tree in trees:
            acc += _tree_proba(tree, Xt[i])
        hits += int(np.argmax(acc)) == test_y[i]
    clf.holdout_accuracy = hits / len(test_y) if test_y else None
    return clf
