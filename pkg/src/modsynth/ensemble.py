"""From-scratch tree ensembles over 10 intensity classes.

Random forest: Gini splits over a random feature subset per node, midpoint
thresholds between consecutive distinct sorted values, grown to purity by
default, per-tree subsample without replacement.

Boosted trees: 10 one-vs-rest squared-loss regressors. Each iteration fits a
depth-limited variance-reduction tree to the current residuals on a fresh
subsample and adds it with a shrinkage factor. A candidate tree that would
raise the full-set loss is replaced by a zero-valued stub so the recorded
loss trace is monotone non-increasing.

All trees live in flat packed arrays: internal nodes carry (feature,
threshold, left, right) with global node indices; leaves have feature == -1
and store their payload row (class histogram or leaf value) in `left`.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from ._ioutil import atomic_write_bytes
from .errors import (
    CorruptModelError,
    DimensionMismatchError,
    ParameterError,
)
from .features import TrainingSet
from .kernels import derive_stream_seed

KIND_RF = "random_forest"
KIND_BDT = "boosted_trees"

_SEED63 = (1 << 63) - 1  # node-stream seeds must fit a signed 64-bit lane


@dataclass(frozen=True)
class RandomForestParams:
    n_trees: int = 1000
    subsample_fraction: float = 0.1
    features_per_split: int | None = None  # None -> floor(sqrt(d))
    max_depth: int | None = None  # None -> grow to purity
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ParameterError(f"n_trees must be >= 1, got {self.n_trees}")
        if not (0 < self.subsample_fraction <= 1):
            raise ParameterError(
                f"subsample_fraction must be in (0, 1], got {self.subsample_fraction}"
            )
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ParameterError("features_per_split must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ParameterError("max_depth must be >= 1")

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "subsample_fraction": self.subsample_fraction,
            "features_per_split": self.features_per_split,
            "max_depth": self.max_depth,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class BoostedTreesParams:
    n_iterations: int = 10000
    shrinkage: float = 0.01
    subsample_fraction: float = 0.2
    max_depth: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ParameterError("n_iterations must be >= 1")
        if not (0 < self.shrinkage <= 1):
            raise ParameterError(f"shrinkage must be in (0, 1], got {self.shrinkage}")
        if not (0 < self.subsample_fraction <= 1):
            raise ParameterError("subsample_fraction must be in (0, 1]")
        if self.max_depth < 1:
            raise ParameterError(f"max_depth must be >= 1, got {self.max_depth}")

    def to_dict(self) -> dict:
        return {
            "n_iterations": self.n_iterations,
            "shrinkage": self.shrinkage,
            "subsample_fraction": self.subsample_fraction,
            "max_depth": self.max_depth,
            "seed": self.seed,
        }


@dataclass(eq=False)
class TreeEnsemble:
    kind: str
    n_classes: int
    feature_dim: int
    feature: np.ndarray  # (total_nodes,) int32, -1 marks a leaf
    threshold: np.ndarray  # (total_nodes,) float64
    left: np.ndarray  # (total_nodes,) int32; leaf rows for feature == -1
    right: np.ndarray  # (total_nodes,) int32
    roots: np.ndarray  # (n_trees,) int64
    leaf_hist: np.ndarray | None = None  # RF: (total_leaves, n_classes)
    leaf_values: np.ndarray | None = None  # BDT: (total_leaves,)
    tree_class: np.ndarray | None = None  # BDT: (n_trees,) uint8
    init_scores: np.ndarray | None = None  # BDT: (n_classes,)
    shrinkage: float = 0.0
    params: dict = field(default_factory=dict)
    loss_trace: np.ndarray | None = None  # BDT training log, not serialized

    @property
    def n_trees(self) -> int:
        return int(self.roots.shape[0])


def _check_features(e: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    if X.shape[1] != e.feature_dim:
        raise DimensionMismatchError(
            f"model expects feature dim {e.feature_dim}, got {X.shape[1]}"
        )
    return X


def predict_scores(e: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    """Per-class scores: summed histograms (RF) or boosted values (BDT)."""
    X = _check_features(e, X)
    if e.kind == KIND_RF:
        return kernels.forest_hist_scores(
            X, e.feature, e.threshold, e.left, e.right, e.roots,
            e.leaf_hist, e.n_classes,
        )
    return kernels.bdt_scores(
        X, e.feature, e.threshold, e.left, e.right, e.roots,
        e.leaf_values, e.tree_class, e.shrinkage, e.init_scores,
    )


def predict_classes(e: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return np.argmax(predict_scores(e, X), axis=1).astype(np.int64)


def predict_class(e: TreeEnsemble, x: np.ndarray) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ParameterError("predict_class takes a single feature vector")
    return int(predict_classes(e, x.reshape(1, -1))[0])


def _validate_training_set(ts: TrainingSet, n_classes: int) -> None:
    if ts.n == 0:
        raise ParameterError("empty training set")
    if ts.labels.min() < 0 or ts.labels.max() >= n_classes:
        raise ParameterError(
            f"labels must lie in [0, {n_classes - 1}], "
            f"got range [{ts.labels.min()}, {ts.labels.max()}]"
        )


def _subsample_size(fraction: float, n: int) -> int:
    return max(math.floor(fraction * n), 1)


class _Packer:
    """Accumulates per-tree flat arrays into one global arena."""

    def __init__(self):
        self.feature: list[np.ndarray] = []
        self.threshold: list[np.ndarray] = []
        self.left: list[np.ndarray] = []
        self.right: list[np.ndarray] = []
        self.roots: list[int] = []
        self.node_off = 0
        self.leaf_off = 0

    def add(self, feat, thr, left, right, n_payload_rows):
        internal = feat >= 0
        leaves = feat == -1
        left = left.copy()
        right = right.copy()
        left[internal] += self.node_off
        right[internal] += self.node_off
        left[leaves] += self.leaf_off
        self.feature.append(feat)
        self.threshold.append(thr)
        self.left.append(left)
        self.right.append(right)
        self.roots.append(self.node_off)
        self.node_off += feat.shape[0]
        self.leaf_off += n_payload_rows

    def arrays(self):
        return (
            np.concatenate(self.feature).astype(np.int32),
            np.concatenate(self.threshold),
            np.concatenate(self.left).astype(np.int32),
            np.concatenate(self.right).astype(np.int32),
            np.asarray(self.roots, dtype=np.int64),
        )


def train_random_forest(ts: TrainingSet, p: RandomForestParams) -> TreeEnsemble:
    n_classes = 10
    _validate_training_set(ts, n_classes)
    X = ts.features
    y = ts.labels
    n, d = X.shape
    fps = p.features_per_split if p.features_per_split is not None else max(
        math.floor(math.sqrt(d)), 1
    )
    if fps > d:
        raise ParameterError(f"features_per_split {fps} exceeds feature dim {d}")
    depth = p.max_depth if p.max_depth is not None else 0
    n_sub = _subsample_size(p.subsample_fraction, n)
    packer = _Packer()
    hists: list[np.ndarray] = []
    for t in range(p.n_trees):
        tree_seed = derive_stream_seed(p.seed, t)
        rng = np.random.default_rng(tree_seed)
        idx = np.sort(rng.permutation(n)[:n_sub]).astype(np.int64)
        feat, thr, left, right, hist = kernels.build_cls_tree(
            X, y, idx, n_classes, depth, fps, tree_seed & _SEED63
        )
        packer.add(feat, thr, left, right, hist.shape[0])
        hists.append(hist)
    feature, threshold, left, right, roots = packer.arrays()
    return TreeEnsemble(
        kind=KIND_RF,
        n_classes=n_classes,
        feature_dim=d,
        feature=feature,
        threshold=threshold,
        left=left,
        right=right,
        roots=roots,
        leaf_hist=np.concatenate(hists, axis=0),
        params=p.to_dict(),
    )


def _tree_leaf_rows(X, feat, thr, left, right) -> np.ndarray:
    """Vectorized root-to-leaf descent for one tree (root = node 0)."""
    node = np.zeros(X.shape[0], dtype=np.int64)
    while True:
        f = feat[node]
        act = np.nonzero(f >= 0)[0]
        if act.size == 0:
            break
        nn = node[act]
        go_left = X[act, f[act]] <= thr[nn]
        node[act] = np.where(go_left, left[nn], right[nn])
    return left[node].astype(np.int64)


_STUB_ARRAYS = (
    np.array([-1], dtype=np.int32),
    np.zeros(1),
    np.array([0], dtype=np.int32),
    np.array([-1], dtype=np.int32),
    np.zeros(1),
)


def train_boosted_trees(ts: TrainingSet, p: BoostedTreesParams) -> TreeEnsemble:
    n_classes = 10
    _validate_training_set(ts, n_classes)
    X = ts.features
    n, d = X.shape
    n_sub = _subsample_size(p.subsample_fraction, n)
    packer = _Packer()
    values: list[np.ndarray] = []
    tree_class = np.empty(n_classes * p.n_iterations, dtype=np.uint8)
    init_scores = np.empty(n_classes)
    loss_trace = np.empty((n_classes, p.n_iterations))
    t = 0
    for k in range(n_classes):
        y = (ts.labels == k).astype(np.float64)
        init = y.sum() / n
        init_scores[k] = init
        scores = np.full(n, init)
        loss = float(np.mean((y - scores) ** 2))
        for it in range(p.n_iterations):
            it_seed = derive_stream_seed(p.seed, k * p.n_iterations + it)
            rng = np.random.default_rng(it_seed)
            idx = np.sort(rng.permutation(n)[:n_sub]).astype(np.int64)
            resid = y - scores
            feat, thr, left, right, vals = kernels.build_reg_tree(
                X, resid, idx, p.max_depth
            )
            pred = vals[_tree_leaf_rows(X, feat, thr, left, right)]
            cand = scores + p.shrinkage * pred
            cand_loss = float(np.mean((y - cand) ** 2))
            if cand_loss > loss:
                # subsampled fit hurt the full-set loss; keep the model as is
                feat, thr, left, right, vals = _STUB_ARRAYS
            else:
                scores = cand
                loss = cand_loss
            packer.add(feat, thr, left, right, vals.shape[0])
            values.append(vals)
            tree_class[t] = k
            loss_trace[k, it] = loss
            t += 1
    feature, threshold, left, right, roots = packer.arrays()
    return TreeEnsemble(
        kind=KIND_BDT,
        n_classes=n_classes,
        feature_dim=d,
        feature=feature,
        threshold=threshold,
        left=left,
        right=right,
        roots=roots,
        leaf_values=np.concatenate(values),
        tree_class=tree_class,
        init_scores=init_scores,
        shrinkage=p.shrinkage,
        params=p.to_dict(),
        loss_trace=loss_trace,
    )


_MODEL_MAGIC = b"MSMD"
_MODEL_VERSION = 1


def save_model(e: TreeEnsemble, path: str) -> None:
    header = json.dumps(
        {
            "kind": e.kind,
            "n_classes": e.n_classes,
            "feature_dim": e.feature_dim,
            "n_nodes": int(e.feature.shape[0]),
            "n_trees": e.n_trees,
            "n_payload": int(
                e.leaf_hist.shape[0] if e.kind == KIND_RF else e.leaf_values.shape[0]
            ),
            "shrinkage": e.shrinkage,
            "params": e.params,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [_MODEL_MAGIC, struct.pack("<II", _MODEL_VERSION, len(header)), header]
    parts.append(e.feature.astype("<i4").tobytes())
    parts.append(e.threshold.astype("<f8").tobytes())
    parts.append(e.left.astype("<i4").tobytes())
    parts.append(e.right.astype("<i4").tobytes())
    parts.append(e.roots.astype("<i8").tobytes())
    if e.kind == KIND_RF:
        parts.append(e.leaf_hist.astype("<f8").tobytes())
    else:
        parts.append(e.leaf_values.astype("<f8").tobytes())
        parts.append(e.tree_class.astype("<u1").tobytes())
        parts.append(e.init_scores.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_model(path: str) -> TreeEnsemble:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MODEL_MAGIC:
        raise CorruptModelError(f"{path}: not a model file")
    if len(blob) < 12:
        raise CorruptModelError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != _MODEL_VERSION:
        raise CorruptModelError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptModelError(f"{path}: bad header") from e
    kind = header["kind"]
    if kind not in (KIND_RF, KIND_BDT):
        raise CorruptModelError(f"{path}: unknown model kind {kind!r}")
    n_nodes = header["n_nodes"]
    n_trees = header["n_trees"]
    n_payload = header["n_payload"]
    n_classes = header["n_classes"]
    need = n_nodes * (4 + 8 + 4 + 4) + n_trees * 8
    if kind == KIND_RF:
        need += n_payload * n_classes * 8
    else:
        need += n_payload * 8 + n_trees + n_classes * 8
    if len(blob) - 12 - hlen != need:
        raise CorruptModelError(
            f"{path}: payload holds {len(blob) - 12 - hlen} bytes, expected {need}"
        )

    off = 12 + hlen

    def take(dtype, count, shape=None):
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        arr = arr.astype(dtype.replace("<", "="))
        return arr if shape is None else arr.reshape(shape)

    feature = take("<i4", n_nodes)
    threshold = take("<f8", n_nodes)
    left = take("<i4", n_nodes)
    right = take("<i4", n_nodes)
    roots = take("<i8", n_trees)
    kwargs = {}
    if kind == KIND_RF:
        kwargs["leaf_hist"] = take("<f8", n_payload * n_classes, (n_payload, n_classes))
    else:
        kwargs["leaf_values"] = take("<f8", n_payload)
        kwargs["tree_class"] = take("<u1", n_trees)
        kwargs["init_scores"] = take("<f8", n_classes)
    return TreeEnsemble(
        kind=kind,
        n_classes=n_classes,
        feature_dim=header["feature_dim"],
        feature=feature,
        threshold=threshold,
        left=left,
        right=right,
        roots=roots,
        shrinkage=header["shrinkage"],
        params=header["params"],
        **kwargs,
    )
