"""Desk-scale point cloud feature extractors and the expandable linear head."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidArgumentError
from .tensor import Tensor, aggregate, as_tensor, column_matmul, concatenate, gather, max_reduce

BACKBONES = ("pointnet_lite", "edgeconv_lite")
DEFAULT_WIDTHS = {"pointnet_lite": [64, 128, 256], "edgeconv_lite": [64, 128]}
CHECKPOINT_FORMAT = "pointclimb-checkpoint/1"


@dataclass
class FeatureExtractor:
    kind: str
    widths: list
    aggregation: str = "max"
    k_neighbors: int = 8
    seed: int = 0
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    @property
    def feature_dim(self):
        return self.widths[-1]

    @property
    def in_dim(self):
        return 6 if self.kind == "edgeconv_lite" else 3

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, points):
        if self.kind == "pointnet_lite":
            return pointnet_lite_forward(points, self)
        return edgeconv_lite_forward(points, self)


def make_extractor(kind="pointnet_lite", widths=None, aggregation="max", k_neighbors=8, seed=0):
    """Build an extractor with uniform fan-in initialisation seeded by ``seed``."""
    if kind not in BACKBONES:
        raise InvalidArgumentError(f"unknown backbone {kind!r}; expected one of {BACKBONES}")
    if aggregation not in ("max", "mean", "sum"):
        raise InvalidArgumentError(f"unknown aggregation {aggregation!r}")
    widths = list(DEFAULT_WIDTHS[kind] if widths is None else widths)
    if not widths or any(int(w) < 1 for w in widths):
        raise InvalidArgumentError("layer widths must be positive")
    if kind == "edgeconv_lite" and k_neighbors < 1:
        raise InvalidArgumentError("k_neighbors must be positive")
    ext = FeatureExtractor(kind, [int(w) for w in widths], aggregation, int(k_neighbors), int(seed))
    rng = np.random.default_rng([int(seed), 1])
    fan_in = ext.in_dim
    for width in ext.widths:
        bound = np.sqrt(6.0 / fan_in)
        ext.weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, width)), requires_grad=True))
        ext.biases.append(Tensor(np.zeros(width), requires_grad=True))
        fan_in = width
    return ext


def _shared_mlp(h, extractor):
    for w, b in zip(extractor.weights, extractor.biases):
        h = (h @ w + b).relu()
    return h


def _check_points(points, min_points=1):
    points = as_tensor(points)
    if points.ndim not in (2, 3) or points.shape[-1] != 3:
        raise InvalidArgumentError(f"points must be [n, 3] or [B, n, 3], got {points.shape}")
    if points.shape[-2] < min_points:
        raise InvalidArgumentError(f"need at least {min_points} points, got {points.shape[-2]}")
    return points


def pointnet_lite_forward(points, extractor):
    """Shared per-point MLP followed by the symmetric aggregation."""
    if extractor.kind != "pointnet_lite":
        raise InvalidArgumentError("extractor is not pointnet_lite")
    points = _check_points(points)
    h = _shared_mlp(points, extractor)
    return aggregate(h, extractor.aggregation, axis=-2)


def knn_indices(coords, k):
    """Indices of the ``k`` nearest other points for every point.

    ``coords`` is ``[n, 3]`` or ``[B, n, 3]``. Ties go to the lower index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[-2]
    if n <= k:
        raise InvalidArgumentError(f"need more than k={k} points, got {n}")
    diff = coords[..., :, None, :] - coords[..., None, :, :]
    d2 = np.einsum("...ijk,...ijk->...ij", diff, diff)
    d2[..., np.arange(n), np.arange(n)] = np.inf
    # rows whose k-th distance is not tied with the (k+1)-th can skip the full sort
    part = np.partition(d2, k, axis=-1)
    if np.all(part[..., k - 1] < part[..., k]):
        cand = np.sort(np.argpartition(d2, k - 1, axis=-1)[..., :k], axis=-1)
        order = np.argsort(np.take_along_axis(d2, cand, axis=-1), axis=-1, kind="stable")
        return np.take_along_axis(cand, order, axis=-1)
    return np.argsort(d2, axis=-1, kind="stable")[..., :k]


def edgeconv_lite_forward(points, extractor):
    """One EdgeConv block on a coordinate-space kNN graph, then aggregation.

    Edge feature for the pair (i, j) is ``[x_i, x_j - x_i]``; the shared MLP
    output is max-pooled over each point's neighbours.
    """
    if extractor.kind != "edgeconv_lite":
        raise InvalidArgumentError("extractor is not edgeconv_lite")
    k = extractor.k_neighbors
    points = _check_points(points)
    if points.shape[-2] <= k:
        raise InvalidArgumentError(f"need more than k_neighbors={k} points, got {points.shape[-2]}")
    nbr = knn_indices(points.data, k)
    own = np.broadcast_to(np.arange(points.shape[-2])[:, None], nbr.shape[-2:])
    own = np.broadcast_to(own, nbr.shape).copy()
    x_i = gather(points, own)
    x_j = gather(points, nbr)
    edges = concatenate([x_i, x_j - x_i], axis=-1)
    h = _shared_mlp(edges, extractor)
    h = max_reduce(h, axis=-2)
    return aggregate(h, extractor.aggregation, axis=-2)


# classifier head ----------------------------------------------------------

@dataclass
class ClassifierHead:
    weight: Tensor
    bias: Tensor
    class_slots: list
    init_seed: int = 0

    @property
    def feature_dim(self):
        return self.weight.shape[0]

    @property
    def num_classes(self):
        return len(self.class_slots)

    def parameters(self):
        return [self.weight, self.bias]


def _class_column(feature_dim, class_id, seed):
    rng = np.random.default_rng([int(seed), 2, int(class_id)])
    bound = 1.0 / np.sqrt(feature_dim)
    return rng.uniform(-bound, bound, size=feature_dim), rng.uniform(-bound, bound)


def init_head(feature_dim, class_ids, init_seed=0):
    class_ids = [int(c) for c in class_ids]
    if not class_ids:
        raise InvalidArgumentError("a head needs at least one class")
    if len(set(class_ids)) != len(class_ids):
        raise InvalidArgumentError("duplicate class ids")
    cols = [_class_column(feature_dim, c, init_seed) for c in class_ids]
    w = np.stack([c[0] for c in cols], axis=1)
    b = np.array([c[1] for c in cols])
    return ClassifierHead(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                          class_ids, int(init_seed))


def head_forward(feature, head):
    feature = as_tensor(feature)
    if feature.shape[-1] != head.feature_dim:
        raise InvalidArgumentError(
            f"feature dim {feature.shape[-1]} does not match head dim {head.feature_dim}")
    return column_matmul(feature, head.weight) + head.bias


def expand_head(head, new_class_ids, init_seed=None):
    """Append one freshly initialised column per new class.

    Existing columns and biases are copied bit-for-bit. Column values depend
    only on (seed, class id), so the order of expansions does not matter.
    """
    new_class_ids = [int(c) for c in new_class_ids]
    seed = head.init_seed if init_seed is None else int(init_seed)
    overlap = set(new_class_ids) & set(head.class_slots)
    if overlap:
        raise InvalidArgumentError(f"classes already present in head: {sorted(overlap)}")
    if len(set(new_class_ids)) != len(new_class_ids):
        raise InvalidArgumentError("duplicate class ids")
    if not new_class_ids:
        return ClassifierHead(Tensor(head.weight.data, requires_grad=head.weight.requires_grad),
                              Tensor(head.bias.data, requires_grad=head.bias.requires_grad),
                              list(head.class_slots), head.init_seed)
    fresh = init_head(head.feature_dim, new_class_ids, seed)
    w = np.concatenate([head.weight.data, fresh.weight.data], axis=1)
    b = np.concatenate([head.bias.data, fresh.bias.data])
    return ClassifierHead(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                          list(head.class_slots) + new_class_ids, head.init_seed)


# model -------------------------------------------------------------------

@dataclass
class ModelState:
    extractor: FeatureExtractor
    head: ClassifierHead
    role: str = "student"
    frozen: bool = False
    loss_history: list = field(default_factory=list)

    def parameters(self):
        return self.extractor.parameters() + self.head.parameters()

    def features(self, points):
        return self.extractor(points)

    def forward(self, points):
        return head_forward(self.features(points), self.head)

    __call__ = forward

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def clone(self, role="student"):
        """Deep copy with fresh, trainable parameter tensors."""
        twin = copy.deepcopy(self)
        twin.role = role
        twin.frozen = False
        for p in twin.parameters():
            p.requires_grad = True
            p.grad = None
        return twin

    def checksum(self):
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def build_model(kind, class_ids, widths=None, aggregation="max", k_neighbors=8, seed=0):
    ext = make_extractor(kind, widths, aggregation, k_neighbors, seed)
    return ModelState(ext, init_head(ext.feature_dim, class_ids, seed))


# checkpoints -------------------------------------------------------------

def _array_record(arr):
    return {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}


def _array_from(rec):
    return np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])


def model_to_dict(model):
    ext = model.extractor
    return {
        "format": CHECKPOINT_FORMAT,
        "role": model.role,
        "frozen": model.frozen,
        "extractor": {
            "kind": ext.kind,
            "widths": ext.widths,
            "aggregation": ext.aggregation,
            "k_neighbors": ext.k_neighbors,
            "seed": ext.seed,
            "layers": [{"weight": _array_record(w.data), "bias": _array_record(b.data)}
                       for w, b in zip(ext.weights, ext.biases)],
        },
        "head": {
            "class_slots": list(model.head.class_slots),
            "init_seed": model.head.init_seed,
            "weight": _array_record(model.head.weight.data),
            "bias": _array_record(model.head.bias.data),
        },
    }


def model_from_dict(doc):
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f"unsupported checkpoint format {doc.get('format')!r}")
    e = doc["extractor"]
    trainable = not doc.get("frozen", False)
    ext = FeatureExtractor(e["kind"], list(e["widths"]), e["aggregation"], e["k_neighbors"], e["seed"])
    for layer in e["layers"]:
        ext.weights.append(Tensor(_array_from(layer["weight"]), requires_grad=trainable))
        ext.biases.append(Tensor(_array_from(layer["bias"]), requires_grad=trainable))
    h = doc["head"]
    head = ClassifierHead(Tensor(_array_from(h["weight"]), requires_grad=trainable),
                          Tensor(_array_from(h["bias"]), requires_grad=trainable),
                          [int(c) for c in h["class_slots"]], h["init_seed"])
    return ModelState(ext, head, doc.get("role", "student"), bool(doc.get("frozen", False)))


def save_checkpoint(model, path, extra=None):
    """Write a JSON-of-arrays checkpoint atomically."""
    doc = model_to_dict(model)
    if extra:
        doc["extra"] = extra
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
