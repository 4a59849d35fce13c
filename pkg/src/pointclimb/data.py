"""Point cloud ingestion, synthetic shapes and the incremental label mapper."""
from __future__ import annotations

import glob
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidArgumentError, InvalidStateError, LoadError, ParseError

NUM_MODELNET_CLASSES = 40


@dataclass
class PointCloud:
    points: np.ndarray
    global_class: int
    source_id: str = ""


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray


@dataclass
class PointSet:
    """A split stored as stacked arrays: ``points[N, P, 3]`` and ``labels[N]``."""

    points: np.ndarray
    labels: np.ndarray
    source_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, mask):
        idx = np.flatnonzero(mask)
        return PointSet(self.points[idx], self.labels[idx], [self.source_ids[i] for i in idx])

    def select_classes(self, classes):
        return self.subset(np.isin(self.labels, list(classes)))

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        if not sets:
            raise InvalidArgumentError("nothing to concatenate")
        return cls(np.concatenate([s.points for s in sets]),
                   np.concatenate([s.labels for s in sets]),
                   [sid for s in sets for sid in s.source_ids])


def stack_clouds(clouds):
    if not clouds:
        raise InvalidArgumentError("no point clouds given")
    return PointSet(np.stack([c.points for c in clouds]).astype(np.float64),
                    np.array([c.global_class for c in clouds], dtype=np.int64),
                    [c.source_id for c in clouds])


# OFF meshes ---------------------------------------------------------------

def _lines_with_offsets(raw):
    offset = 0
    for line in raw.split(b"\n"):
        yield offset, line
        offset += len(line) + 1


def parse_off(raw):
    """Parse an OFF mesh, fan-triangulating polygons.

    Accepts the ``OFF490 322 0`` header variant where the vertex count is
    glued to the magic word.
    """
    if isinstance(raw, str):
        raw = raw.encode()
    lines = [(off, ln) for off, ln in _lines_with_offsets(raw)
             if ln.strip() and not ln.lstrip().startswith(b"#")]
    if not lines:
        raise ParseError("empty OFF input", 0)
    off0, first = lines[0]
    head = first.strip()
    if not head.startswith(b"OFF"):
        raise ParseError("missing OFF magic", off0 + len(first) - len(first.lstrip()))
    rest = head[3:].split()
    body = lines[1:]
    if not rest:
        if not body:
            raise ParseError("missing OFF counts", off0 + len(first))
        cnt_off, cnt_line = body[0]
        rest = cnt_line.split()
        body = body[1:]
    else:
        cnt_off = off0
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (IndexError, ValueError):
        raise ParseError("bad OFF counts", cnt_off) from None
    if nv < 0 or nf < 0:
        raise ParseError("negative OFF counts", cnt_off)
    if len(body) < nv + nf:
        raise ParseError(f"expected {nv} vertices and {nf} faces, file too short", len(raw))
    verts = np.empty((nv, 3))
    for i in range(nv):
        off, ln = body[i]
        tok = ln.split()
        try:
            verts[i] = [float(t) for t in tok[:3]]
        except ValueError:
            raise ParseError(f"bad vertex {i}", off) from None
        if len(tok) < 3:
            raise ParseError(f"vertex {i} has fewer than 3 coordinates", off)
    tris = []
    for j in range(nf):
        off, ln = body[nv + j]
        tok = ln.split()
        try:
            k = int(tok[0])
            idx = [int(t) for t in tok[1: 1 + k]]
        except (IndexError, ValueError):
            raise ParseError(f"bad face {j}", off) from None
        if k < 3 or len(idx) != k:
            raise ParseError(f"face {j} needs at least 3 indices", off)
        for v in idx:
            if not 0 <= v < nv:
                raise ParseError(f"face {j} index {v} out of range [0, {nv})", off)
        for a in range(1, k - 1):
            tris.append((idx[0], idx[a], idx[a + 1]))
    faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return Mesh(verts, faces)


def triangle_areas(mesh):
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def sample_surface_points(mesh, n, seed=0):
    """Area-weighted uniform samples on the mesh surface, ``[n, 3]``."""
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    areas = triangle_areas(mesh) if len(mesh.faces) else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise InvalidArgumentError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.faces[face, i]] for i in range(3))
    return ((1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c)


def normalize_unit_sphere(points):
    """Centre on the centroid and scale the farthest point to radius 1."""
    points = np.asarray(points, dtype=np.float64)
    centred = points - points.mean(axis=-2, keepdims=True)
    radius = np.linalg.norm(centred, axis=-1).max(axis=-1, keepdims=True)
    radius = np.where(radius > 0, radius, 1.0)
    return centred / radius[..., None]


# HDF5 ---------------------------------------------------------------------

def load_h5_split(path, split="train"):
    """Read ``data``/``label`` point sets from one file or a directory of them.

    A directory is searched for ``*{split}*.h5`` files in sorted order.
    """
    import h5py

    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, f"*{split}*.h5")))
        if not files:
            raise LoadError(f"no *{split}*.h5 files under {path}", field="path")
    else:
        files = [path]
    clouds = []
    for fname in files:
        with h5py.File(fname, "r") as fh:
            for name in ("data", "label"):
                if name not in fh:
                    raise LoadError(f"{fname}: missing dataset {name!r}", field=name)
            data = np.asarray(fh["data"][...], dtype=np.float64)
            label = np.asarray(fh["label"][...])
        if data.ndim != 3 or data.shape[-1] != 3:
            raise LoadError(f"{fname}: 'data' must be [N, P, 3], got {data.shape}", field="data")
        label = label.reshape(label.shape[0], -1) if label.ndim > 1 else label[:, None]
        if label.shape != (data.shape[0], 1):
            raise LoadError(f"{fname}: 'label' must have one entry per sample", field="label")
        label = label[:, 0].astype(np.int64)
        if label.size and (label.min() < 0 or label.max() >= NUM_MODELNET_CLASSES):
            raise LoadError(f"{fname}: 'label' values must lie in [0, {NUM_MODELNET_CLASSES})",
                            field="label")
        base = os.path.basename(fname)
        clouds += [PointCloud(data[i], int(label[i]), f"{base}:{i}") for i in range(len(label))]
    return clouds


def load_off_dir(root, split, n_points, seed=0):
    """ModelNet40 OFF layout: ``root/<class>/<split>/*.off``; classes sorted by name."""
    names = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    clouds = []
    for cid, name in enumerate(names):
        for fname in sorted(glob.glob(os.path.join(root, name, split, "*.off"))):
            with open(fname, "rb") as fh:
                mesh = parse_off(fh.read())
            pts = sample_surface_points(mesh, n_points, seed=[int(seed), cid, len(clouds)])
            clouds.append(PointCloud(normalize_unit_sphere(pts), cid, os.path.relpath(fname, root)))
    return clouds


def load_modelnet40(root, n_points=1024, seed=0):
    """Train/test :class:`PointSet` pair; HDF5 packaging wins when both exist."""
    if not os.path.isdir(root):
        raise LoadError(f"dataset root {root} does not exist", field="path")
    if glob.glob(os.path.join(root, "**", "*.h5"), recursive=True):
        h5dir = os.path.dirname(sorted(glob.glob(os.path.join(root, "**", "*train*.h5"),
                                                 recursive=True))[0])
        train, test = load_h5_split(h5dir, "train"), load_h5_split(h5dir, "test")
    else:
        train = load_off_dir(root, "train", 2 * n_points, seed)
        test = load_off_dir(root, "test", 2 * n_points, seed)
    for c in train + test:
        c.points = normalize_unit_sphere(c.points)
    return stack_clouds(train), stack_clouds(test)


def subsample_points(points, n, rng):
    """Random ``n``-point subset of every cloud in ``points[N, P, 3]``."""
    num, p = points.shape[:2]
    if p == n:
        return points
    if p < n:
        idx = rng.integers(0, p, size=(num, n))
    else:
        idx = np.argsort(rng.random((num, p)), axis=1)[:, :n]
    return np.take_along_axis(points, idx[..., None], axis=1)


# synthetic shapes ---------------------------------------------------------

def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box_surface(rng, n, lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    face_areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]] * 2)
    face = rng.choice(6, size=n, p=face_areas / face_areas.sum())
    pts = lo + rng.random((n, 3)) * ext
    axis = face % 3
    side = np.where(face < 3, lo[axis], hi[axis])
    pts[np.arange(n), axis] = side
    return pts


def _boxes(rng, n, boxes):
    areas = []
    for lo, hi in boxes:
        e = np.subtract(hi, lo)
        areas.append(2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]))
    counts = rng.multinomial(n, np.array(areas) / sum(areas))
    return np.concatenate([_box_surface(rng, c, lo, hi) for c, (lo, hi) in zip(counts, boxes)])


def _cube(rng, n):
    return _box_surface(rng, n, [-1, -1, -1], [1, 1, 1])


def _cylinder(rng, n, radius=0.6):
    # slender, so its proportions differ from the cube's
    side_area, cap_area = 4 * np.pi * radius, 2 * np.pi * radius ** 2
    side = rng.random(n) < side_area / (side_area + cap_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    r = radius * np.where(side, 1.0, np.sqrt(rng.random(n)))
    z = np.where(side, rng.uniform(-1, 1, n), np.where(rng.random(n) < 0.5, -1.0, 1.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _cone(rng, n):
    lateral = np.pi * np.sqrt(5.0)
    side = rng.random(n) < lateral / (lateral + np.pi)
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.sqrt(rng.random(n))
    z = np.where(side, 1 - 2 * r, -1.0)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n, major=1.0, minor=0.35):
    u = rng.uniform(0, 2 * np.pi, n)
    v = rng.uniform(0, 2 * np.pi, n)
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def _plane(rng, n):
    return np.column_stack([rng.uniform(-1, 1, (n, 2)), np.zeros(n)])


def _helix(rng, n, tube=0.08):
    t = rng.uniform(0, 4 * np.pi, n)
    centre = np.stack([np.cos(t), np.sin(t), t / (2 * np.pi) - 1], axis=1)
    return centre + tube * _sphere(rng, n)


def _cross(rng, n):
    w = 0.2
    return _boxes(rng, n, [([-1, -w, -w], [1, w, w]), ([-w, -1, -w], [w, 1, w]),
                           ([-w, -w, -1], [w, w, 1])])


def _l_bracket(rng, n):
    return _boxes(rng, n, [([-1, -0.3, -1], [1, 0.3, -0.6]), ([-1, -0.3, -0.6], [-0.6, 0.3, 1])])


def _ellipsoid(rng, n):
    return _sphere(rng, n) * np.array([1.0, 0.6, 0.35])


SHAPE_FAMILIES = {
    "sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "cone": _cone, "torus": _torus,
    "plane": _plane, "helix": _helix, "cross": _cross, "l_bracket": _l_bracket,
    "ellipsoid": _ellipsoid,
}
FAMILY_NAMES = list(SHAPE_FAMILIES)
ASPECT_VARIANTS = [(1.0, 1.0, 1.0), (1.0, 1.0, 2.5), (1.0, 1.0, 0.4), (2.5, 1.0, 1.0)]
MAX_SYNTHETIC_CLASSES = len(FAMILY_NAMES) * len(ASPECT_VARIANTS)


def synthetic_class_name(class_id):
    family = FAMILY_NAMES[class_id % len(FAMILY_NAMES)]
    variant = class_id // len(FAMILY_NAMES)
    return family if variant == 0 else f"{family}_v{variant}"


def _rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_synthetic_shape(class_id, n_points, rng, jitter=0.01):
    """One raw (un-normalised) sample of a synthetic class.

    The family shape is stretched by the class's aspect variant and a random
    per-axis scale in [0.8, 1.2], rotated about the vertical axis and jittered.
    """
    family = SHAPE_FAMILIES[FAMILY_NAMES[class_id % len(FAMILY_NAMES)]]
    aspect = np.array(ASPECT_VARIANTS[class_id // len(FAMILY_NAMES)])
    pts = family(rng, n_points) * aspect * rng.uniform(0.8, 1.2, 3)
    pts = pts @ _rotation_z(rng.uniform(0, 2 * np.pi)).T
    return pts + rng.normal(scale=jitter, size=pts.shape)


def generate_synthetic_classes(num_classes, samples_per_class=40, n_points=256, seed=0,
                               cache_dir=None):
    """Synthetic train/test :class:`PointSet` pair with an 80/20 split per class.

    When ``cache_dir`` is given the arrays are stored in (and reloaded from)
    ``synthetic_s{seed}_c{classes}_k{samples}_n{points}.npz`` with keys
    ``train_points``, ``train_labels``, ``test_points``, ``test_labels``.
    """
    if not 1 <= num_classes <= MAX_SYNTHETIC_CLASSES:
        raise InvalidArgumentError(
            f"num_classes must be in [1, {MAX_SYNTHETIC_CLASSES}], got {num_classes}")
    if samples_per_class < 2:
        raise InvalidArgumentError("need at least 2 samples per class for a train/test split")
    cache = None
    if cache_dir is not None:
        cache = os.path.join(cache_dir, f"synthetic_s{seed}_c{num_classes}_k{samples_per_class}"
                                        f"_n{n_points}.npz")
        if os.path.exists(cache):
            with np.load(cache) as z:
                return (_synthetic_split(z["train_points"], z["train_labels"], seed, "train"),
                        _synthetic_split(z["test_points"], z["test_labels"], seed, "test"))
    n_test = max(1, int(round(samples_per_class * 0.2)))
    train_pts, train_lab, test_pts, test_lab = [], [], [], []
    for cid in range(num_classes):
        rng = np.random.default_rng([int(seed), 3, cid])
        clouds = [normalize_unit_sphere(sample_synthetic_shape(cid, n_points, rng))
                  for _ in range(samples_per_class)]
        train_pts += clouds[n_test:]
        test_pts += clouds[:n_test]
        train_lab += [cid] * (samples_per_class - n_test)
        test_lab += [cid] * n_test
    out = (np.array(train_pts), np.array(train_lab), np.array(test_pts), np.array(test_lab))
    if cache is not None:
        os.makedirs(cache_dir, exist_ok=True)
        tmp = cache + ".tmp.npz"
        np.savez(tmp, train_points=out[0], train_labels=out[1], test_points=out[2],
                 test_labels=out[3])
        os.replace(tmp, cache)
    return (_synthetic_split(out[0], out[1], seed, "train"),
            _synthetic_split(out[2], out[3], seed, "test"))


def _synthetic_split(points, labels, seed, split):
    ids = [f"synthetic:{seed}:{split}:{i}" for i in range(len(labels))]
    return PointSet(np.asarray(points, dtype=np.float64), np.asarray(labels, dtype=np.int64), ids)


# label mapping -------------------------------------------------------------

class LabelMapper:
    """Bijection between global class ids and contiguous logit indices."""

    def __init__(self, classes=()):
        self._classes = []
        self._index = {}
        for c in classes:
            self._add(int(c))

    def _add(self, c):
        if c in self._index:
            raise InvalidStateError(f"class {c} is already mapped to logit {self._index[c]}")
        self._index[c] = len(self._classes)
        self._classes.append(c)

    def __len__(self):
        return len(self._classes)

    def __contains__(self, c):
        return int(c) in self._index

    def __eq__(self, other):
        return isinstance(other, LabelMapper) and self._classes == other._classes

    def __repr__(self):
        return f"LabelMapper({self._classes})"

    @property
    def classes(self):
        return list(self._classes)

    def extend(self, task_classes):
        out = LabelMapper(self._classes)
        for c in task_classes:
            out._add(int(c))
        return out

    def to_index(self, class_ids):
        try:
            return np.array([self._index[int(c)] for c in np.ravel(class_ids)], dtype=np.int64)
        except KeyError as exc:
            raise InvalidArgumentError(f"class {exc.args[0]} is not mapped") from None

    def to_class(self, indices):
        return np.array([self._classes[int(i)] for i in np.ravel(indices)], dtype=np.int64)


def map_labels(mapper, task_classes):
    return mapper.extend(task_classes)


# task datasets and the audited provider -----------------------------------

@dataclass
class TaskDataset:
    task_index: int
    classes: list
    train: PointSet
    test: PointSet


def split_tasks(train, test, scenario):
    """Cut full train/test sets into one :class:`TaskDataset` per scenario task."""
    tasks = []
    for t, classes in enumerate(scenario.tasks):
        tr, te = train.select_classes(classes), test.select_classes(classes)
        for c in classes:
            if not np.any(tr.labels == c) or not np.any(te.labels == c):
                raise InvalidArgumentError(f"class {c} is missing from the train or test split")
        if set(tr.source_ids) & set(te.source_ids):
            raise InvalidArgumentError(f"task {t} train and test splits share samples")
        tasks.append(TaskDataset(t, list(classes), tr, te))
    return tasks


class DataProvider:
    """Hands out task splits and records every access in ``reads``.

    Each record is ``(kind, task_index)`` with ``kind`` in ``{"train", "test"}``.
    """

    def __init__(self, tasks):
        self._tasks = list(tasks)
        self.reads = []

    @classmethod
    def from_scenario(cls, train, test, scenario):
        return cls(split_tasks(train, test, scenario))

    def __len__(self):
        return len(self._tasks)

    def classes(self, t):
        return list(self._tasks[t].classes)

    def train_split(self, t):
        self.reads.append(("train", t))
        return self._tasks[t].train

    def test_split(self, t):
        self.reads.append(("test", t))
        return self._tasks[t].test

    def task(self, t):
        self.reads.append(("train", t))
        self.reads.append(("test", t))
        return self._tasks[t]

    def train_reads(self):
        return [t for kind, t in self.reads if kind == "train"]
