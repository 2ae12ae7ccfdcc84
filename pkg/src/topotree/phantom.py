"""Synthetic multi-tree vascular phantoms.

Trees grow by recursive bifurcation from a root. Each segment is a straight
run of nodes spaced at most 0.5 voxels apart, with constant radius; children
take ``radius * decay`` (floored at ``min_radius``) and leave the parent's end
point at a random angle in a random plane. Segments that leave the grid or
come too close to existing vessels are re-drawn a few times and otherwise
dropped, so a branch may end early.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError
from .volume import (
    BinaryMask,
    GridDims,
    LabelVolume,
    ScalarVolume,
    euclidean_distance_transform,
    linear_index,
    read_volume,
    write_volume,
)

log = logging.getLogger(__name__)

NODE_STEP = 0.5
PLACEMENT_RETRIES = 100
SEGMENT_RETRIES = 12


class PhantomError(RuntimeError):
    pass


@dataclass
class CenterlineTree:
    """Nodes of one labeled vessel tree, stored column-wise.

    ``parent`` holds the parent's node id, or -1 for the root.
    """

    ids: np.ndarray
    pos: np.ndarray
    radius: np.ndarray
    parent: np.ndarray
    label: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(-1, 3)
        self.radius = np.asarray(self.radius, dtype=np.float64)
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.label = int(self.label)
        self._row = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def row(self, node_id: int) -> int:
        return self._row[int(node_id)]

    @property
    def root(self) -> int:
        roots = self.ids[self.parent < 0]
        if len(roots) != 1:
            raise PhantomError(f"tree {self.label} has {len(roots)} roots")
        return int(roots[0])

    def parent_rows(self) -> np.ndarray:
        return np.array([self._row[p] if p >= 0 else -1 for p in self.parent], dtype=np.int64)

    def validate(self, max_spacing: Optional[float] = None) -> None:
        """Raise PhantomError unless the tree is a single rooted, acyclic tree."""
        if len(set(self.ids.tolist())) != len(self.ids):
            raise PhantomError("duplicate node ids")
        if np.any(self.radius <= 0):
            raise PhantomError("non-positive radius")
        self.root  # exactly one root
        for p in self.parent:
            if p >= 0 and int(p) not in self._row:
                raise PhantomError(f"unresolved parent {p}")
        order = self.topological_rows()
        if len(order) != len(self):
            raise PhantomError("parent graph has a cycle or is disconnected")
        prow = self.parent_rows()
        has_parent = prow >= 0
        if np.any(self.radius[has_parent] > self.radius[prow[has_parent]] + 1e-12):
            raise PhantomError("radius increases away from the root")
        if max_spacing is not None and has_parent.any():
            step = np.linalg.norm(self.pos[has_parent] - self.pos[prow[has_parent]], axis=1)
            if step.max() > max_spacing + 1e-9:
                raise PhantomError(f"node spacing {step.max():.3f} exceeds {max_spacing}")

    def topological_rows(self) -> list[int]:
        """Rows in breadth-first order from the root (parents before children)."""
        children: dict[int, list[int]] = {}
        for k, p in enumerate(self.parent_rows()):
            children.setdefault(int(p), []).append(k)
        out = []
        queue = deque(children.get(-1, []))
        while queue:
            k = queue.popleft()
            out.append(k)
            queue.extend(children.get(k, []))
        return out

    def to_nodes(self) -> list[dict]:
        return [
            {
                "id": int(i),
                "pos": [float(c) for c in p],
                "radius": float(r),
                "parent": None if q < 0 else int(q),
                "label": self.label,
            }
            for i, p, r, q in zip(self.ids, self.pos, self.radius, self.parent)
        ]


def trees_from_nodes(nodes: Sequence[dict]) -> list[CenterlineTree]:
    by_label: dict[int, list[dict]] = {}
    for n in nodes:
        by_label.setdefault(int(n["label"]), []).append(n)
    trees = []
    for label in sorted(by_label):
        ns = by_label[label]
        trees.append(
            CenterlineTree(
                ids=[n["id"] for n in ns],
                pos=[n["pos"] for n in ns],
                radius=[n["radius"] for n in ns],
                parent=[-1 if n["parent"] is None else n["parent"] for n in ns],
                label=label,
            )
        )
    return trees


def write_trees(trees: Sequence[CenterlineTree], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nodes = [n for t in trees for n in t.to_nodes()]
    path.write_text(json.dumps({"nodes": nodes}, indent=1) + "\n")
    return path


def read_trees(path) -> list[CenterlineTree]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or "nodes" not in doc:
        raise FormatError(f"{path}: tree file must be an object with a 'nodes' list")
    return trees_from_nodes(doc["nodes"])


@dataclass
class TreeConfig:
    root: list[float]
    root_radius: float = 3.0
    depth: int = 2
    angle_range: list[float] = field(default_factory=lambda: [25.0, 50.0])
    radius_decay: float = 0.85
    segment_length: list[float] = field(default_factory=lambda: [10.0, 18.0])
    direction: Optional[list[float]] = None
    min_radius: float = 1.0

    def __post_init__(self):
        if not 0 < self.radius_decay <= 1:
            raise ValueError("radius_decay must be in (0, 1]")
        if self.root_radius <= 0 or self.min_radius <= 0:
            raise ValueError("radii must be positive")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        lo, hi = self.segment_length
        if not 0 < lo <= hi:
            raise ValueError("segment_length must be 0 < min <= max")
        a, b = self.angle_range
        if not 0 <= a <= b <= 180:
            raise ValueError("angle_range must satisfy 0 <= min <= max <= 180 degrees")


@dataclass
class PhantomConfig:
    seed: int
    dims: list[int]
    trees: list[TreeConfig]
    crossing_gap: Optional[float] = None
    clearance: float = 2.0

    def __post_init__(self):
        self.dims = list(GridDims.of(self.dims).shape)
        self.trees = [t if isinstance(t, TreeConfig) else TreeConfig(**t) for t in self.trees]
        if not self.trees:
            raise ValueError("at least one tree required")
        if self.crossing_gap is not None and len(self.trees) < 2:
            raise ValueError("crossing_gap needs at least two trees")
        for t in self.trees:
            p = np.asarray(t.root, dtype=float)
            if p.shape != (3,) or np.any(p < 0) or np.any(p > np.asarray(self.dims) - 1):
                raise ValueError(f"tree root {t.root} outside grid {self.dims}")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Phantom:
    trees: list[CenterlineTree]
    vessel_labels: LabelVolume
    center_mask: BinaryMask
    gt_centerness: ScalarVolume
    sources: list[int]
    overlap_voxels: int = 0

    def tree(self, label: int) -> CenterlineTree:
        for t in self.trees:
            if t.label == label:
                return t
        raise KeyError(f"no tree with label {label}")

    def source_positions(self) -> dict[int, list[float]]:
        return {t.label: [float(c) for c in t.pos[t.row(t.root)]] for t in self.trees}


# ---------------------------------------------------------------- generation


def _unit(v):
    return v / np.linalg.norm(v)


def _perpendicular(d, rng):
    while True:
        e = rng.standard_normal(3)
        e -= d * (e @ d)
        n = np.linalg.norm(e)
        if n > 1e-6:
            return e / n


def _segment_points(start, direction, length):
    n = max(1, math.ceil(length / NODE_STEP))
    s = np.arange(1, n + 1) * (length / n)
    return start + s[:, None] * direction


class _Grower:
    """Already placed nodes of all trees, for clearance checks."""

    REINDEX = 256

    def __init__(self, dims, clearance):
        self.hi = np.asarray(dims, dtype=float) - 1.0
        self.clearance = clearance
        self.pos = np.zeros((0, 3))
        self.rad = np.zeros(0)
        self.lab = np.zeros(0, dtype=np.int64)
        self.seg = np.zeros(0, dtype=np.int64)
        self.max_rad = 0.0
        self._kd = None
        self._indexed = 0

    def _near(self, pts, reach):
        if len(self.pos) - self._indexed > self.REINDEX:
            self._kd = cKDTree(self.pos)
            self._indexed = len(self.pos)
        found = set()
        if self._kd is not None:
            for lst in self._kd.query_ball_point(pts, reach):
                found.update(lst)
        recent = np.arange(self._indexed, len(self.pos))
        found = np.array(sorted(found), dtype=np.int64)
        return np.concatenate([found, recent])

    def fits(self, pts, radius, label, start, local, exempt=(), cross_gap=None):
        """True if ``pts`` lie in the grid and keep clear of every stored node.

        Nodes of the segments in ``exempt`` (parent and siblings at the branch
        point) are skipped when they lie within ``local`` of ``start``.
        """
        if np.any(pts < 0.0) or np.any(pts > self.hi):
            return False
        if not len(self.pos):
            return True
        gap = self.clearance if cross_gap is None else cross_gap
        idx = self._near(pts, radius + self.max_rad + max(gap, self.clearance))
        if not len(idx):
            return True
        pos, rad, other = self.pos[idx], self.rad[idx], self.lab[idx] != label
        d = np.linalg.norm(pts[:, None, :] - pos[None, :, :], axis=2)
        if np.any(d[:, other] < (radius + rad[other] + gap)[None, :]):
            return False
        skip = np.isin(self.seg[idx], list(exempt)) & (np.linalg.norm(pos - start, axis=1) <= local)
        own = ~other & ~skip
        return not np.any(d[:, own] < (radius + rad[own] + self.clearance)[None, :])

    def add(self, pts, radius, label, seg):
        self.pos = np.vstack([self.pos, pts])
        self.rad = np.concatenate([self.rad, np.full(len(pts), radius)])
        self.lab = np.concatenate([self.lab, np.full(len(pts), label, dtype=np.int64)])
        self.seg = np.concatenate([self.seg, np.full(len(pts), seg, dtype=np.int64)])
        self.max_rad = max(self.max_rad, radius)


class _TreeBuild:
    def __init__(self, tc: TreeConfig, label: int):
        self.tc, self.label = tc, label
        self.ids, self.pos, self.rad, self.par = [], [], [], []

    def append(self, node_id, p, r, parent):
        self.ids.append(node_id)
        self.pos.append(p)
        self.rad.append(r)
        self.par.append(parent)

    def tree(self) -> CenterlineTree:
        return CenterlineTree(self.ids, self.pos, self.rad, self.par, self.label)


def _place_root(build, grower, rng, dims, next_id, seg, attempt, aim=None):
    """Place root node plus root segment; returns (seg_ids, end, direction) or None."""
    tc = build.tc
    root = np.asarray(tc.root, dtype=float)
    d = np.asarray(tc.direction, float) if tc.direction is not None else _default_direction(tc, dims)
    d = _unit(d)
    length = rng.uniform(*tc.segment_length)
    cross_gap = None
    if aim is not None:
        d, length = aim
        cross_gap = 0.5
    elif attempt > 0 and tc.direction is None:
        d = _unit(d + 0.35 * rng.standard_normal(3))
    pts = _segment_points(root, d, length)
    local = 2.0 * tc.root_radius + grower.clearance + 1.0
    if not grower.fits(np.vstack([root, pts]), tc.root_radius, build.label, root, local, cross_gap=cross_gap):
        return None
    grower.add(np.vstack([root, pts]), tc.root_radius, build.label, seg)
    build.append(next_id, root, tc.root_radius, -1)
    seg_ids = list(range(next_id + 1, next_id + 1 + len(pts)))
    for k, (nid, p) in enumerate(zip(seg_ids, pts)):
        build.append(nid, p, tc.root_radius, next_id if k == 0 else seg_ids[k - 1])
    return seg_ids, pts[-1], d


def _children(build, seg, parent_seg, seg_end_id, end, d, radius, level, rng):
    tc = build.tc
    if level >= tc.depth:
        return []
    child_r = min(max(radius * tc.radius_decay, tc.min_radius), radius)
    # both children start in one branching plane, on opposite sides
    e = _perpendicular(d, rng)
    siblings: list[int] = []  # filled as the children get placed
    return [
        (build, seg, parent_seg, siblings, seg_end_id, end, d, child_r, level + 1, sign * e)
        for sign in (1.0, -1.0)
    ]


def _default_direction(tc, dims):
    center = (np.asarray(dims, dtype=float) - 1.0) / 2.0
    d = center - np.asarray(tc.root, dtype=float)
    if np.linalg.norm(d) < 1e-9:
        d = np.array([1.0, 0.0, 0.0])
    return _unit(d)


def _rasterize(trees, dims):
    shape = tuple(dims)
    labels = np.zeros(shape, dtype=np.uint16)
    overlap = 0
    hi = np.asarray(shape) - 1
    for t in trees:
        written = np.zeros(shape, dtype=bool)
        for p, r in zip(t.pos, t.radius):
            lo_v = np.maximum(np.floor(p - r).astype(int), 0)
            hi_v = np.minimum(np.ceil(p + r).astype(int), hi)
            sl = tuple(slice(a, b + 1) for a, b in zip(lo_v, hi_v))
            gx, gy, gz = np.ogrid[sl]
            ball = (gx - p[0]) ** 2 + (gy - p[1]) ** 2 + (gz - p[2]) ** 2 <= r * r
            written[sl] |= ball
        overlap += int(np.count_nonzero(written & (labels > 0) & (labels != t.label)))
        labels[written] = t.label
    center = np.zeros(shape, dtype=bool)
    for t in trees:
        vox = np.clip(np.rint(t.pos).astype(int), 0, hi)
        center[vox[:, 0], vox[:, 1], vox[:, 2]] = True
        # centerline voxels always carry their own tree's label
        labels[vox[:, 0], vox[:, 1], vox[:, 2]] = t.label
    return labels, center, overlap


def _crossing_ok(trees, gap):
    a, b = trees[0], trees[1]
    d = np.linalg.norm(a.pos[:, None, :] - b.pos[None, :, :], axis=2)
    return bool(np.any(d <= gap + a.radius[:, None] + b.radius[None, :]))


def generate_phantom(config: PhantomConfig) -> Phantom:
    """Deterministically build trees, label volume, centerline mask and centerness.

    Root segments are placed first, tree by tree; branches then grow
    breadth-first with all trees interleaved so no tree monopolizes the grid.
    """
    rng = np.random.default_rng(config.seed)
    dims = config.dims
    grower = _Grower(dims, config.clearance)
    builds = [_TreeBuild(tc, k + 1) for k, tc in enumerate(config.trees)]
    next_id = 0
    next_seg = 0
    queue: deque = deque()
    for k, build in enumerate(builds):
        crossing = config.crossing_gap is not None and k == 1
        for attempt in range(PLACEMENT_RETRIES):
            aim = _aim_past(builds[0], build.tc, config.crossing_gap, rng) if crossing else None
            placed = _place_root(build, grower, rng, dims, next_id, next_seg, attempt, aim)
            if placed is None:
                continue
            if crossing and not _crossing_ok([builds[0].tree(), build.tree()], config.crossing_gap):
                # roll back this root; cannot happen for a segment aimed past the other tree
                n = len(build.ids)
                grower.pos, grower.rad = grower.pos[:-n], grower.rad[:-n]
                grower.lab, grower.seg = grower.lab[:-n], grower.seg[:-n]
                grower._kd, grower._indexed = None, 0
                build.ids, build.pos, build.rad, build.par = [], [], [], []
                continue
            break
        else:
            raise PhantomError("phantom does not fit")
        seg_ids, end, d = placed
        next_id = seg_ids[-1] + 1
        queue.extend(_children(build, next_seg, -1, seg_ids[-1], end, d, build.tc.root_radius, 0, rng))
        next_seg += 1

    while queue:
        build, pseg, gseg, siblings, parent_id, start, direction, radius, level, side = queue.popleft()
        tc = build.tc
        exempt = [pseg, gseg, *siblings]
        pts = None
        for attempt in range(SEGMENT_RETRIES):
            e = side if attempt == 0 else _perpendicular(direction, rng)
            theta = math.radians(rng.uniform(*tc.angle_range))
            d = _unit(math.cos(theta) * direction + math.sin(theta) * e)
            cand = _segment_points(start, d, rng.uniform(*tc.segment_length))
            local = 2.0 * radius + grower.clearance + 1.0
            if grower.fits(cand, radius, build.label, start, local, exempt):
                pts = cand
                break
        if pts is None:
            continue
        grower.add(pts, radius, build.label, next_seg)
        siblings.append(next_seg)
        seg_ids = list(range(next_id, next_id + len(pts)))
        next_id += len(pts)
        for k, (nid, p) in enumerate(zip(seg_ids, pts)):
            build.append(nid, p, radius, parent_id if k == 0 else seg_ids[k - 1])
        queue.extend(_children(build, next_seg, pseg, seg_ids[-1], pts[-1], d, radius, level, rng))
        next_seg += 1

    trees = [b.tree() for b in builds]
    for t in trees:
        t.validate(max_spacing=1.0)
    labels, center, overlap = _rasterize(trees, dims)
    if overlap:
        log.info("phantom: %d tube voxels overwritten by a later tree", overlap)
    center_mask = BinaryMask(center)
    sources = [
        int(linear_index(np.clip(np.rint(t.pos[t.row(t.root)]).astype(int), 0, np.asarray(dims) - 1), dims)[0])
        for t in trees
    ]
    return Phantom(
        trees=trees,
        vessel_labels=LabelVolume(labels),
        center_mask=center_mask,
        gt_centerness=euclidean_distance_transform(center_mask),
        sources=sources,
        overlap_voxels=overlap,
    )


def _aim_past(other: _TreeBuild, tc: TreeConfig, gap: float, rng):
    """Root direction and length so the root segment passes beside the other tree's root segment."""
    root = np.asarray(tc.root, dtype=float)
    pos = np.asarray(other.pos)
    k = int(rng.integers(len(pos) // 4, len(pos)))
    q = pos[k]
    tangent = _unit(q - pos[k - 1])
    offset = _perpendicular(tangent, rng)
    clearance = other.rad[k] + tc.root_radius + rng.uniform(0.5, max(gap, 0.5))
    target = q + offset * clearance
    d = target - root
    dist = np.linalg.norm(d)
    lo, hi = tc.segment_length
    return _unit(d), dist + rng.uniform(lo, hi)


# ---------------------------------------------------------------- geodesics


class _Lifting:
    """Binary-lifting ancestor table for fast tree-path queries."""

    def __init__(self, tree: CenterlineTree):
        n = len(tree)
        prow = tree.parent_rows()
        order = tree.topological_rows()
        depth = np.zeros(n, dtype=np.int64)
        dist = np.zeros(n)
        for k in order:
            p = prow[k]
            if p >= 0:
                depth[k] = depth[p] + 1
                dist[k] = dist[p] + np.linalg.norm(tree.pos[k] - tree.pos[p])
        levels = max(1, int(depth.max()).bit_length())
        up = np.empty((levels, n), dtype=np.int64)
        up[0] = np.where(prow >= 0, prow, np.arange(n))
        for j in range(1, levels):
            up[j] = up[j - 1][up[j - 1]]
        self.up, self.depth, self.dist = up, depth, dist

    def lca(self, a, b):
        a, b = np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)
        swap = self.depth[a] < self.depth[b]
        a[swap], b[swap] = b[swap], a[swap].copy()
        diff = self.depth[a] - self.depth[b]
        for j in range(len(self.up)):
            bit = (diff >> j) & 1 == 1
            a[bit] = self.up[j][a[bit]]
        for j in range(len(self.up) - 1, -1, -1):
            move = self.up[j][a] != self.up[j][b]
            a[move] = self.up[j][a[move]]
            b[move] = self.up[j][b[move]]
        same = a == b
        return np.where(same, a, self.up[0][a])


def tree_geodesic_matrix(tree: CenterlineTree, pairs) -> list[float]:
    """Arc length along the tree between each (id, id) pair."""
    pairs = list(pairs)
    if not pairs:
        return []
    try:
        rows = np.array([[tree.row(i), tree.row(j)] for i, j in pairs], dtype=np.int64)
    except KeyError as exc:
        raise PhantomError(f"no tree path: node {exc.args[0]} is not in tree {tree.label}") from None
    lift = _Lifting(tree)
    anc = lift.lca(rows[:, 0], rows[:, 1])
    d = lift.dist[rows[:, 0]] + lift.dist[rows[:, 1]] - 2.0 * lift.dist[anc]
    d[rows[:, 0] == rows[:, 1]] = 0.0
    return [float(x) for x in np.maximum(d, 0.0)]


def corrupt_centers(mask: BinaryMask, drop_fraction: float, seed: int) -> BinaryMask:
    """Remove floor(drop_fraction * count) true voxels chosen uniformly at random."""
    if not 0.0 <= drop_fraction < 1.0:
        raise ValueError("drop_fraction must be in [0, 1)")
    idx = np.flatnonzero(mask.linear())
    n_drop = math.floor(drop_fraction * len(idx))
    flat = mask.linear().copy()
    if n_drop:
        order = np.random.default_rng(seed).permutation(len(idx))
        flat[idx[order[:n_drop]]] = False
    return BinaryMask(flat.reshape(mask.dims.shape, order="F"), spacing=mask.spacing)


def load_phantom_config(path) -> PhantomConfig:
    return PhantomConfig.from_dict(json.loads(Path(path).read_text()))


PHANTOM_FILES = {
    "trees": "trees.json",
    "vessel_labels": "vessel_labels.json",
    "center_mask": "center_mask.json",
    "gt_centerness": "gt_centerness.json",
    "meta": "phantom.json",
}


def write_phantom(phantom: Phantom, out_dir) -> dict[str, Path]:
    """Persist every phantom product into ``out_dir``; returns name -> header path.

    Volume payloads sit next to their headers as ``.raw`` files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in PHANTOM_FILES.items()}
    write_trees(phantom.trees, paths["trees"])
    write_volume(phantom.vessel_labels, paths["vessel_labels"])
    write_volume(phantom.center_mask, paths["center_mask"])
    write_volume(phantom.gt_centerness, paths["gt_centerness"])
    meta = {
        "sources": {str(k): v for k, v in sorted(phantom.source_positions().items())},
        "source_index": [int(s) for s in phantom.sources],
        "overlap_voxels": int(phantom.overlap_voxels),
    }
    paths["meta"].write_text(json.dumps(meta, indent=2) + "\n")
    return paths


def read_phantom(out_dir) -> Phantom:
    d = Path(out_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"phantom directory not found: {d}")
    meta = json.loads((d / PHANTOM_FILES["meta"]).read_text())
    labels = read_volume(d / PHANTOM_FILES["vessel_labels"])
    mask = read_volume(d / PHANTOM_FILES["center_mask"])
    score = read_volume(d / PHANTOM_FILES["gt_centerness"])
    for name, vol, kind in (("vessel_labels", labels, LabelVolume), ("center_mask", mask, BinaryMask),
                            ("gt_centerness", score, ScalarVolume)):
        if not isinstance(vol, kind):
            raise FormatError(f"{d / PHANTOM_FILES[name]}: expected {kind.__name__}")
    return Phantom(
        trees=read_trees(d / PHANTOM_FILES["trees"]),
        vessel_labels=labels,
        center_mask=mask,
        gt_centerness=score,
        sources=list(meta["source_index"]),
        overlap_voxels=int(meta.get("overlap_voxels", 0)),
    )


def _chains(tree: CenterlineTree) -> list[list[int]]:
    """Split a tree into polylines that run from the root or a branch point to a branch point or leaf."""
    kids: dict[int, list[int]] = {}
    for r, p in enumerate(tree.parent_rows()):
        if p >= 0:
            kids.setdefault(int(p), []).append(r)
    root = tree.row(tree.root)
    chains, stack = [], [[root]]
    while stack:
        chain = stack.pop()
        while True:
            ch = kids.get(chain[-1], [])
            if len(ch) != 1:
                break
            chain.append(ch[0])
        chains.append(chain)
        for c in reversed(ch):
            stack.append([chain[-1], c])
    return [c for c in chains if len(c) > 1] or [[root]]


def write_obj_lines(trees: Sequence[CenterlineTree], path) -> Path:
    """Wavefront-style text mesh: one ``v`` per node, one ``l`` per parent edge, one group per tree."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines, base = [], 0
    for t in trees:
        lines.append(f"g tree_{t.label}")
        lines.extend(f"v {p[0]!r} {p[1]!r} {p[2]!r}" for p in t.pos.astype(float).tolist())
        rows = t.parent_rows()
        lines.extend(f"l {base + int(p) + 1} {base + r + 1}" for r, p in enumerate(rows) if p >= 0)
        base += len(t)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_polylines_csv(trees: Sequence[CenterlineTree], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = ["polyline,label,point,node_id,x,y,z,radius"]
    k = 0
    for t in trees:
        for chain in (_chains(t) if len(t) else []):
            for n, r in enumerate(chain):
                x, y, z = (repr(float(c)) for c in t.pos[r])
                out.append(f"{k},{t.label},{n},{int(t.ids[r])},{x},{y},{z},{float(t.radius[r])!r}")
            k += 1
    path.write_text("\n".join(out) + "\n")
    return path
