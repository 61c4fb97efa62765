"""Adaptive kD-tree over normalized scene space.

Each leaf owns a 16-component mixture over (direction x position), its
running sufficient statistics, and a bounded vertex buffer.  The tree starts
as a regular 8x8x8 tesselation of the unit cube, splits leaves whose
per-iteration vertex count exceeds ``SUBDIVISION_THRESHOLD``, and merges cold
sibling leaves between iterations.
"""

from __future__ import annotations

import logging
import struct

import numpy as np

from . import em, seeding
from .em import EmConfig, SufficientStats
from .mixture import TangentMixture

log = logging.getLogger(__name__)

SUBDIVISION_THRESHOLD = 16_000  # vertices per leaf per iteration
COLLAPSE_THRESHOLD = SUBDIVISION_THRESHOLD // 4
MIN_TRAIN_VERTICES = 16
BUFFER_CAP = 4 * SUBDIVISION_THRESHOLD
COMPONENTS_PER_LEAF = 16

TREE_MAGIC = b"SDTR"
TREE_VERSION = 1

# vertex record layout: position(3), direction(3), normal(3), weight(1)
VERTEX_WIDTH = 10


class Leaf:
    """Payload of one kD-tree leaf."""

    __slots__ = (
        "lo", "hi", "uid", "mixture", "stats", "chunks", "buffered", "last_count",
    )

    def __init__(self, lo, hi, uid):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.uid = uid
        self.mixture: TangentMixture | None = None
        self.stats: SufficientStats | None = None
        self.chunks: list[np.ndarray] = []
        self.buffered = 0
        self.last_count = 0

    @property
    def initialized(self) -> bool:
        return self.mixture is not None

    @property
    def extent(self) -> float:
        return float(np.max(self.hi - self.lo))

    def vertices(self) -> np.ndarray:
        if not self.chunks:
            return np.empty((0, VERTEX_WIDTH))
        if len(self.chunks) > 1:
            self.chunks = [np.concatenate(self.chunks, axis=0)]
        return self.chunks[0]

    def append(self, verts: np.ndarray, rng_key: int):
        """Append vertex records, reservoir-downsampling past the cap."""
        self.chunks.append(verts)
        self.buffered += verts.shape[0]
        self.last_count += verts.shape[0]
        if self.buffered > BUFFER_CAP:
            data = self.vertices()
            rng = np.random.default_rng(
                np.random.SeedSequence([rng_key & 0xFFFFFFFF, self.uid, data.shape[0]])
            )
            keep = rng.choice(data.shape[0], size=BUFFER_CAP, replace=False)
            keep.sort()
            self.chunks = [data[keep]]
            self.buffered = BUFFER_CAP

    def clear_buffer(self):
        self.chunks = []
        self.buffered = 0


class _Node:
    __slots__ = ("axis", "split", "left", "right", "leaf")

    def __init__(self, leaf=None, axis=-1, split=0.0, left=None, right=None):
        self.axis = axis
        self.split = split
        self.left = left
        self.right = right
        self.leaf = leaf

    @property
    def is_leaf(self):
        return self.leaf is not None


class SpatialTree:
    """Binary partition of the unit cube with per-leaf mixtures."""

    def __init__(self, root: _Node, uid_counter: int, seed: int = 0):
        self.root = root
        self._uid = uid_counter
        self.seed = seed
        self._compile()

    # -- construction ------------------------------------------------------

    @classmethod
    def build_initial(cls, seed: int = 0) -> "SpatialTree":
        """Regular 8x8x8 grid: three center splits along each axis."""
        counter = [0]

        def build(lo, hi, depth):
            if depth == 9:
                leaf = Leaf(lo, hi, counter[0])
                counter[0] += 1
                return _Node(leaf=leaf)
            axis = depth % 3
            mid = 0.5 * (lo[axis] + hi[axis])
            lo_r = lo.copy(); lo_r[axis] = mid
            hi_l = hi.copy(); hi_l[axis] = mid
            return _Node(
                axis=axis, split=mid,
                left=build(lo, hi_l, depth + 1),
                right=build(lo_r, hi, depth + 1),
            )

        root = build(np.zeros(3), np.ones(3), 0)
        return cls(root, counter[0], seed=seed)

    def _next_uid(self) -> int:
        uid = self._uid
        self._uid += 1
        return uid

    def _compile(self):
        """Flatten the tree into arrays for vectorized point lookup."""
        axes, splits, lefts, rights, leaf_ids = [], [], [], [], []
        leaves: list[Leaf] = []

        def walk(node):
            idx = len(axes)
            axes.append(node.axis)
            splits.append(node.split)
            lefts.append(-1)
            rights.append(-1)
            if node.is_leaf:
                leaf_ids.append(len(leaves))
                leaves.append(node.leaf)
            else:
                leaf_ids.append(-1)
                lefts[idx] = walk(node.left)
                rights[idx] = walk(node.right)
            return idx

        walk(self.root)
        self._axes = np.array(axes, dtype=np.int8)
        self._splits = np.array(splits, dtype=np.float64)
        self._lefts = np.array(lefts, dtype=np.int32)
        self._rights = np.array(rights, dtype=np.int32)
        self._leaf_ids = np.array(leaf_ids, dtype=np.int32)
        self.leaves = leaves

    # -- queries -----------------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def lookup(self, points) -> np.ndarray:
        """Leaf index for each point; clamps input into the unit cube.

        Points exactly on a split plane go to the upper (>=) child.
        """
        pts = np.clip(np.asarray(points, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
        node = np.zeros(pts.shape[0], dtype=np.int32)
        while True:
            internal = self._leaf_ids[node] < 0
            if not internal.any():
                break
            idx = node[internal]
            ax = self._axes[idx]
            coord = pts[internal, ax]
            go_right = coord >= self._splits[idx]
            node[internal] = np.where(go_right, self._rights[idx], self._lefts[idx])
        return self._leaf_ids[node]

    def leaf_of(self, point) -> Leaf:
        return self.leaves[int(self.lookup(np.asarray(point).reshape(1, 3))[0])]

    # -- vertex ingestion ----------------------------------------------------

    def begin_iteration(self):
        for leaf in self.leaves:
            leaf.last_count = 0

    def deposit(self, positions, directions, normals, weights, rng_key: int = 0):
        """Distribute vertex records to their leaves (positions clamped)."""
        positions = np.clip(np.asarray(positions, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
        n = positions.shape[0]
        if n == 0:
            return
        records = np.concatenate(
            [
                positions,
                np.asarray(directions, dtype=np.float64).reshape(n, 3),
                np.asarray(normals, dtype=np.float64).reshape(n, 3),
                np.asarray(weights, dtype=np.float64).reshape(n, 1),
            ],
            axis=1,
        )
        ids = self.lookup(positions)
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        records = records[order]
        uniq, starts = np.unique(ids, return_index=True)
        bounds = np.append(starts, n)
        for i, leaf_id in enumerate(uniq):
            self.leaves[leaf_id].append(records[bounds[i]:bounds[i + 1]], rng_key)

    # -- refinement ----------------------------------------------------------

    def refine(self):
        """Split every leaf whose buffer exceeds the subdivision threshold."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                if node.leaf.buffered > SUBDIVISION_THRESHOLD:
                    self._split_leaf(node)
                    if not node.is_leaf:
                        stack.append(node.left)
                        stack.append(node.right)
            else:
                stack.append(node.left)
                stack.append(node.right)
        self._compile()

    def _split_leaf(self, node: _Node):
        leaf = node.leaf
        data = leaf.vertices()
        pos = data[:, :3]
        var = pos.var(axis=0)
        if np.all(var <= 0.0):
            return  # all vertices identical: keep as-is
        axis = int(np.argmax(var))
        split = float(pos[:, axis].mean())
        right_mask = pos[:, axis] >= split
        if not right_mask.any() or right_mask.all():
            return
        lo_r = leaf.lo.copy(); lo_r[axis] = split
        hi_l = leaf.hi.copy(); hi_l[axis] = split
        left = Leaf(leaf.lo, hi_l, self._next_uid())
        right = Leaf(lo_r, leaf.hi, self._next_uid())
        for child, mask in ((left, ~right_mask), (right, right_mask)):
            chunk = data[mask]
            if chunk.shape[0]:
                child.chunks = [chunk]
            child.buffered = int(chunk.shape[0])
            frac = chunk.shape[0] / max(data.shape[0], 1)
            child.last_count = int(round(leaf.last_count * frac))
            if leaf.initialized:
                child.mixture = leaf.mixture.copy()
                child.stats = leaf.stats.copy()
        node.leaf = None
        node.axis = axis
        node.split = split
        node.left = _Node(leaf=left)
        node.right = _Node(leaf=right)

    # -- training ------------------------------------------------------------

    def train_leaves(self, cfg: EmConfig, init_cfg: seeding.InitConfig | None = None,
                     iteration: int = 0):
        """One mini-batch EM step per leaf holding enough vertices.

        Uninitialized leaves with >= 16 vertices are seeded first; their
        buffers are cleared after training. Uninitialized leaves below the
        minimum retain their buffers so vertices keep accumulating.
        """
        init_cfg = init_cfg or seeding.InitConfig()
        for leaf in self.leaves:
            if leaf.buffered < MIN_TRAIN_VERTICES:
                if leaf.initialized:
                    leaf.clear_buffer()
                continue
            data = leaf.vertices()
            pos, dirs, normals, w = data[:, :3], data[:, 3:6], data[:, 6:9], data[:, 9]
            if not leaf.initialized:
                rng = np.random.default_rng(
                    np.random.SeedSequence([self.seed, leaf.uid, iteration])
                )
                leaf.mixture = seeding.init_leaf_mixture(
                    pos, normals, w, leaf.extent, init_cfg, rng
                )
                leaf.stats = SufficientStats.zeros(COMPONENTS_PER_LEAF, 5)
            previous = (leaf.mixture, leaf.stats)
            try:
                leaf.mixture, leaf.stats = em.mini_batch_step(
                    leaf.mixture, leaf.stats, dirs[:, None, :], pos, w, cfg
                )
            except Exception as exc:  # guiding must never take down a render
                leaf.mixture, leaf.stats = previous
                log.warning("leaf %d reverted after EM failure: %s", leaf.uid, exc)
            leaf.clear_buffer()

    # -- collapse --------------------------------------------------------------

    def collapse(self):
        """Merge sibling leaves whose combined last-iteration vertex count is
        below a quarter of the subdivision threshold (bottom-up)."""

        def visit(node):
            if node.is_leaf:
                return
            visit(node.left)
            visit(node.right)
            if node.left.is_leaf and node.right.is_leaf:
                a, b = node.left.leaf, node.right.leaf
                if a.last_count + b.last_count < COLLAPSE_THRESHOLD:
                    node.leaf = self._merge(a, b)
                    node.left = node.right = None
                    node.axis = -1

        visit(self.root)
        self._compile()

    def _merge(self, a: Leaf, b: Leaf) -> Leaf:
        merged = Leaf(np.minimum(a.lo, b.lo), np.maximum(a.hi, b.hi), self._next_uid())
        merged.last_count = a.last_count + b.last_count
        for src in (a, b):
            for chunk in src.chunks:
                merged.append(chunk, rng_key=self.seed)
        merged.last_count = a.last_count + b.last_count  # appends inflated it
        if a.initialized and b.initialized:
            wa, wb = float(a.last_count), float(b.last_count)
            if wa + wb <= 0.0:
                wa = wb = 1.0
            raw = np.concatenate([wa * a.mixture.weights, wb * b.mixture.weights])
            keep = np.sort(np.argsort(-raw, kind="stable")[:COMPONENTS_PER_LEAF])
            anchors = np.concatenate([a.mixture.anchors, b.mixture.anchors])[keep]
            euclid = np.concatenate([a.mixture.euclid_means, b.mixture.euclid_means])[keep]
            cov = np.concatenate([a.mixture.cov, b.mixture.cov])[keep]
            weights = raw[keep]
            merged.mixture = TangentMixture(
                weights / weights.sum(), anchors, euclid, cov, check=False
            )
            donor = a if a.last_count >= b.last_count else b
            merged.stats = donor.stats.copy()
        elif a.initialized or b.initialized:
            donor = a if a.initialized else b
            merged.mixture = donor.mixture.copy()
            merged.stats = donor.stats.copy()
        return merged

    # -- invariants / checkpointing ---------------------------------------------

    def leaf_boxes(self):
        return [(leaf.lo.copy(), leaf.hi.copy()) for leaf in self.leaves]

    def checkpoint(self) -> bytes:
        """Pre-order node list with embedded leaf mixture blobs and training
        state (vertex buffers are not persisted)."""
        out = [TREE_MAGIC, struct.pack("<IQ", TREE_VERSION, self._uid)]

        def walk(node):
            if node.is_leaf:
                leaf = node.leaf
                out.append(struct.pack("<B", 1))
                out.append(leaf.lo.astype("<f8").tobytes())
                out.append(leaf.hi.astype("<f8").tobytes())
                out.append(struct.pack("<QB", leaf.uid, 1 if leaf.initialized else 0))
                if leaf.initialized:
                    blob = leaf.mixture.serialize()
                    out.append(struct.pack("<I", len(blob)))
                    out.append(blob)
                    st = leaf.stats
                    out.append(struct.pack("<Id", st.batches, st.weight_norm))
                    for arr in (st.s0, st.s1, st.s2):
                        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            else:
                out.append(struct.pack("<Bbd", 0, node.axis, node.split))
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return b"".join(out)

    @classmethod
    def restore(cls, blob: bytes, seed: int = 0) -> "SpatialTree":
        if blob[:4] != TREE_MAGIC:
            raise ValueError("not a tree checkpoint")
        version, uid_counter = struct.unpack_from("<IQ", blob, 4)
        if version != TREE_VERSION:
            raise ValueError(f"unsupported tree checkpoint version {version}")
        pos = [16]

        def read(fmt):
            vals = struct.unpack_from(fmt, blob, pos[0])
            pos[0] += struct.calcsize(fmt)
            return vals

        def read_arr(shape):
            n = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos[0]).reshape(shape)
            pos[0] += 8 * n
            return arr.astype(np.float64)

        def walk():
            (kind,) = read("<B")
            if kind == 1:
                lo = read_arr((3,))
                hi = read_arr((3,))
                uid, initialized = read("<QB")
                leaf = Leaf(lo, hi, uid)
                if initialized:
                    (blen,) = read("<I")
                    leaf.mixture = TangentMixture.deserialize(blob[pos[0]:pos[0] + blen])
                    pos[0] += blen
                    batches, wnorm = read("<Id")
                    K, D = leaf.mixture.n_components, leaf.mixture.dim
                    st = SufficientStats(
                        read_arr((K,)), read_arr((K, D)), read_arr((K, D, D)),
                        weight_norm=wnorm, batches=batches,
                    )
                    leaf.stats = st
                return _Node(leaf=leaf)
            axis, split = read("<bd")
            left = walk()
            right = walk()
            return _Node(axis=axis, split=split, left=left, right=right)

        root = walk()
        return cls(root, uid_counter, seed=seed)
