"""Axis-aligned bounding-volume hierarchy over triangles.

The tree is flattened into arrays so the compiled kernel can walk it
without touching Python objects. Node ``i`` is a leaf when ``left[i] < 0``;
leaves own ``order[start[i]:start[i] + count[i]]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAF_SIZE = 4


@dataclass(frozen=True)
class FlatBVH:
    lo: np.ndarray      # (M, 3) box minimum
    hi: np.ndarray      # (M, 3) box maximum
    left: np.ndarray    # (M,) child index or -1
    right: np.ndarray   # (M,)
    start: np.ndarray   # (M,) offset into order for leaves
    count: np.ndarray   # (M,) number of faces in leaf (0 for inner nodes)
    order: np.ndarray   # (F,) face indices, leaf-contiguous

    @property
    def n_nodes(self) -> int:
        return len(self.left)


def build_bvh(triangles: np.ndarray, leaf_size: int = LEAF_SIZE) -> FlatBVH:
    """Median split along the widest centroid axis. ``triangles`` is (F, 3, 3)."""
    tri_lo = triangles.min(axis=1)
    tri_hi = triangles.max(axis=1)
    centroids = triangles.mean(axis=1)

    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = np.arange(len(triangles), dtype=np.int64)

    def new_node():
        for arr in (lo, hi):
            arr.append(None)
        for arr in (left, right, start, count):
            arr.append(-1)
        return len(left) - 1

    # iterative to avoid recursion limits on large meshes
    root = new_node()
    stack = [(root, 0, len(order))]
    while stack:
        node, a, b = stack.pop()
        faces = order[a:b]
        lo[node] = tri_lo[faces].min(axis=0)
        hi[node] = tri_hi[faces].max(axis=0)
        if b - a <= leaf_size:
            start[node], count[node] = a, b - a
            continue
        c = centroids[faces]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort on (coordinate, face index) keeps the build deterministic
        perm = np.lexsort((faces, c[:, axis]))
        order[a:b] = faces[perm]
        m = a + (b - a) // 2
        l_node, r_node = new_node(), new_node()
        left[node], right[node], count[node] = l_node, r_node, 0
        stack.append((r_node, m, b))
        stack.append((l_node, a, m))

    return FlatBVH(
        lo=np.array(lo, dtype=np.float64),
        hi=np.array(hi, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        order=order,
    )
