"""Guttman R-tree over 3-D axis-aligned boxes.

Quadratic split policy with node fanout 8 (min fill 2). Closed-box
semantics: boxes that merely touch count as intersecting, so tangent fusion
candidates are still surfaced to the caller's acceptance test.

Single writer; concurrent read-only queries are safe between mutations.
"""

from __future__ import annotations

from typing import Hashable, Iterable, Iterator

from .core import Aabb

MIN_FILL = 2
MAX_FILL = 8

# Boxes are plain 6-tuples (lox, loy, loz, hix, hiy, hiz) internally.
_Box = tuple[float, float, float, float, float, float]


def _to_box(aabb: Aabb) -> _Box:
    lo, hi = aabb.lo, aabb.hi
    return (float(lo[0]), float(lo[1]), float(lo[2]),
            float(hi[0]), float(hi[1]), float(hi[2]))


def _to_aabb(box: _Box) -> Aabb:
    return Aabb(box[:3], box[3:])


def _union(a: _Box, b: _Box) -> _Box:
    return (min(a[0], b[0]), min(a[1], b[1]), min(a[2], b[2]),
            max(a[3], b[3]), max(a[4], b[4]), max(a[5], b[5]))


def _area(b: _Box) -> float:
    return (b[3] - b[0]) * (b[4] - b[1]) * (b[5] - b[2])


def _intersects(a: _Box, b: _Box) -> bool:
    return (a[0] <= b[3] and b[0] <= a[3] and
            a[1] <= b[4] and b[1] <= a[4] and
            a[2] <= b[5] and b[2] <= a[5])


class _Node:
    __slots__ = ("leaf", "boxes", "children", "parent")

    def __init__(self, leaf: bool) -> None:
        self.leaf = leaf
        self.boxes: list[_Box] = []
        # For leaves children are caller ids; otherwise child nodes.
        self.children: list = []
        self.parent: _Node | None = None

    def bounding(self) -> _Box:
        box = self.boxes[0]
        for other in self.boxes[1:]:
            box = _union(box, other)
        return box


class RTree:
    """R-tree keyed by caller-supplied unique ids."""

    def __init__(self) -> None:
        self._root = _Node(leaf=True)
        self._leaf_of: dict[Hashable, _Node] = {}
        self._box_of: dict[Hashable, _Box] = {}

    def __len__(self) -> int:
        return len(self._box_of)

    def __contains__(self, key: Hashable) -> bool:
        return key in self._box_of

    def ids(self) -> Iterator[Hashable]:
        return iter(self._box_of)

    def box_of(self, key: Hashable) -> Aabb:
        return _to_aabb(self._box_of[key])

    def insert(self, box: Aabb, key: Hashable) -> None:
        if key in self._box_of:
            raise KeyError(f"duplicate id {key!r}")
        self._insert_box(_to_box(box), key)

    def remove(self, key: Hashable) -> None:
        if key not in self._box_of:
            raise KeyError(f"unknown id {key!r}")
        leaf = self._leaf_of[key]
        idx = leaf.children.index(key)
        del leaf.children[idx]
        del leaf.boxes[idx]
        del self._leaf_of[key]
        del self._box_of[key]
        self._condense(leaf)

    def search_intersecting(self, box: Aabb) -> list[Hashable]:
        """All stored ids whose boxes overlap ``box``, in traversal order."""
        query = _to_box(box)
        hits: list[Hashable] = []
        if not self._box_of:
            return hits
        stack = [self._root]
        while stack:
            node = stack.pop()
            if node.leaf:
                for b, key in zip(node.boxes, node.children):
                    if _intersects(b, query):
                        hits.append(key)
            else:
                # Reversed push keeps traversal in entry order.
                for b, child in zip(reversed(node.boxes), reversed(node.children)):
                    if _intersects(b, query):
                        stack.append(child)
        return hits

    def root_box(self) -> Aabb | None:
        """Union of all stored boxes; None when the tree is empty."""
        if not self._box_of:
            return None
        return _to_aabb(self._root.bounding())

    def height(self) -> int:
        h = 1
        node = self._root
        while not node.leaf:
            h += 1
            node = node.children[0]
        return h

    # -- insertion ---------------------------------------------------------

    def _insert_box(self, box: _Box, key: Hashable) -> None:
        leaf = self._choose_leaf(self._root, box)
        leaf.boxes.append(box)
        leaf.children.append(key)
        self._leaf_of[key] = leaf
        self._box_of[key] = box
        self._split_and_adjust(leaf)

    def _choose_leaf(self, node: _Node, box: _Box) -> _Node:
        while not node.leaf:
            best = 0
            best_growth = float("inf")
            best_area = float("inf")
            for i, b in enumerate(node.boxes):
                area = _area(b)
                growth = _area(_union(b, box)) - area
                if growth < best_growth or (growth == best_growth and area < best_area):
                    best, best_growth, best_area = i, growth, area
            node = node.children[best]
        return node

    def _split_and_adjust(self, node: _Node) -> None:
        while True:
            parent = node.parent
            if len(node.children) > MAX_FILL:
                sibling = self._split(node)
                if parent is None:
                    new_root = _Node(leaf=False)
                    for child in (node, sibling):
                        new_root.boxes.append(child.bounding())
                        new_root.children.append(child)
                        child.parent = new_root
                    self._root = new_root
                    return
                idx = parent.children.index(node)
                parent.boxes[idx] = node.bounding()
                parent.boxes.append(sibling.bounding())
                parent.children.append(sibling)
                sibling.parent = parent
            elif parent is not None:
                idx = parent.children.index(node)
                parent.boxes[idx] = node.bounding()
            else:
                return
            node = parent

    def _split(self, node: _Node) -> _Node:
        entries = list(zip(node.boxes, node.children))
        seed_a, seed_b = self._pick_seeds(entries)
        first, second = entries[seed_a], entries[seed_b]
        rest = [e for i, e in enumerate(entries) if i not in (seed_a, seed_b)]

        groups: list[list] = [[first], [second]]
        covers: list[_Box] = [first[0], second[0]]
        while rest:
            need = [MIN_FILL - len(g) for g in groups]
            if need[0] >= len(rest):
                groups[0].extend(rest)
                break
            if need[1] >= len(rest):
                groups[1].extend(rest)
                break
            pick, side = self._pick_next(rest, covers, groups)
            entry = rest.pop(pick)
            groups[side].append(entry)
            covers[side] = _union(covers[side], entry[0])

        node.boxes = [e[0] for e in groups[0]]
        node.children = [e[1] for e in groups[0]]
        sibling = _Node(leaf=node.leaf)
        sibling.boxes = [e[0] for e in groups[1]]
        sibling.children = [e[1] for e in groups[1]]
        self._reparent(node)
        self._reparent(sibling)
        return sibling

    def _reparent(self, node: _Node) -> None:
        if node.leaf:
            for key in node.children:
                self._leaf_of[key] = node
        else:
            for child in node.children:
                child.parent = node

    @staticmethod
    def _pick_seeds(entries: list) -> tuple[int, int]:
        worst = -float("inf")
        pair = (0, 1)
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                a, b = entries[i][0], entries[j][0]
                dead = _area(_union(a, b)) - _area(a) - _area(b)
                if dead > worst:
                    worst = dead
                    pair = (i, j)
        return pair

    @staticmethod
    def _pick_next(rest: list, covers: list[_Box], groups: list[list]) -> tuple[int, int]:
        best_idx = 0
        best_diff = -1.0
        best_growth = (0.0, 0.0)
        for i, (box, _) in enumerate(rest):
            g0 = _area(_union(covers[0], box)) - _area(covers[0])
            g1 = _area(_union(covers[1], box)) - _area(covers[1])
            diff = abs(g0 - g1)
            if diff > best_diff:
                best_idx, best_diff, best_growth = i, diff, (g0, g1)
        g0, g1 = best_growth
        if g0 < g1:
            side = 0
        elif g1 < g0:
            side = 1
        elif _area(covers[0]) != _area(covers[1]):
            side = 0 if _area(covers[0]) < _area(covers[1]) else 1
        else:
            side = 0 if len(groups[0]) <= len(groups[1]) else 1
        return best_idx, side

    # -- removal -----------------------------------------------------------

    def _condense(self, node: _Node) -> None:
        orphans: list[tuple[_Box, Hashable]] = []
        while node.parent is not None:
            parent = node.parent
            idx = parent.children.index(node)
            if len(node.children) < MIN_FILL:
                del parent.children[idx]
                del parent.boxes[idx]
                self._collect_leaf_entries(node, orphans)
            else:
                parent.boxes[idx] = node.bounding()
            node = parent
        # Shrink a root that lost all but one child.
        while not self._root.leaf and len(self._root.children) == 1:
            self._root = self._root.children[0]
            self._root.parent = None
        if not self._root.leaf and not self._root.children:
            self._root = _Node(leaf=True)
        for box, key in orphans:
            del self._leaf_of[key]
            del self._box_of[key]
        for box, key in orphans:
            self._insert_box(box, key)

    def _collect_leaf_entries(self, node: _Node,
                              out: list[tuple[_Box, Hashable]]) -> None:
        if node.leaf:
            out.extend(zip(node.boxes, node.children))
        else:
            for child in node.children:
                self._collect_leaf_entries(child, out)


def bulk_build(items: Iterable[tuple[Aabb, Hashable]]) -> RTree:
    """Build a tree by sorted insertion (stable, deterministic ordering)."""
    tree = RTree()
    ordered = sorted(items, key=lambda it: (float(it[0].lo[0]), float(it[0].lo[1]),
                                            float(it[0].lo[2])))
    for box, key in ordered:
        tree.insert(box, key)
    return tree
