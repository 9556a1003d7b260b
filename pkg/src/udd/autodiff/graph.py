"""Append-only computation graph with reverse-mode differentiation.

Gradients are built as ordinary graph nodes, so ``derive`` can be applied to
its own output (gradient-of-gradient).
"""

from __future__ import annotations

from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .ops import ShapeError, lookup


class UnboundLeafError(LookupError):
    pass


class Node:
    """Handle to a node of a :class:`Graph`."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def shape(self) -> tuple:
        return self.graph._shape[self.id]

    @property
    def kind(self) -> str:
        return self.graph._kind[self.id]

    @property
    def attrs(self) -> dict:
        return self.graph._attrs[self.id]

    @property
    def parents(self) -> list["Node"]:
        return [Node(self.graph, p) for p in self.graph._parents[self.id]]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def __repr__(self):
        return f"Node({self.id}, {self.kind}, shape={self.shape})"

    def __hash__(self):
        return hash((id(self.graph), self.id))

    def __eq__(self, other):
        return isinstance(other, Node) and other.graph is self.graph and other.id == self.id

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.constant(other)

    def __add__(self, other):
        return self.graph.apply("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.graph.apply("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.graph.apply("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.graph.apply("sub", [self._lift(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return self.graph.apply("scalar_mul", [self], k=float(other))
        return self.graph.apply("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.graph.apply("scalar_mul", [self], k=1.0 / float(other))
        return self.graph.apply("div", [self, self._lift(other)])

    def __neg__(self):
        return self.graph.apply("scalar_mul", [self], k=-1.0)

    def __matmul__(self, other):
        return self.graph.apply("matmul", [self, self._lift(other)])


NodeLike = Union[Node, int]


class Graph:
    """A differentiable computation graph.

    Leaves are declared with a fixed shape and bound to arrays at evaluation
    time; constants carry their value. Nodes are never mutated after creation.
    """

    def __init__(self, dtype=None):
        # when set, floating constants are stored in this dtype so that a float32
        # graph is not silently promoted by float64 literals
        self.dtype = None if dtype is None else np.dtype(dtype)
        self._kind: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._attrs: list[dict] = []
        self._shape: list[tuple] = []
        self._leaves: dict[int, tuple[str, bool]] = {}
        self._consts: dict[int, np.ndarray] = {}
        self._bindings: dict[int, np.ndarray] = {}
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self._kind)

    # ------------------------------------------------------------ construction

    def _push(self, kind, parents, attrs, shape) -> Node:
        self._kind.append(kind)
        self._parents.append(tuple(parents))
        self._attrs.append(attrs)
        self._shape.append(tuple(int(s) for s in shape))
        return Node(self, len(self._kind) - 1)

    def leaf(self, name: str, shape: Sequence[int], learnable: bool = True) -> Node:
        node = self._push("leaf", (), {"name": name}, shape)
        self._leaves[node.id] = (name, learnable)
        return node

    def constant(self, value) -> Node:
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(self.dtype or np.float64)
        elif self.dtype is not None and value.dtype != self.dtype:
            value = value.astype(self.dtype)
        node = self._push("const", (), {}, value.shape)
        self._consts[node.id] = value
        return node

    def node(self, ref: NodeLike) -> Node:
        if isinstance(ref, Node):
            if ref.graph is not self:
                raise ValueError("node belongs to a different graph")
            return ref
        if not 0 <= ref < len(self._kind):
            raise IndexError(f"no node {ref}")
        return Node(self, ref)

    def apply(self, kind: str, inputs: Sequence[NodeLike], **attrs) -> Node:
        """Append a primitive node; shapes are checked here, not at evaluation."""
        prim = lookup(kind)
        nodes = [self.node(i) for i in inputs]
        if prim.arity is not None and len(nodes) != prim.arity:
            raise ShapeError(f"{prim.name}: expected {prim.arity} inputs, got {len(nodes)}")
        if prim.arity is None and not nodes:
            raise ShapeError(f"{prim.name}: needs at least one input")
        shape = prim.shape([n.shape for n in nodes], attrs)
        return self._push(prim.name, [n.id for n in nodes], attrs, shape)

    def is_leaf(self, ref: NodeLike) -> bool:
        return self.node(ref).id in self._leaves

    def leaf_name(self, ref: NodeLike) -> str:
        return self._leaves[self.node(ref).id][0]

    # ------------------------------------------------------------ evaluation

    def bind(self, bindings: Mapping[NodeLike, np.ndarray]) -> None:
        changed = False
        for ref, value in bindings.items():
            node = self.node(ref)
            if node.id not in self._leaves:
                raise ValueError(f"node {node.id} ({node.kind}) is not a leaf")
            value = np.asarray(value)
            if value.shape != node.shape:
                raise ShapeError(f"leaf {self.leaf_name(node)!r}: bound shape {value.shape}, declared {node.shape}")
            old = self._bindings.get(node.id)
            if old is None or not (old.dtype == value.dtype and np.array_equal(old, value)):
                changed = True
            # copied so that later in-place edits by the caller cannot go stale in the cache
            self._bindings[node.id] = value.copy()
        if changed:
            self._cache.clear()

    def _ancestors(self, targets: Iterable[int], stop: Optional[Mapping] = None) -> list[int]:
        seen = set()
        stack = list(targets)
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            if stop is None or i not in stop:
                stack.extend(self._parents[i])
        return sorted(seen)

    def eval_many(self, targets: Sequence[NodeLike], bindings: Optional[Mapping] = None) -> list[np.ndarray]:
        """Evaluate several nodes in one sweep.

        Intermediate values are released as soon as their last consumer ran;
        only requested targets are cached (until the bindings change).
        """
        if bindings:
            self.bind(bindings)
        ids = [self.node(t).id for t in targets]
        if all(i in self._cache for i in ids):
            return [self._cache[i] for i in ids]
        order = self._ancestors(ids, stop=self._cache)
        for i in order:
            if i in self._leaves and i not in self._bindings:
                raise UnboundLeafError(f"leaf {self._leaves[i][0]!r} (node {i}) is not bound")
        wanted = set(ids)
        uses: dict[int, int] = {}
        for i in order:
            if i in self._cache:
                continue
            for p in self._parents[i]:
                uses[p] = uses.get(p, 0) + 1
        values: dict[int, np.ndarray] = {}
        for i in order:
            if i in self._cache:
                values[i] = self._cache[i]
                continue
            kind = self._kind[i]
            if kind == "leaf":
                values[i] = self._bindings[i]
            elif kind == "const":
                values[i] = self._consts[i]
            else:
                parents = self._parents[i]
                args = [values[p] for p in parents]
                values[i] = lookup(kind).forward(args, self._attrs[i])
                for p in parents:
                    uses[p] -= 1
                    if uses[p] == 0 and p not in wanted:
                        del values[p]
        for i in ids:
            self._cache[i] = values[i]
        return [values[i] for i in ids]

    def eval(self, target: NodeLike, bindings: Optional[Mapping] = None) -> np.ndarray:
        return self.eval_many([target], bindings)[0]

    # ------------------------------------------------------------ differentiation

    def derive(self, scalar: NodeLike, wrt: Sequence[NodeLike]) -> list[Node]:
        """Return nodes computing d(scalar)/d(w) for each ``w`` in ``wrt``."""
        out = self.node(scalar)
        if out.size != 1:
            raise ShapeError(f"derive: target must have a single element, got shape {out.shape}")
        wrt_nodes = [self.node(w) for w in wrt]
        wrt_ids = {w.id for w in wrt_nodes}

        order = self._ancestors([out.id])
        relevant = set()
        for i in order:
            if i in wrt_ids or any(p in relevant for p in self._parents[i]):
                relevant.add(i)

        contribs: dict[int, list[Node]] = {}
        if out.id in relevant:
            contribs[out.id] = [self.apply("fill_like", [out], value=1.0)]
        totals: dict[int, Node] = {}
        for i in reversed(order):
            if i not in relevant or i not in contribs:
                continue
            parts = contribs.pop(i)
            total = parts[0]
            for extra in parts[1:]:
                total = self.apply("add", [total, extra])
            totals[i] = total
            parents = self._parents[i]
            if not parents:
                continue
            need = tuple(p in relevant for p in parents)
            if not any(need):
                continue
            prim = lookup(self._kind[i])
            if prim.vjp is None:
                continue
            grads = prim.vjp(self, Node(self, i), total, need)
            for p, gnode, want in zip(parents, grads, need):
                if want and gnode is not None:
                    contribs.setdefault(p, []).append(gnode)

        result = []
        for w in wrt_nodes:
            if w.id in totals:
                result.append(totals[w.id])
            else:
                result.append(self.apply("fill_like", [w], value=0.0))
        return result
