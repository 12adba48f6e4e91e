"""Tree-encoded diagnostic-function architectures.

A genome is a single-root binary expression tree.  Internal nodes (:class:`Op`)
carry an :class:`~cdnas.operators.OperatorKind`; leaves (:class:`Leaf`) carry a
:class:`~cdnas.operators.LeafKind`.  Trees are immutable; every edit returns a
new tree.  Node ids are pre-order positions.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterator, Union

from .operators import (
    ALL_LEAVES,
    ALL_OPERATORS,
    SHAPE_FREE_BINARY,
    SHAPE_FREE_UNARY,
    LeafKind,
    OperatorKind,
    ShapeRule,
)

MAX_DEPTH = 9


class StructuralError(ValueError):
    """Arity mismatch, bare-leaf root, or an unparsable encoding."""


class ConstraintError(ValueError):
    """Tree violates the depth cap."""


@dataclass(frozen=True)
class Leaf:
    kind: LeafKind

    def __repr__(self):
        return self.kind.value


@dataclass(frozen=True)
class Op:
    kind: OperatorKind
    children: tuple

    def __repr__(self):
        return f"{self.kind.label}({', '.join(map(repr, self.children))})"


Node = Union[Op, Leaf]
GenomeTree = Op
Path = tuple


class Shape(enum.Enum):
    SCALAR = "Scalar"
    VECTOR = "Vector"


@dataclass(frozen=True)
class TreeMetrics:
    depth: int
    breadth: int
    num_c: int


# --- construction helpers -----------------------------------------------------

H_S, H_E, H_C = (Leaf(k) for k in ALL_LEAVES)


def op(name: str | OperatorKind, *children: Node) -> Op:
    """Shorthand constructor: ``op("Sum", op("Mul", H_S, H_E))``."""
    kind = name if isinstance(name, OperatorKind) else OperatorKind.from_label(name)
    return Op(kind, tuple(children))


def validate(tree: Node) -> None:
    if not isinstance(tree, Op):
        raise StructuralError("root must be a computation node")
    for _, node in iter_nodes(tree):
        if isinstance(node, Op):
            if len(node.children) != node.kind.arity:
                raise StructuralError(
                    f"{node.kind.label} has {len(node.children)} children, arity is {node.kind.arity}"
                )
        elif not isinstance(node, Leaf):
            raise StructuralError(f"unexpected node {node!r}")


def iter_nodes(tree: Node, path: Path = ()) -> Iterator[tuple[Path, Node]]:
    """Pre-order ``(path, node)`` pairs; a path is the tuple of child slots from the root."""
    yield path, tree
    if isinstance(tree, Op):
        for i, child in enumerate(tree.children):
            yield from iter_nodes(child, path + (i,))


def computation_paths(tree: Node) -> list[Path]:
    return [p for p, n in iter_nodes(tree) if isinstance(n, Op)]


def get_node(tree: Node, path: Path) -> Node:
    for i in path:
        tree = tree.children[i]
    return tree


def replace_at(tree: Node, path: Path, new: Node) -> Node:
    if not path:
        return new
    head, rest = path[0], path[1:]
    children = list(tree.children)
    children[head] = replace_at(children[head], rest, new)
    return Op(tree.kind, tuple(children))


# --- shapes and repair --------------------------------------------------------


def _output_shape(kind: OperatorKind, shapes: list[Shape]) -> tuple[Shape, bool]:
    """Return ``(shape, feasible)``; infeasible nodes pass their input shape through."""
    vec = [s is Shape.VECTOR for s in shapes]
    feasible = not kind.needs_vector or all(vec)
    if not feasible:
        return (Shape.VECTOR if any(vec) else Shape.SCALAR), False
    rule = kind.shape_rule
    if rule is ShapeRule.SAME:
        return shapes[0], True
    if rule is ShapeRule.SINGLE:
        return Shape.SCALAR, True
    if rule is ShapeRule.CONSTANT:
        return Shape.VECTOR, True
    return (Shape.VECTOR if any(vec) else Shape.SCALAR), True


def infer_shapes(tree: GenomeTree) -> tuple[list[Shape], list[int]]:
    """Bottom-up shape per node (pre-order ids) and the ids of infeasible nodes."""
    validate(tree)
    shapes: list[Shape] = []
    infeasible: list[int] = []

    def visit(node):
        my_id = len(shapes)
        shapes.append(None)
        if isinstance(node, Leaf):
            shapes[my_id] = Shape.VECTOR
            return Shape.VECTOR
        child_shapes = [visit(c) for c in node.children]
        shape, ok = _output_shape(node.kind, child_shapes)
        if not ok:
            infeasible.append(my_id)
        shapes[my_id] = shape
        return shape

    visit(tree)
    return shapes, sorted(infeasible)


def root_shape(tree: GenomeTree) -> Shape:
    return infer_shapes(tree)[0][0]


def _choice(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def repair(tree: GenomeTree, rng) -> GenomeTree:
    """Swap the operator of every infeasible node for a shape-agnostic one.

    Post-order; unary nodes draw from the eight element-wise operators, Concat
    draws from Add/Mul.  Topology is untouched, feasible trees come back as-is.
    """
    validate(tree)

    def visit(node):
        if isinstance(node, Leaf):
            return node, Shape.VECTOR
        results = [visit(c) for c in node.children]
        children = tuple(r[0] for r in results)
        shapes = [r[1] for r in results]
        shape, ok = _output_shape(node.kind, shapes)
        kind = node.kind
        if not ok:
            kind = _choice(rng, SHAPE_FREE_UNARY if kind.arity == 1 else SHAPE_FREE_BINARY)
        if kind is node.kind and all(a is b for a, b in zip(children, node.children)):
            return node, shape
        return Op(kind, children), shape

    return visit(tree)[0]


# --- metrics and the interpretability objective --------------------------------


def metrics(tree: GenomeTree) -> TreeMetrics:
    def visit(node):
        if isinstance(node, Leaf):
            return 0, 1, 0
        parts = [visit(c) for c in node.children]
        return (
            1 + max(p[0] for p in parts),
            sum(p[1] for p in parts),
            1 + sum(p[2] for p in parts),
        )

    depth, breadth, num_c = visit(tree)
    return TreeMetrics(depth, breadth, num_c)


def interpretability_from_metrics(depth: int, breadth: int, num_c: int) -> float:
    if depth > MAX_DEPTH:
        raise ConstraintError(f"depth {depth} exceeds the cap of {MAX_DEPTH}")
    return (1 - (depth - 1) / 10) + breadth / 200 + (0.001 - num_c / 20000)


def interpretability(tree: GenomeTree) -> float:
    """Second objective: depth first, then breadth, then node count."""
    m = metrics(tree)
    return interpretability_from_metrics(m.depth, m.breadth, m.num_c)


# --- random generation ------------------------------------------------------


def random_leaf(rng) -> Leaf:
    return Leaf(_choice(rng, ALL_LEAVES))


def _random_op(kind: OperatorKind, rng) -> Op:
    return Op(kind, tuple(random_leaf(rng) for _ in range(kind.arity)))


def grow_tree(n_nodes: int, rng) -> GenomeTree:
    """Unrepaired random tree with exactly ``n_nodes`` computation nodes."""
    tree = _random_op(_choice(rng, ALL_OPERATORS), rng)
    for _ in range(n_nodes - 1):
        leaves = [p for p, n in iter_nodes(tree) if isinstance(n, Leaf)]
        where = _choice(rng, leaves)
        tree = replace_at(tree, where, _random_op(_choice(rng, ALL_OPERATORS), rng))
    return tree


def random_tree(node_range, rng, retries: int = 10) -> GenomeTree:
    lo, hi = node_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad node range {node_range}")
    n = int(rng.integers(lo, hi + 1))
    for _ in range(retries):
        tree = grow_tree(n, rng)
        if metrics(tree).depth <= MAX_DEPTH:
            return repair(tree, rng)
    raise ConstraintError(f"could not grow a tree of {n} nodes within depth {MAX_DEPTH}")


# --- seed architectures ------------------------------------------------------


def seed_tree(model: str) -> GenomeTree:
    """Encodings of IRT, MIRT, MF and NCD in the search space."""
    model = model.upper()
    if model == "MF":
        return op("Sum", op("Mul", H_S, H_E))
    if model == "MIRT":
        return op("Sigmoid", op("Add", op("FFN", H_E), op("Sum", op("Mul", H_C, H_S))))
    if model == "IRT":
        # Sigmoid(a * (theta - beta))
        return op(
            "Sigmoid",
            op("Mul", op("FFN", H_E), op("Add", op("FFN", H_S), op("Neg", op("FFN", H_E)))),
        )
    if model == "NCD":
        diff = op("Add", op("Sigmoid", H_S), op("Neg", op("Sigmoid", H_E)))
        return op("Mul", op("Mul", H_C, diff), op("Sigmoid", op("FFN", H_E)))
    raise ValueError(f"unknown seed model {model!r}")


SEED_MODELS = ("IRT", "MIRT", "MF", "NCD")


# --- serialization ------------------------------------------------------------


def canonical_key(tree: Node) -> str:
    """Prefix form with Add/Mul operands sorted, e.g. ``Sum(Mul(H_E,H_S))``."""
    if isinstance(tree, Leaf):
        return tree.kind.value
    keys = [canonical_key(c) for c in tree.children]
    if tree.kind.commutative:
        keys.sort()
    return f"{tree.kind.label}({','.join(keys)})"


def parse_key(text: str) -> GenomeTree:
    """Inverse of :func:`canonical_key` (also accepts whitespace)."""
    text = "".join(text.split())
    pos = 0

    def parse():
        nonlocal pos
        start = pos
        while pos < len(text) and text[pos] not in "(),":
            pos += 1
        name = text[start:pos]
        if pos < len(text) and text[pos] == "(":
            pos += 1
            children = [parse()]
            while text[pos] == ",":
                pos += 1
                children.append(parse())
            if text[pos] != ")":
                raise StructuralError(f"expected ')' at {pos}")
            pos += 1
            try:
                return Op(OperatorKind.from_label(name), tuple(children))
            except ValueError as exc:
                raise StructuralError(str(exc)) from None
        try:
            return Leaf(LeafKind(name))
        except ValueError:
            raise StructuralError(f"unknown leaf {name!r}") from None

    try:
        tree = parse()
    except IndexError:
        raise StructuralError("truncated key") from None
    if pos != len(text):
        raise StructuralError(f"trailing text at {pos}")
    validate(tree)
    return tree


def to_dict(tree: Node) -> dict:
    if isinstance(tree, Leaf):
        return {"leaf": tree.kind.value}
    return {"op": tree.kind.label, "children": [to_dict(c) for c in tree.children]}


def from_dict(obj: dict) -> Node:
    try:
        if "leaf" in obj:
            return Leaf(LeafKind(obj["leaf"]))
        return Op(OperatorKind.from_label(obj["op"]), tuple(from_dict(c) for c in obj["children"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise StructuralError(f"bad tree JSON: {exc}") from None


def to_json(tree: GenomeTree) -> str:
    return json.dumps(to_dict(tree), sort_keys=True)


def from_json(text: str) -> GenomeTree:
    tree = from_dict(json.loads(text))
    validate(tree)
    return tree


_UNARY_FILL = "#b7e1a1"
_BINARY_FILL = "#f9c27b"


def to_dot(tree: GenomeTree, name: str = "cdcell") -> str:
    """Graphviz DOT; data flows from leaves (triangles) up to the root."""
    lines = [f"digraph {name} {{", "  rankdir=BT;"]
    for idx, (path, node) in enumerate(iter_nodes(tree)):
        if isinstance(node, Leaf):
            lines.append(f'  n{idx} [label="{node.kind.value}", shape=triangle];')
        else:
            fill = _UNARY_FILL if node.kind.arity == 1 else _BINARY_FILL
            lines.append(
                f'  n{idx} [label="{node.kind.label}", shape=ellipse, style=filled, fillcolor="{fill}"];'
            )
    ids = {path: i for i, (path, _) in enumerate(iter_nodes(tree))}
    for path, node in iter_nodes(tree):
        if path:
            lines.append(f"  n{ids[path]} -> n{ids[path[:-1]]};")
    lines.append("}")
    return "\n".join(lines) + "\n"
