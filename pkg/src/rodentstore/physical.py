"""Physical representation: a nesting flattened into its leaf entries plus a
preorder structure that rebuilds the nesting exactly."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterator

from .algebra import Nest


@dataclass(frozen=True)
class StructNode:
    depth: int
    child_count: int
    # scalar leaves and empty nestings both have no children; the flag tells them apart
    leaf: bool = False
    labels: tuple | None = None


@dataclass(frozen=True)
class PhysicalRepresentation:
    entries: tuple
    structure: tuple


def leaves(n: Any) -> Iterator[Any]:
    if isinstance(n, tuple):
        for c in n:
            yield from leaves(c)
    else:
        yield n


def flatten(n: Any) -> PhysicalRepresentation:
    entries: list = []
    structure: list = []
    stack = [(n, 0)]
    while stack:
        v, depth = stack.pop()
        if isinstance(v, tuple):
            structure.append(StructNode(depth, len(v), False, getattr(v, "labels", None)))
            stack.extend((c, depth + 1) for c in reversed(v))
        else:
            structure.append(StructNode(depth, 0, True))
            entries.append(v)
    return PhysicalRepresentation(tuple(entries), tuple(structure))


def unflatten(rep: PhysicalRepresentation) -> Any:
    entries = iter(rep.entries)
    nodes = iter(rep.structure)

    def build(depth: int) -> Any:
        node = next(nodes)
        if node.depth != depth:
            raise ValueError(f"structure node at depth {node.depth}, expected {depth}")
        if node.leaf:
            return next(entries)
        return Nest([build(depth + 1) for _ in range(node.child_count)], node.labels)

    try:
        value = build(0)
    except StopIteration:
        raise ValueError("truncated physical representation") from None
    if next(nodes, None) is not None or next(entries, _END) is not _END:
        raise ValueError("physical representation has trailing data")
    return value


_END = object()
