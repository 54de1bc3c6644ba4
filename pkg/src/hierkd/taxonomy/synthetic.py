"""Deterministic generator for iNat-style synthetic taxonomies."""

from __future__ import annotations

from typing import List, Optional, Sequence, Union

from hierkd.core.errors import TaxonomyError
from hierkd.taxonomy.tree import TaxonomyTree, load_taxonomy

INAT_LEVELS = ["kingdom", "phylum", "class", "order", "family", "genus", "species"]


def _level_names(count: int, names: Optional[Sequence[str]]) -> List[str]:
    if names is not None:
        if len(names) != count:
            raise TaxonomyError(f"expected {count} level names, got {len(names)}")
        return list(names)
    return [INAT_LEVELS[i] if i < len(INAT_LEVELS) else f"level{i + 1}" for i in range(count)]


def synthetic_taxonomy(
    branching: Union[int, Sequence[int]],
    depth: Optional[int] = None,
    name: str = "synthetic",
    level_names: Optional[Sequence[str]] = None,
) -> TaxonomyTree:
    """Build a complete tree below a singleton root.

    Args:
        branching: children per node, either one value for every level or a
            list with one entry per level below the root.
        depth: number of levels below the root; required when branching is an int.

    The result has ``1 + len(branching)`` levels. ``branching=4, depth=6`` gives
    the 5461-node iNat-shaped tree. Labels are unique within each level and
    zero-padded so label order matches generation order.
    """
    if isinstance(branching, int):
        if depth is None:
            raise TaxonomyError("depth is required when branching is a single integer")
        fanout = [branching] * depth
    else:
        fanout = list(branching)
    if not fanout or any(b < 1 for b in fanout):
        raise TaxonomyError("branching factors must be positive")

    levels = _level_names(len(fanout) + 1, level_names)
    nodes = [{"id": "n1_0", "label": levels[0].capitalize() + " root", "depth": 1, "parent": None}]
    frontier = ["n1_0"]
    for d, b in enumerate(fanout, start=2):
        width = len(frontier) * b
        pad = len(str(width - 1))
        next_frontier = []
        counter = 0
        for parent in frontier:
            for _ in range(b):
                node_id = f"n{d}_{counter}"
                nodes.append({"id": node_id, "label": f"{levels[d - 1]}-{counter:0{pad}d}", "depth": d, "parent": parent})
                next_frontier.append(node_id)
                counter += 1
        frontier = next_frontier

    return load_taxonomy({"name": name, "levels": levels, "nodes": nodes})
