"""Taxonomy tree model, validation and serialization."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError

from hierkd.core.errors import TaxonomyError
from hierkd.core.models import TaxNode, TaxPath

logger = logging.getLogger(__name__)


class TaxonomyTree(BaseModel):
    """A validated, immutable rooted taxonomy.

    Build instances through :func:`load_taxonomy`; the constructor alone does not
    check the tree invariants.
    """
    model_config = ConfigDict(frozen=True)

    name: str = Field(..., description="Taxonomy identifier")
    levels: List[str] = Field(..., min_length=1, description="Level names, index 0 is depth 1")
    nodes: List[TaxNode] = Field(..., min_length=1)
    root: str

    _by_id: Dict[str, TaxNode] = PrivateAttr(default_factory=dict)
    _children: Dict[str, List[TaxNode]] = PrivateAttr(default_factory=dict)
    _by_depth: Dict[int, List[TaxNode]] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context: Any) -> None:
        by_id = {n.id: n for n in self.nodes}
        children: Dict[str, List[TaxNode]] = defaultdict(list)
        by_depth: Dict[int, List[TaxNode]] = defaultdict(list)
        for n in self.nodes:
            if n.parent is not None:
                children[n.parent].append(n)
            by_depth[n.depth].append(n)
        self._by_id = by_id
        self._children = {k: sorted(v, key=lambda n: (n.label, n.id)) for k, v in children.items()}
        self._by_depth = {k: sorted(v, key=lambda n: (n.label, n.id)) for k, v in by_depth.items()}

    @property
    def depth(self) -> int:
        """L, the number of levels."""
        return len(self.levels)

    @property
    def max_depth(self) -> int:
        return max(self._by_depth)

    @property
    def singleton_levels(self) -> List[int]:
        """Depths holding exactly one node (e.g. a lone kingdom)."""
        return [d for d in sorted(self._by_depth) if len(self._by_depth[d]) == 1]

    def node(self, node_id: str) -> TaxNode:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise TaxonomyError("unknown node id", node_id=node_id, detail=node_id) from None

    def has_node(self, node_id: str) -> bool:
        return node_id in self._by_id

    def children(self, node_id: str) -> List[TaxNode]:
        self.node(node_id)
        return list(self._children.get(node_id, []))

    def is_leaf(self, node_id: str) -> bool:
        return not self._children.get(self.node(node_id).id)

    def leaves(self) -> List[TaxNode]:
        return [n for n in self.nodes if n.id not in self._children]

    def nodes_at(self, depth: int) -> List[TaxNode]:
        """All nodes at a depth, sorted by label."""
        return list(self._by_depth.get(depth, []))

    def labels_at(self, depth: int) -> List[str]:
        return [n.label for n in self._by_depth.get(depth, [])]

    def level_name(self, depth: int) -> str:
        return self.levels[depth - 1]

    def ancestor_at(self, node_id: str, depth: int) -> TaxNode:
        """The node's ancestor (or itself) at a given depth."""
        node = self.node(node_id)
        if depth > node.depth or depth < 1:
            raise TaxonomyError(f"node has no ancestor at depth {depth}", node_id=node_id)
        while node.depth > depth:
            node = self._by_id[node.parent]  # type: ignore[index]
        return node

    def to_graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        for n in self.nodes:
            graph.add_node(n.id, label=n.label, depth=n.depth)
            if n.parent is not None:
                graph.add_edge(n.parent, n.id)
        return graph


def _malformed(detail: str) -> TaxonomyError:
    return TaxonomyError("malformed taxonomy document", detail=detail)


def load_taxonomy(source: Union[str, bytes, Mapping[str, Any]]) -> TaxonomyTree:
    """Parse and validate a taxonomy document.

    Args:
        source: JSON text or an already-decoded mapping with keys
            ``name``, ``levels`` and ``nodes``.

    Raises:
        TaxonomyError: malformed document, duplicate id, orphan node, cycle,
            root count other than one, depth gap, duplicate sibling label, or a
            node deeper than the declared levels.
    """
    if isinstance(source, (str, bytes)):
        try:
            document = json.loads(source)
        except json.JSONDecodeError as e:
            raise _malformed(str(e)) from e
    else:
        document = source

    if not isinstance(document, Mapping):
        raise _malformed("top level must be an object")
    for key in ("name", "levels", "nodes"):
        if key not in document:
            raise _malformed(f"missing key {key!r}")
    name, levels, raw_nodes = document["name"], document["levels"], document["nodes"]
    if not isinstance(name, str) or not name:
        raise _malformed("name must be a non-empty string")
    if not isinstance(levels, list) or not levels or not all(isinstance(x, str) for x in levels):
        raise _malformed("levels must be a non-empty list of strings")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise _malformed("nodes must be a non-empty list")

    nodes: List[TaxNode] = []
    seen: Dict[str, TaxNode] = {}
    for i, raw in enumerate(raw_nodes):
        try:
            node = TaxNode.model_validate(raw)
        except ValidationError as e:
            raise _malformed(f"node #{i}: {e.errors()[0]['msg']}") from e
        if node.id in seen:
            raise TaxonomyError("duplicate node id", node_id=node.id, detail=node.id)
        seen[node.id] = node
        nodes.append(node)

    for node in nodes:
        if node.parent is not None and node.parent not in seen:
            raise TaxonomyError("orphan node: parent does not exist", node_id=node.id, detail=f"{node.id} -> {node.parent}")

    graph = nx.DiGraph()
    graph.add_nodes_from(seen)
    graph.add_edges_from((n.parent, n.id) for n in nodes if n.parent is not None)
    try:
        cycle = nx.find_cycle(graph)
    except nx.NetworkXNoCycle:
        cycle = None
    if cycle:
        members = " -> ".join(edge[0] for edge in cycle)
        raise TaxonomyError("cycle detected", node_id=cycle[0][0], detail=members)

    roots = [n for n in nodes if n.parent is None]
    if len(roots) != 1:
        raise TaxonomyError(f"expected exactly one root, found {len(roots)}", detail=", ".join(r.id for r in roots))
    root = roots[0]
    if not nx.is_arborescence(graph):
        raise TaxonomyError("nodes are not all reachable from the root", node_id=root.id)

    if root.depth != 1:
        raise TaxonomyError("depth gap: root depth must be 1", node_id=root.id, detail=f"depth {root.depth}")
    for node in nodes:
        if node.parent is not None and node.depth != seen[node.parent].depth + 1:
            raise TaxonomyError(
                "depth gap",
                node_id=node.id,
                detail=f"{node.id} at depth {node.depth} under parent at depth {seen[node.parent].depth}",
            )
        if node.depth > len(levels):
            raise TaxonomyError(f"node deeper than the {len(levels)} declared levels", node_id=node.id)

    sibling_labels: Dict[Optional[str], set[str]] = defaultdict(set)
    for node in nodes:
        if node.label in sibling_labels[node.parent]:
            raise TaxonomyError("duplicate sibling label", node_id=node.id, detail=node.label)
        sibling_labels[node.parent].add(node.label)

    tree = TaxonomyTree(name=name, levels=list(levels), nodes=nodes, root=root.id)
    logger.debug("Loaded taxonomy %s: %d nodes, %d levels", name, len(nodes), len(levels))
    return tree


def serialize_taxonomy(tree: TaxonomyTree) -> Dict[str, Any]:
    return {
        "name": tree.name,
        "levels": list(tree.levels),
        "nodes": [n.model_dump() for n in tree.nodes],
    }


def load_taxonomy_file(path: str | Path) -> TaxonomyTree:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise TaxonomyError(f"cannot read taxonomy {path}", detail=str(e)) from e
    return load_taxonomy(text)


def save_taxonomy(tree: TaxonomyTree, path: str | Path) -> None:
    Path(path).write_text(json.dumps(serialize_taxonomy(tree), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def path_for_leaf(tree: TaxonomyTree, leaf: str) -> TaxPath:
    """Root-to-leaf path for a leaf node."""
    node = tree.node(leaf)
    if not tree.is_leaf(leaf):
        raise TaxonomyError("node is not a leaf", node_id=leaf, detail=leaf)
    chain = [node]
    while chain[-1].parent is not None:
        chain.append(tree.node(chain[-1].parent))
    chain.reverse()
    return TaxPath(node_ids=[n.id for n in chain], labels=[n.label for n in chain])


def siblings_at(tree: TaxonomyTree, node: str) -> List[TaxNode]:
    """Nodes sharing the node's parent, itself included, sorted by label."""
    current = tree.node(node)
    if current.parent is None:
        return [current]
    return tree.children(current.parent)
