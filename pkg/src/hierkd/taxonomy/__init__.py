"""Taxonomy trees: loading, validation, queries and synthetic generation."""

from hierkd.taxonomy.synthetic import synthetic_taxonomy
from hierkd.taxonomy.tree import (
    TaxonomyTree,
    load_taxonomy,
    load_taxonomy_file,
    path_for_leaf,
    save_taxonomy,
    serialize_taxonomy,
    siblings_at,
)

__all__ = [
    "TaxonomyTree",
    "load_taxonomy",
    "load_taxonomy_file",
    "path_for_leaf",
    "save_taxonomy",
    "serialize_taxonomy",
    "siblings_at",
    "synthetic_taxonomy",
]
