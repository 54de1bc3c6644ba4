"""Synthetic world: a taxonomy, per-node feature codes and noisy image features."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from hierkd.config import WorldConfig
from hierkd.core.errors import ConfigError
from hierkd.core.models import LETTERS, VqaInstance
from hierkd.processing.instances import build_instance
from hierkd.taxonomy.synthetic import synthetic_taxonomy
from hierkd.taxonomy.tree import TaxonomyTree, path_for_leaf

logger = logging.getLogger(__name__)


@dataclass
class WorldSplit:
    """Array view of a set of examples.

    options[i, l, k] is the node row shown as letter k at level l;
    gold[i, l] is the gold letter index; gold_nodes[i, l] the gold node row.
    """
    instances: List[VqaInstance]
    features: np.ndarray
    options: np.ndarray
    gold: np.ndarray
    gold_nodes: np.ndarray

    def __len__(self) -> int:
        return len(self.instances)

    def subset(self, rows: np.ndarray) -> "WorldSplit":
        return WorldSplit(
            instances=[self.instances[i] for i in rows],
            features=self.features[rows],
            options=self.options[rows],
            gold=self.gold[rows],
            gold_nodes=self.gold_nodes[rows],
        )


@dataclass
class SyntheticWorld:
    tree: TaxonomyTree
    feature_dim: int
    leaf_means: Dict[str, np.ndarray]
    noise_scale: float
    rng_seed: int
    depths: List[int]
    node_index: Dict[str, int]
    train: WorldSplit
    val: WorldSplit

    @property
    def n_levels(self) -> int:
        return len(self.depths)

    @property
    def n_nodes(self) -> int:
        return len(self.node_index)

    @property
    def n_options(self) -> int:
        return int(self.train.options.shape[2])


def _node_codes(tree: TaxonomyTree, depths: List[int], config: WorldConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    d = config.feature_dim
    coarse = tree.nodes_at(depths[0])
    if len(coarse) > d:
        raise ConfigError(f"feature_dim {d} cannot hold {len(coarse)} orthogonal coarse codes")
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    coarse_basis = basis[:, : len(coarse)]
    codes = {n.id: config.coarse_scale * coarse_basis[:, i] for i, n in enumerate(coarse)}

    # finer codes live outside the coarse subspace
    for depth in depths[1:]:
        for n in tree.nodes_at(depth):
            v = rng.standard_normal(d)
            v -= coarse_basis @ (coarse_basis.T @ v)
            codes[n.id] = config.fine_scale * v / np.linalg.norm(v)
    return codes


def _split(
    tree: TaxonomyTree,
    instances: List[VqaInstance],
    features: np.ndarray,
    node_index: Dict[str, int],
    depths: List[int],
) -> WorldSplit:
    label_to_row = {depth: {n.label: node_index[n.id] for n in tree.nodes_at(depth)} for depth in depths}
    n_opt = max(len(q.options) for inst in instances for q in inst.per_level)
    options = np.zeros((len(instances), len(depths), n_opt), dtype=np.int64)
    gold = np.zeros((len(instances), len(depths)), dtype=np.int64)
    gold_nodes = np.zeros((len(instances), len(depths)), dtype=np.int64)
    for i, inst in enumerate(instances):
        for l, (q, depth) in enumerate(zip(inst.per_level, inst.levels_asked)):
            if len(q.options) != n_opt:
                raise ConfigError("the synthetic world needs the same option count at every level")
            options[i, l] = [label_to_row[depth][label] for label in q.options]
            gold[i, l] = LETTERS.index(q.gold_letter)
            gold_nodes[i, l] = node_index[inst.gold_path.node_ids[depth - 1]]
    return WorldSplit(instances, features, options, gold, gold_nodes)


def build_world(config: WorldConfig, seed: int) -> SyntheticWorld:
    """Generate the tree, node codes and train/val examples.

    Each leaf's mean feature is the sum of the codes of its path below the
    root; an example adds isotropic Gaussian noise. The singleton root is
    never asked.
    """
    rng = np.random.default_rng(seed)
    tree = synthetic_taxonomy(config.branching, name="sekd-world")
    depths = list(range(2, tree.depth + 1))
    node_index = {n.id: i for i, n in enumerate(tree.nodes)}
    codes = _node_codes(tree, depths, config, rng)

    leaves = tree.leaves()
    leaf_means = {}
    for leaf in leaves:
        path = path_for_leaf(tree, leaf.id)
        leaf_means[leaf.id] = np.sum([codes[nid] for nid in path.node_ids[1:]], axis=0)

    n_total = config.n_train + config.n_val
    picks = rng.integers(len(leaves), size=n_total)
    instance_seeds = rng.integers(2**31 - 1, size=n_total)
    noise = rng.normal(scale=config.noise_scale, size=(n_total, config.feature_dim))
    instances = [
        build_instance(
            tree,
            leaves[picks[i]].id,
            image_ref=f"synthetic://sekd-world/{i:05d}",
            sampler=config.sampler,
            rng_seed=int(instance_seeds[i]),
            instance_id=f"sekd-{i:05d}",
            skip_singleton_levels=True,
        )
        for i in range(n_total)
    ]
    features = np.stack([leaf_means[leaves[p].id] for p in picks]) + noise

    train = _split(tree, instances[: config.n_train], features[: config.n_train], node_index, depths)
    val = _split(tree, instances[config.n_train :], features[config.n_train :], node_index, depths)
    logger.info("Built world: %d nodes, %d levels, %d train / %d val", len(node_index), len(depths), len(train), len(val))
    return SyntheticWorld(
        tree=tree,
        feature_dim=config.feature_dim,
        leaf_means=leaf_means,
        noise_scale=config.noise_scale,
        rng_seed=seed,
        depths=depths,
        node_index=node_index,
        train=train,
        val=val,
    )
