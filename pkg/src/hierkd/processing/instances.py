"""Multiple-choice VQA instance generation, distractor sampling, storage and splits."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from hierkd.core.errors import InstanceError
from hierkd.core.models import LETTERS, LevelQuestion, SamplerPolicy, TaxNode, VqaInstance
from hierkd.processing.prompting import render_question
from hierkd.taxonomy.tree import TaxonomyTree, path_for_leaf

logger = logging.getLogger(__name__)

N_DISTRACTORS = 3


class DistractorSampler(BaseModel):
    """Distractor policy plus the data the file-backed policies need.

    ``weights`` maps a gold label to candidate weights (a confusion row).
    ``choice_sets`` maps ``"<image_ref>|<depth>"`` to released options in A-D order.
    """
    policy: SamplerPolicy = SamplerPolicy.UNIFORM
    weights: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    choice_sets: Dict[str, List[str]] = Field(default_factory=dict)

    @classmethod
    def from_file(cls, policy: SamplerPolicy, path: Union[str, Path]) -> "DistractorSampler":
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(policy=policy, weights=document.get("weights", {}), choice_sets=document.get("choice_sets", {}))
        except (OSError, json.JSONDecodeError, ValidationError) as e:
            raise InstanceError(f"cannot load sampler data from {path}", detail=str(e)) from e

    @staticmethod
    def choice_key(image_ref: str, depth: int) -> str:
        return f"{image_ref}|{depth}"


SamplerLike = Union[SamplerPolicy, str, DistractorSampler]


def _as_sampler(policy: SamplerLike) -> DistractorSampler:
    if isinstance(policy, DistractorSampler):
        return policy
    return DistractorSampler(policy=SamplerPolicy(policy))


def _sibling_position(tree: TaxonomyTree, node: TaxNode) -> int:
    if node.parent is None:
        return 0
    return [n.id for n in tree.children(node.parent)].index(node.id)


def _shuffled(nodes: Sequence[TaxNode], rng: np.random.Generator) -> List[TaxNode]:
    return [nodes[i] for i in rng.permutation(len(nodes))]


def _tiers_by_ancestor(tree: TaxonomyTree, gold: TaxNode, pool: List[TaxNode], rng: np.random.Generator) -> List[TaxNode]:
    """Order candidates by how close their lineage is to the gold node, shuffled within a tier."""
    lineage: Dict[int, str] = {}
    node = gold
    while node.parent is not None:
        node = tree.node(node.parent)
        lineage[node.depth] = node.id

    def shared_depth(candidate: TaxNode) -> int:
        current = candidate
        while current.parent is not None:
            current = tree.node(current.parent)
            if lineage.get(current.depth) == current.id:
                return current.depth
        return 0

    return sorted(_shuffled(pool, rng), key=lambda n: -shared_depth(n))


def _draw(
    tree: TaxonomyTree,
    gold: TaxNode,
    k: int,
    sampler: DistractorSampler,
    rng: np.random.Generator,
    image_ref: Optional[str],
) -> List[str]:
    pool = [n for n in tree.nodes_at(gold.depth) if n.label != gold.label]
    if not pool:
        return []

    if sampler.policy == SamplerPolicy.UNIFORM:
        picks = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
        return [pool[i].label for i in picks]

    if sampler.policy == SamplerPolicy.SIBLING:
        return [n.label for n in _tiers_by_ancestor(tree, gold, pool, rng)[:k]]

    if sampler.policy == SamplerPolicy.COUSIN:
        position = _sibling_position(tree, gold)
        cousins = [n for n in pool if n.parent != gold.parent and _sibling_position(tree, n) == position]
        cousin_ids = {n.id for n in cousins}
        rest = [n for n in pool if n.id not in cousin_ids]
        ordered = _tiers_by_ancestor(tree, gold, cousins, rng) + _shuffled(rest, rng)
        return [n.label for n in ordered[:k]]

    if sampler.policy == SamplerPolicy.WEIGHTED:
        row = sampler.weights.get(gold.label)
        if not row:
            raise InstanceError("no confusion weights for gold label", detail=gold.label)
        labels = [n.label for n in pool if row.get(n.label, 0.0) > 0]
        if not labels:
            raise InstanceError("confusion weights put no mass on same-level labels", detail=gold.label)
        weights = np.array([row[label] for label in labels], dtype=float)
        picks = rng.choice(len(labels), size=min(k, len(labels)), replace=False, p=weights / weights.sum())
        return [labels[i] for i in picks]

    if sampler.policy == SamplerPolicy.REPLAY:
        if image_ref is None:
            raise InstanceError("replay sampling needs an image reference")
        stored = sampler.choice_sets.get(DistractorSampler.choice_key(image_ref, gold.depth))
        if stored is None:
            raise InstanceError("no released choice set", detail=DistractorSampler.choice_key(image_ref, gold.depth))
        if gold.label not in stored:
            raise InstanceError("released choice set does not contain the gold label", detail=gold.label)
        return [label for label in stored if label != gold.label][:k]

    raise InstanceError(f"unsupported sampler policy {sampler.policy}")


def sample_distractors(
    tree: TaxonomyTree,
    gold: str,
    k: int,
    policy: SamplerLike,
    rng_seed: int,
    image_ref: Optional[str] = None,
) -> List[str]:
    """Draw up to ``k`` distinct same-level labels other than the gold one.

    Policies:
        uniform: any same-level label.
        sibling: siblings first, then nodes under the nearest ancestor's other
            subtrees at the same depth.
        cousin: nodes holding the gold node's sibling position under other
            parents, nearest lineage first, then the rest.
        weighted: a confusion row from the sampler's weights.
        replay: the released choice set for (image_ref, depth).

    Raises:
        InstanceError: k < 1, the level has no other label, or the sampler
            lacks data for a file-backed policy.
    """
    if k < 1:
        raise InstanceError("k must be at least 1")
    node = tree.node(gold)
    picks = _draw(tree, node, k, _as_sampler(policy), np.random.default_rng(rng_seed), image_ref)
    if not picks:
        raise InstanceError("level has no non-gold labels", detail=f"depth {node.depth}")
    return picks


def build_instance(
    tree: TaxonomyTree,
    leaf: str,
    image_ref: str,
    sampler: SamplerLike,
    rng_seed: int,
    instance_id: Optional[str] = None,
    skip_singleton_levels: bool = False,
) -> VqaInstance:
    """Build the full question ladder for one image.

    Options at each level are the gold label plus up to three distractors,
    randomly permuted into A-D (replayed sets keep their stored order). Levels
    with too few labels carry fewer options.
    """
    sampler = _as_sampler(sampler)
    path = path_for_leaf(tree, leaf)
    singletons = set(tree.singleton_levels) if skip_singleton_levels else set()
    depths = [d for d in range(1, len(path) + 1) if d not in singletons]
    if not depths:
        raise InstanceError("no levels left to ask", detail=leaf)

    questions: List[LevelQuestion] = []
    for position, depth in enumerate(depths, start=1):
        gold = tree.node(path.node_ids[depth - 1])
        rng = np.random.default_rng([rng_seed, depth])
        distractors = _draw(tree, gold, N_DISTRACTORS, sampler, rng, image_ref)
        if len(distractors) < N_DISTRACTORS:
            logger.debug("depth %d of %s offers only %d distractors", depth, leaf, len(distractors))

        if sampler.policy == SamplerPolicy.REPLAY:
            options = list(sampler.choice_sets[DistractorSampler.choice_key(image_ref, depth)])
        else:
            candidates = [gold.label, *distractors]
            options = [candidates[i] for i in rng.permutation(len(candidates))]
        questions.append(
            LevelQuestion(
                level_index=position,
                level_name=tree.level_name(depth),
                question_text=render_question(tree.level_name(depth)),
                options=options,
                gold_letter=LETTERS[options.index(gold.label)],
            )
        )

    return VqaInstance(
        instance_id=instance_id or f"{leaf}@{image_ref}",
        image_ref=image_ref,
        gold_path=path,
        per_level=questions,
        levels_asked=depths,
    )


def generate_instances(
    tree: TaxonomyTree,
    n: int,
    sampler: SamplerLike,
    seed: int,
    skip_singleton_levels: bool = False,
) -> List[VqaInstance]:
    """Generate n instances over uniformly drawn leaves."""
    if n < 1:
        raise InstanceError("n must be at least 1")
    rng = np.random.default_rng(seed)
    leaves = tree.leaves()
    leaf_picks = rng.integers(len(leaves), size=n)
    instance_seeds = rng.integers(2**31 - 1, size=n)
    return [
        build_instance(
            tree,
            leaves[leaf_picks[i]].id,
            image_ref=f"synthetic://{tree.name}/{i:06d}",
            sampler=sampler,
            rng_seed=int(instance_seeds[i]),
            instance_id=f"{tree.name}-{i:06d}",
            skip_singleton_levels=skip_singleton_levels,
        )
        for i in range(n)
    ]


def split_manifest(
    instance_ids: Sequence[str],
    ratio: Tuple[int, int, int] = (6, 2, 2),
    seed: int = 42,
) -> Dict[str, List[str]]:
    """Disjoint train/val/test split. Val and test are floored, train takes the rest."""
    if any(r < 0 for r in ratio) or sum(ratio) == 0:
        raise InstanceError(f"invalid split ratio {ratio}")
    if len(set(instance_ids)) != len(instance_ids):
        raise InstanceError("instance ids must be unique")
    total = sum(ratio)
    n = len(instance_ids)
    n_val = n * ratio[1] // total
    n_test = n * ratio[2] // total
    order = [instance_ids[i] for i in np.random.default_rng(seed).permutation(n)]
    return {
        "val": sorted(order[:n_val]),
        "test": sorted(order[n_val : n_val + n_test]),
        "train": sorted(order[n_val + n_test :]),
    }


def save_instances(path: Union[str, Path], instances: Iterable[VqaInstance], header: Optional[Mapping[str, Any]] = None) -> int:
    """Write a header line followed by one instance per line. Returns the count."""
    count = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": dict(header or {})}, sort_keys=True) + "\n")
        for instance in instances:
            fh.write(instance.model_dump_json() + "\n")
            count += 1
    return count


def load_instances(path: Union[str, Path]) -> Tuple[Dict[str, Any], List[VqaInstance]]:
    header: Dict[str, Any] = {}
    instances: List[VqaInstance] = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InstanceError(f"cannot read instances {path}", detail=str(e)) from e
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            if lineno == 1 and "header" in record:
                header = record["header"]
                continue
            instances.append(VqaInstance.model_validate(record))
        except (json.JSONDecodeError, ValidationError) as e:
            raise InstanceError(f"{path}:{lineno}: invalid instance record", detail=str(e)) from e
    return header, instances
