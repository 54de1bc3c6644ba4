"""Shared fixtures: the toy animal taxonomy, a hand-built golden instance and synthetic ladders."""

from pathlib import Path
from typing import List

import pytest

from hierkd.core.models import LevelQuestion, SamplerPolicy, TaxPath, VqaInstance
from hierkd.processing.instances import generate_instances
from hierkd.processing.prompting import render_question
from hierkd.taxonomy.synthetic import synthetic_taxonomy
from hierkd.taxonomy.tree import TaxonomyTree, load_taxonomy, load_taxonomy_file

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def toy_tree() -> TaxonomyTree:
    return load_taxonomy_file(FIXTURES / "taxonomies" / "valid.json")


@pytest.fixture
def bird_fish_doc() -> dict:
    return {
        "name": "bird-fish",
        "levels": ["phylum", "class", "species"],
        "nodes": [
            {"id": "animal", "label": "animal", "depth": 1, "parent": None},
            {"id": "bird", "label": "bird", "depth": 2, "parent": "animal"},
            {"id": "fish", "label": "fish", "depth": 2, "parent": "animal"},
            {"id": "sparrow", "label": "sparrow", "depth": 3, "parent": "bird"},
            {"id": "crow", "label": "crow", "depth": 3, "parent": "bird"},
            {"id": "carp", "label": "carp", "depth": 3, "parent": "fish"},
        ],
    }


@pytest.fixture
def bird_fish_tree(bird_fish_doc: dict) -> TaxonomyTree:
    return load_taxonomy(bird_fish_doc)


def make_question(level: int, name: str, options: List[str], gold: str) -> LevelQuestion:
    return LevelQuestion(
        level_index=level,
        level_name=name,
        question_text=render_question(name),
        options=options,
        gold_letter=gold,
    )


@pytest.fixture
def golden_instance() -> VqaInstance:
    """Passer domesticus, kingdom skipped: gold letters B A C."""
    return VqaInstance(
        instance_id="golden-0001",
        image_ref="images/passer_domesticus_0001.jpg",
        gold_path=TaxPath(
            node_ids=["animalia", "aves", "passeriformes", "passer_domesticus"],
            labels=["Animalia", "Aves", "Passeriformes", "Passer domesticus"],
        ),
        per_level=[
            make_question(1, "class", ["Mammalia", "Aves", "Reptilia", "Amphibia"], "B"),
            make_question(2, "order", ["Passeriformes", "Anseriformes", "Falconiformes", "Strigiformes"], "A"),
            make_question(3, "species", ["Corvus corax", "Pica pica", "Passer domesticus", "Turdus merula"], "C"),
        ],
        levels_asked=[2, 3, 4],
    )


@pytest.fixture(scope="session")
def six_level_tree() -> TaxonomyTree:
    # singleton root plus six asked levels of 4/8/16/32/64/128 labels
    return synthetic_taxonomy([4, 2, 2, 2, 2, 2], name="six")


@pytest.fixture(scope="session")
def six_level_instances(six_level_tree: TaxonomyTree) -> List[VqaInstance]:
    return generate_instances(six_level_tree, 200, SamplerPolicy.SIBLING, seed=7, skip_singleton_levels=True)
