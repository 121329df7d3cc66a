import warnings

import pytest

from kinfair.manifest import build_split_manifest, merge_sources
from kinfair.records import RaceLabel, SourceRow
from kinfair.synth import ImageStore, SynthConfig, make_population


def population_rows(pop):
    """Source-table rows for a generated population (edges on parent rows)."""
    edges_by_parent = {}
    for edge in pop.kin_edges:
        edges_by_parent.setdefault(edge.parent_id, []).append(edge)
    return [
        SourceRow(
            identity_id=rec.identity_id,
            family_id=rec.family_id,
            images=rec.images,
            race=rec.race,
            kin_edges=tuple(edges_by_parent.get(rec.identity_id, ())),
        )
        for rec in pop.records
    ]


TINY_SYNTH = dict(
    families_per_race={
        RaceLabel.AFRICAN: 3,
        RaceLabel.ASIAN: 3,
        RaceLabel.CAUCASIAN: 6,
        RaceLabel.INDIAN: 3,
    },
    members_per_family=4,
    images_per_member=2,
    seed=7,
)


@pytest.fixture(scope="session")
def tiny_population():
    return make_population(SynthConfig(**TINY_SYNTH))


@pytest.fixture(scope="session")
def tiny_manifest(tiny_population):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        merged = merge_sources({"synth": population_rows(tiny_population)})
        split = build_split_manifest(merged, ratios=(0.5, 0.25, 0.25), seed=3)
    return merged, split


@pytest.fixture(scope="session")
def tiny_store(tiny_population):
    return ImageStore(tiny_population.images)
