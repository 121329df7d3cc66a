"""Manifest construction: consensus, capping, merging, splitting, pairing."""

import itertools
import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinfair.manifest import (
    ManifestError,
    build_split_manifest,
    cap_identity_images,
    consensus_race,
    generate_pairs,
    merge_sources,
    split_by_family,
)
from kinfair.records import (
    IdentityRecord,
    KinEdge,
    KinType,
    RaceLabel,
    RACES,
    SourceRow,
)

from conftest import population_rows


def identity(ident, family, race, n_images=2, source="src"):
    return IdentityRecord(
        identity_id=ident,
        family_id=family,
        race=race,
        images=tuple(f"{ident}/img{k}" for k in range(n_images)),
        source_dataset=source,
    )


def row(ident, family, race=None, votes=None, images=None, edges=()):
    return SourceRow(
        identity_id=ident,
        family_id=family,
        images=tuple(images or (f"{ident}/img0", f"{ident}/img1")),
        race=race,
        annotator_votes=votes,
        kin_edges=tuple(edges),
    )


# --- consensus ----------------------------------------------------------------


def test_consensus_two_of_three():
    votes = (RaceLabel.ASIAN, RaceLabel.ASIAN, RaceLabel.CAUCASIAN)
    assert consensus_race(votes) == RaceLabel.ASIAN


def test_consensus_unanimous():
    assert consensus_race((RaceLabel.INDIAN,) * 3) == RaceLabel.INDIAN


def test_consensus_all_distinct_rejects():
    votes = (RaceLabel.AFRICAN, RaceLabel.ASIAN, RaceLabel.INDIAN)
    assert consensus_race(votes) is None


def test_consensus_wrong_vote_count():
    with pytest.raises(ManifestError):
        consensus_race((RaceLabel.ASIAN, RaceLabel.ASIAN))
    with pytest.raises(ManifestError):
        consensus_race((RaceLabel.ASIAN,) * 4)


def test_consensus_matches_brute_force_on_all_64_triples():
    for votes in itertools.product(RACES, repeat=3):
        tally = Counter(votes)  # independent majority counter
        top_race, top_count = tally.most_common(1)[0]
        expected = top_race if top_count >= 2 else None
        assert consensus_race(votes) == expected, votes


# --- capping -------------------------------------------------------------------


def test_cap_reduces_to_cap():
    rec = identity("a", "f1", RaceLabel.ASIAN, n_images=45)
    capped = cap_identity_images(rec, cap=30, seed=1)
    assert len(capped.images) == 30


def test_cap_under_cap_unchanged():
    rec = identity("a", "f1", RaceLabel.ASIAN, n_images=12)
    assert cap_identity_images(rec, cap=30, seed=1) is rec


def test_cap_deterministic():
    rec = identity("a", "f1", RaceLabel.ASIAN, n_images=50)
    assert cap_identity_images(rec, seed=9).images == cap_identity_images(rec, seed=9).images


def test_cap_rejects_zero():
    rec = identity("a", "f1", RaceLabel.ASIAN)
    with pytest.raises(ManifestError):
        cap_identity_images(rec, cap=0)


@settings(max_examples=40, deadline=None)
@given(
    n_images=st.integers(min_value=1, max_value=80),
    cap=st.integers(min_value=1, max_value=40),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_cap_output_is_ordered_subsample(n_images, cap, seed):
    rec = identity("a", "f1", RaceLabel.ASIAN, n_images=n_images)
    capped = cap_identity_images(rec, cap=cap, seed=seed)
    assert len(capped.images) == min(n_images, cap)
    assert set(capped.images) <= set(rec.images)
    positions = [rec.images.index(img) for img in capped.images]
    assert positions == sorted(positions)


# --- merge ---------------------------------------------------------------------


def five_identity_fixture():
    """Four resolvable identities plus one with three distinct votes."""
    return {
        "alpha": [
            row("p1", "famA", votes=(RaceLabel.ASIAN, RaceLabel.ASIAN, RaceLabel.INDIAN),
                edges=[KinEdge("p1", "c1", KinType.FS)]),
            row("c1", "famA", votes=(RaceLabel.ASIAN,) * 3),
            row("p2", "famB", race=RaceLabel.CAUCASIAN,
                edges=[KinEdge("p2", "c2", KinType.MD)]),
            row("c2", "famB", race=RaceLabel.CAUCASIAN),
            row("odd", "famC",
                votes=(RaceLabel.AFRICAN, RaceLabel.ASIAN, RaceLabel.CAUCASIAN)),
        ]
    }


def test_merge_drops_all_disagree_identity():
    merged = merge_sources(five_identity_fixture())
    ids = {rec.identity_id for rec in merged.records}
    assert ids == {"p1", "c1", "p2", "c2"}
    assert merged.rejected_identities == ("odd",)


def test_merge_single_source_size_preserved():
    rows = [row(f"id{i}", f"fam{i//2}", race=RaceLabel.ASIAN) for i in range(8)]
    merged = merge_sources({"only": rows})
    assert len(merged.records) == 8


def test_merge_duplicate_ids_error_lists_collisions():
    sources = {
        "a": [row("dup", "famA", race=RaceLabel.ASIAN)],
        "b": [row("dup", "famB", race=RaceLabel.INDIAN)],
    }
    with pytest.raises(ManifestError, match="dup"):
        merge_sources(sources)


def test_merge_mixed_race_family_loses_edges_keeps_identities():
    sources = {
        "s": [
            row("p", "fam", race=RaceLabel.ASIAN,
                edges=[KinEdge("p", "c", KinType.FS)]),
            row("c", "fam", race=RaceLabel.CAUCASIAN),
        ]
    }
    merged = merge_sources(sources)
    assert len(merged.records) == 2
    assert merged.kin_edges == ()
    assert merged.mixed_race_families == ("fam",)


def test_merge_caps_identities():
    sources = {"s": [row("big", "fam", race=RaceLabel.ASIAN,
                         images=[f"i{k}" for k in range(77)])]}
    merged = merge_sources(sources, cap=30)
    assert len(merged.records[0].images) == 30


def test_merge_idempotent(tiny_population):
    first = merge_sources({"synth": population_rows(tiny_population)})

    def as_rows(result):
        edges_by_parent = {}
        for edge in result.kin_edges:
            edges_by_parent.setdefault(edge.parent_id, []).append(edge)
        return [
            SourceRow(
                identity_id=rec.identity_id,
                family_id=rec.family_id,
                images=rec.images,
                race=rec.race,
                kin_edges=tuple(edges_by_parent.get(rec.identity_id, ())),
                source_dataset=rec.source_dataset,
            )
            for rec in result.records
        ]

    second = merge_sources({"ignored": as_rows(first)})
    assert second.records == first.records
    assert second.kin_edges == first.kin_edges
    assert second.distribution.counts == first.distribution.counts


# --- distribution table ---------------------------------------------------------

# a reference eight-source corpus whose per-race image counts reproduce the
# published distribution this pipeline is calibrated against
REFERENCE_COUNTS = {
    "corpus-a": (8, 56, 72, 3),
    "corpus-b": (18, 192, 173, 0),
    "corpus-c": (19, 327, 172, 4),
    "corpus-d": (55, 96, 788, 35),
    "corpus-e": (5554, 6540, 82820, 25374),
    "corpus-f": (8353, 3841, 59028, 681),
    "corpus-g": (2087, 1398, 30147, 0),
    "corpus-h": (1231, 799, 9665, 97),
}
RACE_TOTALS = (17325, 13249, 182865, 26194)
RACE_PERCENTS = (7.23, 5.53, 76.31, 10.93)


def test_distribution_replays_reference_counts():
    sources = {}
    for source, counts in REFERENCE_COUNTS.items():
        rows = []
        for race, total in zip(RACES, counts):
            remaining = total
            idx = 0
            while remaining > 0:
                take = min(30, remaining)
                ident = f"{source}-{race.value}-{idx}"
                rows.append(
                    row(ident, f"fam-{ident}", race=race,
                        images=[f"{ident}/i{k}" for k in range(take)])
                )
                remaining -= take
                idx += 1
        sources[source] = rows
    merged = merge_sources(sources, cap=30)
    table = merged.distribution
    for source, counts in REFERENCE_COUNTS.items():
        for race, expected in zip(RACES, counts):
            assert table.counts[source].get(race, 0) == expected
        assert table.source_total(source) == sum(counts)
    for race, total, percent in zip(RACES, RACE_TOTALS, RACE_PERCENTS):
        assert table.race_total(race) == total
        assert table.race_percent(race) == pytest.approx(percent, abs=0.005)
    assert table.grand_total == 239633


def test_distribution_csv_layout(tmp_path, tiny_population):
    merged = merge_sources({"synth": population_rows(tiny_population)})
    path = tmp_path / "distribution.csv"
    merged.distribution.write_csv(path)
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header == ["", "African", "Asian", "Caucasian", "Indian", "sum"]
    assert lines[-1].startswith("percent")
    assert lines[-2].startswith("sum")


# --- split -----------------------------------------------------------------------


def synthetic_families(per_race, members=2, images=2):
    records = []
    counter = 0
    for race, n in per_race.items():
        for _ in range(n):
            family = f"fam{counter:04d}"
            for m in range(members):
                records.append(
                    identity(f"{family}.m{m}", family, race, n_images=images)
                )
            counter += 1
    return records


def test_split_families_disjoint_and_counts():
    records = synthetic_families({RaceLabel.ASIAN: 100})
    split = split_by_family(records, ratios=(0.7, 0.15, 0.15), seed=0)
    sizes = {name: len(part.family_ids) for name, part in split.parts.items()}
    assert abs(sizes["train"] - 70) <= 1
    assert abs(sizes["val"] - 15) <= 1
    assert abs(sizes["test"] - 15) <= 1
    all_fams = [f for part in split.parts.values() for f in part.family_ids]
    assert len(all_fams) == len(set(all_fams)) == 100


def test_split_stratification_within_tolerance():
    per_race = {
        RaceLabel.AFRICAN: 40,
        RaceLabel.ASIAN: 40,
        RaceLabel.CAUCASIAN: 280,
        RaceLabel.INDIAN: 40,
    }
    records = synthetic_families(per_race)
    split = split_by_family(
        records, ratios=(0.7, 0.15, 0.15), seed=5, strict_balance=True
    )
    total = sum(per_race.values())
    for name, part in split.parts.items():
        races = Counter()
        seen = set()
        for rec in part.records:
            if rec.family_id not in seen:
                seen.add(rec.family_id)
                races[rec.race] += 1
        for race, n_global in per_race.items():
            share = races.get(race, 0) / len(seen)
            global_share = n_global / total
            assert abs(share - global_share) <= 0.05, (name, race)


def test_split_deterministic_and_seed_sensitive():
    records = synthetic_families({RaceLabel.ASIAN: 30, RaceLabel.INDIAN: 12})
    one = split_by_family(records, seed=11)
    two = split_by_family(records, seed=11)
    other = split_by_family(records, seed=12)
    assert {n: p.family_ids for n, p in one.parts.items()} == {
        n: p.family_ids for n, p in two.parts.items()
    }
    assert {n: p.family_ids for n, p in one.parts.items()} != {
        n: p.family_ids for n, p in other.parts.items()
    }


def test_split_too_few_families():
    records = synthetic_families({RaceLabel.ASIAN: 2})
    with pytest.raises(ManifestError):
        split_by_family(records)


def test_split_bad_ratios():
    records = synthetic_families({RaceLabel.ASIAN: 10})
    with pytest.raises(ManifestError):
        split_by_family(records, ratios=(0.5, 0.5, 0.5))
    with pytest.raises(ManifestError):
        split_by_family(records, ratios=(1.0, 0.0, 0.0))


# --- pair generation ---------------------------------------------------------------


def father_son_part():
    father = identity("f", "famX", RaceLabel.ASIAN, n_images=2)
    son = identity("s", "famX", RaceLabel.ASIAN, n_images=2)
    other = identity("o", "famY", RaceLabel.INDIAN, n_images=2)
    from kinfair.manifest import SplitPart

    return SplitPart(
        family_ids=("famX", "famY"), records=(father, son, other), pairs=()
    )


def test_generate_pairs_image_cross_product():
    part = father_son_part()
    edges = [KinEdge("f", "s", KinType.FS)]
    pairs = generate_pairs(part, edges, neg_per_pos=0, seed=0)
    positives = [p for p in pairs if p.is_kin]
    assert len(positives) == 4  # 2 father images x 2 son images
    assert {p.kin_type for p in positives} == {KinType.FS}
    assert {(p.img_a, p.img_b) for p in positives} == {
        (a, b) for a in ("f/img0", "f/img1") for b in ("s/img0", "s/img1")
    }


def test_generate_pairs_positive_invariants(tiny_manifest):
    merged, split = tiny_manifest
    for part in split.parts.values():
        for pair in part.pairs:
            if pair.is_kin:
                assert pair.family_a == pair.family_b
                assert pair.race_a == pair.race_b
                assert pair.kin_type is not None
            else:
                assert pair.family_a != pair.family_b


def test_generate_pairs_negative_ratio(tiny_manifest):
    merged, split = tiny_manifest
    for part in split.parts.values():
        n_pos = sum(1 for p in part.pairs if p.is_kin)
        n_neg = sum(1 for p in part.pairs if not p.is_kin)
        assert n_neg == n_pos  # neg_per_pos = 1


def test_generate_pairs_counts_match_bruteforce_enumeration():
    """Independent enumerator over a 3-family fixture."""
    fams = {
        "famA": {"p": ("pa", RaceLabel.ASIAN, 3), "c": ("ca", RaceLabel.ASIAN, 2)},
        "famB": {"p": ("pb", RaceLabel.INDIAN, 2), "c": ("cb", RaceLabel.INDIAN, 2)},
        "famC": {"p": ("pc", RaceLabel.ASIAN, 1), "c": ("cc", RaceLabel.ASIAN, 4)},
    }
    records = []
    edges = []
    for fam, members in fams.items():
        pid, race, n_p = members["p"]
        cid, _, n_c = members["c"]
        records.append(identity(pid, fam, race, n_images=n_p))
        records.append(identity(cid, fam, race, n_images=n_c))
        edges.append(KinEdge(pid, cid, KinType.MS))
    from kinfair.manifest import SplitPart

    part = SplitPart(family_ids=tuple(fams), records=tuple(records), pairs=())
    pairs = generate_pairs(part, edges, neg_per_pos=2, seed=4)

    expected_pos = sum(
        members["p"][2] * members["c"][2] for members in fams.values()
    )
    positives = [p for p in pairs if p.is_kin]
    assert len(positives) == expected_pos
    assert len(pairs) == expected_pos * 3  # plus neg_per_pos = 2 negatives each


def test_generate_pairs_family_without_edges_contributes_no_positives():
    father = identity("f", "famX", RaceLabel.ASIAN)
    loner = identity("l", "famZ", RaceLabel.ASIAN)
    from kinfair.manifest import SplitPart

    part = SplitPart(family_ids=("famX", "famZ"), records=(father, loner), pairs=())
    pairs = generate_pairs(part, [], neg_per_pos=1, seed=0)
    assert [p for p in pairs if p.is_kin] == []


# --- whole-manifest invariants -------------------------------------------------------


def test_no_identity_exceeds_cap(tiny_manifest):
    merged, _ = tiny_manifest
    assert all(len(rec.images) <= 30 for rec in merged.records)


def test_split_manifest_roundtrip(tmp_path, tiny_manifest):
    from kinfair.manifest import read_manifest_dir, write_manifest_dir

    merged, split = tiny_manifest
    write_manifest_dir(tmp_path, merged, split, images_path="images.npy")
    bundle = read_manifest_dir(tmp_path)
    assert bundle["records"] == list(merged.records)
    assert bundle["kin_edges"] == list(merged.kin_edges)
    for name, part in split.parts.items():
        assert bundle["pairs"][name] == list(part.pairs)
        assert bundle["splits"][name] == list(part.family_ids)
    assert bundle["meta"]["images_path"] == "images.npy"


def test_build_split_manifest_deterministic(tiny_population):
    rows = population_rows(tiny_population)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        merged = merge_sources({"synth": rows})
        one = build_split_manifest(merged, seed=21, ratios=(0.5, 0.25, 0.25))
        two = build_split_manifest(merged, seed=21, ratios=(0.5, 0.25, 0.25))
    for name in one.parts:
        assert one.parts[name].pairs == two.parts[name].pairs
        assert one.parts[name].family_ids == two.parts[name].family_ids
