"""Dataset manifest construction.

Builds a race-labeled kinship manifest from heterogeneous source tables:
three-annotator race consensus, per-identity image capping, mixed-race
family exclusion from positives, family-disjoint splitting with per-race
stratification, and kin/non-kin pair generation.
"""

from __future__ import annotations

import csv
import json
import random
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .records import (
    IdentityRecord,
    KinEdge,
    PairSample,
    RaceLabel,
    RACES,
    SourceRow,
    read_jsonl,
    write_jsonl,
)
from .seeding import derive_seed

DEFAULT_IMAGE_CAP = 30
SPLIT_NAMES = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised for invalid manifest inputs (bad votes, id collisions, ...)."""


def consensus_race(votes: Sequence[RaceLabel]) -> RaceLabel | None:
    """Resolve three annotator votes to a race, or None when all disagree.

    Majority rule: two or three matching votes win; three distinct votes
    reject the identity. Exactly three votes are required.
    """
    if len(votes) != 3:
        raise ManifestError(f"expected exactly 3 votes, got {len(votes)}")
    for vote in votes:
        if not isinstance(vote, RaceLabel):
            raise ManifestError(f"vote {vote!r} is not a RaceLabel")
    counts = Counter(votes)
    race, count = counts.most_common(1)[0]
    return race if count >= 2 else None


def cap_identity_images(
    rec: IdentityRecord, cap: int = DEFAULT_IMAGE_CAP, seed: int = 0
) -> IdentityRecord:
    """Cap an identity to at most ``cap`` images by seeded uniform subsampling.

    The subsample preserves the original image order. The per-identity random
    stream is derived from (seed, identity_id), so capping one identity never
    changes another's sample.
    """
    if cap < 1:
        raise ManifestError(f"cap must be >= 1, got {cap}")
    if len(rec.images) <= cap:
        return rec
    rng = random.Random(derive_seed(seed, f"cap:{rec.identity_id}"))
    keep = sorted(rng.sample(range(len(rec.images)), cap))
    return rec.with_images(rec.images[i] for i in keep)


@dataclass(frozen=True)
class DistributionTable:
    """Per-source x per-race image counts with totals and percentages."""

    counts: Mapping[str, Mapping[RaceLabel, int]]

    def race_total(self, race: RaceLabel) -> int:
        return sum(row.get(race, 0) for row in self.counts.values())

    def source_total(self, source: str) -> int:
        return sum(self.counts[source].values())

    @property
    def grand_total(self) -> int:
        return sum(self.race_total(r) for r in RACES)

    def race_percent(self, race: RaceLabel) -> float:
        total = self.grand_total
        return 100.0 * self.race_total(race) / total if total else 0.0

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([""] + [r.value for r in RACES] + ["sum"])
            for source in sorted(self.counts):
                row = self.counts[source]
                writer.writerow(
                    [source]
                    + [row.get(r, 0) for r in RACES]
                    + [self.source_total(source)]
                )
            writer.writerow(
                ["sum"] + [self.race_total(r) for r in RACES] + [self.grand_total]
            )
            writer.writerow(
                ["percent"]
                + [f"{self.race_percent(r):.2f}%" for r in RACES]
                + ["100%" if self.grand_total else "0%"]
            )


@dataclass(frozen=True)
class MergeResult:
    records: tuple[IdentityRecord, ...]
    kin_edges: tuple[KinEdge, ...]
    distribution: DistributionTable
    rejected_identities: tuple[str, ...]
    mixed_race_families: tuple[str, ...]


def merge_sources(
    sources: Mapping[str, Sequence[SourceRow]],
    cap: int = DEFAULT_IMAGE_CAP,
    seed: int = 0,
) -> MergeResult:
    """Merge per-dataset tables into one manifest.

    Applies the annotator consensus rule (identities with three distinct
    votes are dropped), caps every identity's image list, and removes the kin
    edges of any family whose parent and child races differ (the family then
    contributes no positive pairs; its identities remain available for
    negative sampling). Emits a per-source x per-race image-count table.
    """
    seen: dict[str, str] = {}
    collisions: list[str] = []
    records: list[IdentityRecord] = []
    rejected: list[str] = []
    edges: dict[tuple[str, str], KinEdge] = {}
    counts: dict[str, Counter] = defaultdict(Counter)

    for source_name in sorted(sources):
        for row in sources[source_name]:
            dataset = row.source_dataset or source_name
            if row.identity_id in seen:
                collisions.append(row.identity_id)
                continue
            seen[row.identity_id] = dataset
            if row.race is not None:
                race: RaceLabel | None = row.race
            else:
                assert row.annotator_votes is not None
                race = consensus_race(row.annotator_votes)
            if race is None:
                rejected.append(row.identity_id)
                continue
            rec = IdentityRecord(
                identity_id=row.identity_id,
                family_id=row.family_id,
                race=race,
                images=row.images,
                source_dataset=dataset,
            )
            rec = cap_identity_images(rec, cap=cap, seed=seed)
            records.append(rec)
            counts[dataset][race] += len(rec.images)
            for edge in row.kin_edges:
                edges[(edge.parent_id, edge.child_id)] = edge

    if collisions:
        raise ManifestError(
            "duplicate identity_id across sources: " + ", ".join(sorted(set(collisions)))
        )

    by_id = {rec.identity_id: rec for rec in records}
    kept_edges: list[KinEdge] = []
    mixed_families: set[str] = set()
    for edge in edges.values():
        parent = by_id.get(edge.parent_id)
        child = by_id.get(edge.child_id)
        if parent is None or child is None:
            continue  # endpoint rejected by consensus
        if parent.family_id != child.family_id:
            raise ManifestError(
                f"kin edge {edge.parent_id}->{edge.child_id} crosses families"
            )
        if parent.race != child.race:
            mixed_families.add(parent.family_id)
    for edge in edges.values():
        parent = by_id.get(edge.parent_id)
        child = by_id.get(edge.child_id)
        if parent is None or child is None:
            continue
        if parent.family_id in mixed_families:
            continue
        kept_edges.append(edge)

    kept_edges.sort(key=lambda e: (e.parent_id, e.child_id))
    return MergeResult(
        records=tuple(records),
        kin_edges=tuple(kept_edges),
        distribution=DistributionTable(
            {src: dict(cnt) for src, cnt in counts.items()}
        ),
        rejected_identities=tuple(rejected),
        mixed_race_families=tuple(sorted(mixed_families)),
    )


@dataclass(frozen=True)
class SplitPart:
    family_ids: tuple[str, ...]
    records: tuple[IdentityRecord, ...]
    pairs: tuple[PairSample, ...] = ()


@dataclass(frozen=True)
class SplitManifest:
    parts: Mapping[str, SplitPart]
    seed: int

    def __post_init__(self) -> None:
        families = [set(part.family_ids) for part in self.parts.values()]
        for i in range(len(families)):
            for j in range(i + 1, len(families)):
                overlap = families[i] & families[j]
                if overlap:
                    raise ManifestError(
                        f"splits share families: {sorted(overlap)[:5]}"
                    )

    def part(self, name: str) -> SplitPart:
        return self.parts[name]


def _family_race(members: Sequence[IdentityRecord]) -> RaceLabel:
    # Majority race of the family's members; ties resolved by the fixed race
    # order so the choice is deterministic.
    counts = Counter(m.race for m in members)
    best = max(counts.values())
    for race in RACES:
        if counts.get(race, 0) == best:
            return race
    raise AssertionError("unreachable")


def split_by_family(
    records: Sequence[IdentityRecord],
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    balance_tolerance: float = 0.05,
    strict_balance: bool = False,
) -> SplitManifest:
    """Partition families (never identities) into train/val/test.

    Families are stratified by race and allocated with a carry-over largest
    remainder scheme, which keeps both the global split sizes and each
    split's per-race proportions as close to the ratios as integer counts
    allow. Deterministic for a given seed.
    """
    if len(ratios) != len(SPLIT_NAMES):
        raise ManifestError(f"expected {len(SPLIT_NAMES)} ratios, got {len(ratios)}")
    if any(r <= 0 for r in ratios):
        raise ManifestError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ManifestError(f"ratios must sum to 1, got sum {sum(ratios)!r}")

    families: dict[str, list[IdentityRecord]] = defaultdict(list)
    for rec in records:
        families[rec.family_id].append(rec)
    if len(families) < len(SPLIT_NAMES):
        raise ManifestError(
            f"need at least {len(SPLIT_NAMES)} families, got {len(families)}"
        )

    by_race: dict[RaceLabel, list[str]] = defaultdict(list)
    for family_id in sorted(families):
        by_race[_family_race(families[family_id])].append(family_id)

    rng = random.Random(derive_seed(seed, "split"))
    assignment: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    carry = [0.0] * len(SPLIT_NAMES)
    for race in RACES:
        group = list(by_race.get(race, ()))
        if not group:
            continue
        rng.shuffle(group)
        raw = [ratios[i] * len(group) + carry[i] for i in range(len(SPLIT_NAMES))]
        alloc = [int(r) if r > 0 else 0 for r in raw]
        # largest remainder on the carried targets
        remainders = sorted(
            range(len(SPLIT_NAMES)), key=lambda i: (raw[i] - alloc[i], -i), reverse=True
        )
        short = len(group) - sum(alloc)
        for i in range(short):
            alloc[remainders[i % len(SPLIT_NAMES)]] += 1
        carry = [raw[i] - alloc[i] for i in range(len(SPLIT_NAMES))]
        offset = 0
        for name, take in zip(SPLIT_NAMES, alloc):
            assignment[name].extend(group[offset : offset + take])
            offset += take

    parts: dict[str, SplitPart] = {}
    for name in SPLIT_NAMES:
        fams = tuple(sorted(assignment[name]))
        recs = tuple(
            rec for fam in fams for rec in sorted(families[fam], key=lambda r: r.identity_id)
        )
        parts[name] = SplitPart(family_ids=fams, records=recs)

    _check_balance(records, parts, balance_tolerance, strict_balance)
    return SplitManifest(parts=parts, seed=seed)


def _check_balance(
    records: Sequence[IdentityRecord],
    parts: Mapping[str, SplitPart],
    tolerance: float,
    strict: bool,
) -> None:
    def race_shares(recs: Sequence[IdentityRecord]) -> dict[RaceLabel, float]:
        fams: dict[str, list[IdentityRecord]] = defaultdict(list)
        for rec in recs:
            fams[rec.family_id].append(rec)
        counts = Counter(_family_race(m) for m in fams.values())
        total = sum(counts.values())
        return {r: counts.get(r, 0) / total for r in RACES} if total else {}

    global_shares = race_shares(records)
    for name, part in parts.items():
        if not part.records:
            continue
        shares = race_shares(part.records)
        for race in RACES:
            dev = abs(shares.get(race, 0.0) - global_shares.get(race, 0.0))
            if dev > tolerance:
                message = (
                    f"split {name!r}: race {race.value} share deviates "
                    f"{dev * 100:.1f}pp from global (tolerance {tolerance * 100:.0f}pp)"
                )
                if strict:
                    raise ManifestError(message)
                warnings.warn(message, stacklevel=3)


def generate_pairs(
    part: SplitPart,
    kin_edges: Sequence[KinEdge],
    neg_per_pos: int = 1,
    seed: int = 0,
) -> tuple[PairSample, ...]:
    """Emit all admissible positive pairs plus seeded cross-family negatives.

    Positives are the full image cross products of every kin edge whose
    endpoints both live in this split. Negatives are sampled uniformly (with
    replacement) over cross-family identity pairs at neg_per_pos per
    positive, then one image per identity.
    """
    if not part.records:
        raise ManifestError("cannot generate pairs for an empty split")
    by_id = {rec.identity_id: rec for rec in part.records}

    positives: list[PairSample] = []
    for edge in sorted(kin_edges, key=lambda e: (e.parent_id, e.child_id)):
        parent = by_id.get(edge.parent_id)
        child = by_id.get(edge.child_id)
        if parent is None or child is None:
            continue
        if parent.race != child.race:
            continue  # mixed-race family, excluded from positives
        for img_a in parent.images:
            for img_b in child.images:
                positives.append(
                    PairSample(
                        img_a=img_a,
                        img_b=img_b,
                        family_a=parent.family_id,
                        family_b=child.family_id,
                        race_a=parent.race,
                        race_b=child.race,
                        kin_type=edge.kin_type,
                        is_kin=True,
                    )
                )

    rng = random.Random(derive_seed(seed, "negatives"))
    identities = sorted(by_id)
    negatives: list[PairSample] = []
    n_target = neg_per_pos * len(positives)
    distinct_families = len({rec.family_id for rec in part.records})
    if distinct_families >= 2:
        while len(negatives) < n_target:
            rec_a = by_id[identities[rng.randrange(len(identities))]]
            rec_b = by_id[identities[rng.randrange(len(identities))]]
            if rec_a.family_id == rec_b.family_id:
                continue
            negatives.append(
                PairSample(
                    img_a=rec_a.images[rng.randrange(len(rec_a.images))],
                    img_b=rec_b.images[rng.randrange(len(rec_b.images))],
                    family_a=rec_a.family_id,
                    family_b=rec_b.family_id,
                    race_a=rec_a.race,
                    race_b=rec_b.race,
                    kin_type=None,
                    is_kin=False,
                )
            )
    return tuple(positives + negatives)


def build_split_manifest(
    merged: MergeResult,
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    neg_per_pos: int = 1,
    balance_tolerance: float = 0.05,
) -> SplitManifest:
    """Split a merged dataset by family and generate pairs for every split."""
    split = split_by_family(
        merged.records, ratios=ratios, seed=seed, balance_tolerance=balance_tolerance
    )
    parts = {}
    for name, part in split.parts.items():
        pairs = generate_pairs(
            part,
            merged.kin_edges,
            neg_per_pos=neg_per_pos,
            seed=derive_seed(seed, f"pairs:{name}"),
        )
        parts[name] = SplitPart(
            family_ids=part.family_ids, records=part.records, pairs=pairs
        )
    return SplitManifest(parts=parts, seed=seed)


# --- on-disk layout -------------------------------------------------------

MANIFEST_FILE = "manifest.jsonl"
EDGES_FILE = "kin_edges.jsonl"
SPLITS_FILE = "splits.json"
DISTRIBUTION_FILE = "distribution.csv"
META_FILE = "manifest_meta.json"


def write_manifest_dir(
    out_dir: str | Path,
    merged: MergeResult,
    split: SplitManifest,
    images_path: str | None = None,
    extra_meta: dict | None = None,
) -> list[Path]:
    """Write manifest.jsonl, kin_edges.jsonl, splits.json, per-split pairs,
    distribution.csv, and a meta file locating the image store."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    write_jsonl(out / MANIFEST_FILE, (rec.to_dict() for rec in merged.records))
    written.append(out / MANIFEST_FILE)
    write_jsonl(out / EDGES_FILE, (edge.to_dict() for edge in merged.kin_edges))
    written.append(out / EDGES_FILE)

    splits = {name: list(part.family_ids) for name, part in split.parts.items()}
    (out / SPLITS_FILE).write_text(json.dumps(splits, indent=2, sort_keys=True))
    written.append(out / SPLITS_FILE)

    for name, part in split.parts.items():
        path = out / f"pairs_{name}.jsonl"
        write_jsonl(path, (pair.to_dict() for pair in part.pairs))
        written.append(path)

    merged.distribution.write_csv(out / DISTRIBUTION_FILE)
    written.append(out / DISTRIBUTION_FILE)

    meta = {
        "seed": split.seed,
        "images_path": images_path,
        "rejected_identities": list(merged.rejected_identities),
        "mixed_race_families": list(merged.mixed_race_families),
    }
    meta.update(extra_meta or {})
    (out / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))
    written.append(out / META_FILE)
    return written


def read_manifest_dir(manifest_dir: str | Path) -> dict:
    """Load a manifest directory into records, edges, splits, pairs, meta."""
    d = Path(manifest_dir)
    records = [IdentityRecord.from_dict(row) for row in read_jsonl(d / MANIFEST_FILE)]
    edges = [KinEdge.from_dict(row) for row in read_jsonl(d / EDGES_FILE)]
    splits = json.loads((d / SPLITS_FILE).read_text())
    pairs = {}
    for name in SPLIT_NAMES:
        path = d / f"pairs_{name}.jsonl"
        pairs[name] = (
            [PairSample.from_dict(row) for row in read_jsonl(path)]
            if path.exists()
            else []
        )
    meta = json.loads((d / META_FILE).read_text()) if (d / META_FILE).exists() else {}
    return {
        "records": records,
        "kin_edges": edges,
        "splits": splits,
        "pairs": pairs,
        "meta": meta,
    }


def load_source_dir(sources_dir: str | Path) -> dict[str, list[SourceRow]]:
    """Read every ``*.jsonl`` table in a directory; the stem names the source."""
    sources: dict[str, list[SourceRow]] = {}
    paths = sorted(Path(sources_dir).glob("*.jsonl"))
    if not paths:
        raise ManifestError(f"no .jsonl source tables found in {sources_dir}")
    for path in paths:
        sources[path.stem] = [SourceRow.from_dict(row) for row in read_jsonl(path)]
    return sources
