"""Core record types for the kinship dataset pipeline.

Everything downstream (manifest construction, pair generation, training,
evaluation) speaks in terms of these records. They serialize to JSON Lines,
one record per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator


class RaceLabel(str, Enum):
    AFRICAN = "African"
    ASIAN = "Asian"
    CAUCASIAN = "Caucasian"
    INDIAN = "Indian"


RACES: tuple[RaceLabel, ...] = tuple(RaceLabel)
RACE_INDEX: dict[RaceLabel, int] = {race: i for i, race in enumerate(RACES)}


class KinType(str, Enum):
    FS = "FS"
    FD = "FD"
    MS = "MS"
    MD = "MD"


class RecordError(ValueError):
    """Raised when a record violates its invariants."""


@dataclass(frozen=True)
class IdentityRecord:
    """One person: stable id, family grouping, race, and image references."""

    identity_id: str
    family_id: str
    race: RaceLabel
    images: tuple[str, ...]
    source_dataset: str

    def __post_init__(self) -> None:
        if not self.images:
            raise RecordError(f"identity {self.identity_id!r} has no images")
        if len(set(self.images)) != len(self.images):
            raise RecordError(f"identity {self.identity_id!r} has duplicate images")

    def with_images(self, images: Iterable[str]) -> "IdentityRecord":
        return replace(self, images=tuple(images))

    def to_dict(self) -> dict:
        return {
            "identity_id": self.identity_id,
            "family_id": self.family_id,
            "race": self.race.value,
            "images": list(self.images),
            "source_dataset": self.source_dataset,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IdentityRecord":
        return cls(
            identity_id=data["identity_id"],
            family_id=data["family_id"],
            race=RaceLabel(data["race"]),
            images=tuple(data["images"]),
            source_dataset=data["source_dataset"],
        )


@dataclass(frozen=True)
class KinEdge:
    """A tagged parent-child relation inside one family.

    Relations are taken from source annotations as explicit
    (parent_id, child_id, kin_type) edges; nothing is inferred.
    """

    parent_id: str
    child_id: str
    kin_type: KinType

    def to_dict(self) -> dict:
        return {
            "parent_id": self.parent_id,
            "child_id": self.child_id,
            "kin_type": self.kin_type.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KinEdge":
        return cls(
            parent_id=data["parent_id"],
            child_id=data["child_id"],
            kin_type=KinType(data["kin_type"]),
        )


@dataclass(frozen=True)
class PairSample:
    """An (anchor, other) image pair, kin or non-kin.

    Invariants: kin pairs are same-family and same-race with one of the four
    kin types; non-kin pairs are cross-family.
    """

    img_a: str
    img_b: str
    family_a: str
    family_b: str
    race_a: RaceLabel
    race_b: RaceLabel
    kin_type: KinType | None
    is_kin: bool

    def __post_init__(self) -> None:
        if self.is_kin:
            if self.family_a != self.family_b:
                raise RecordError("kin pair spans two families")
            if self.race_a != self.race_b:
                raise RecordError("kin pair spans two races")
            if self.kin_type is None:
                raise RecordError("kin pair is missing its kin type")
        else:
            if self.family_a == self.family_b:
                raise RecordError("non-kin pair drawn from a single family")

    def to_dict(self) -> dict:
        return {
            "img_a": self.img_a,
            "img_b": self.img_b,
            "family_a": self.family_a,
            "family_b": self.family_b,
            "race_a": self.race_a.value,
            "race_b": self.race_b.value,
            "kin_type": self.kin_type.value if self.kin_type is not None else None,
            "is_kin": self.is_kin,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PairSample":
        kin_type = data["kin_type"]
        return cls(
            img_a=data["img_a"],
            img_b=data["img_b"],
            family_a=data["family_a"],
            family_b=data["family_b"],
            race_a=RaceLabel(data["race_a"]),
            race_b=RaceLabel(data["race_b"]),
            kin_type=KinType(kin_type) if kin_type is not None else None,
            is_kin=bool(data["is_kin"]),
        )


@dataclass(frozen=True)
class SourceRow:
    """One identity row of a per-dataset input table.

    Carries either three annotator race votes or a pre-resolved race, plus
    the kin edges this identity participates in as a parent.
    """

    identity_id: str
    family_id: str
    images: tuple[str, ...]
    annotator_votes: tuple[RaceLabel, RaceLabel, RaceLabel] | None = None
    race: RaceLabel | None = None
    kin_edges: tuple[KinEdge, ...] = ()
    source_dataset: str | None = None

    def __post_init__(self) -> None:
        if self.annotator_votes is None and self.race is None:
            raise RecordError(
                f"identity {self.identity_id!r} has neither votes nor a resolved race"
            )

    def to_dict(self) -> dict:
        data: dict = {
            "identity_id": self.identity_id,
            "family_id": self.family_id,
            "images": list(self.images),
            "kin_edges": [e.to_dict() for e in self.kin_edges],
        }
        if self.annotator_votes is not None:
            data["annotator_votes"] = [v.value for v in self.annotator_votes]
        if self.race is not None:
            data["race"] = self.race.value
        if self.source_dataset is not None:
            data["source_dataset"] = self.source_dataset
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SourceRow":
        votes = data.get("annotator_votes")
        race = data.get("race")
        return cls(
            identity_id=data["identity_id"],
            family_id=data["family_id"],
            images=tuple(data["images"]),
            annotator_votes=tuple(RaceLabel(v) for v in votes) if votes else None,
            race=RaceLabel(race) if race else None,
            kin_edges=tuple(KinEdge.from_dict(e) for e in data.get("kin_edges", [])),
            source_dataset=data.get("source_dataset"),
        )


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")
