"""Synthetic population generator.

Produces tiny images with separable family, race, and noise factors:

    image = family_signal * F(family) + race_signal * R(race) + noise_sigma * eps

F and R are seeded orthonormal basis patterns over the flattened pixel space,
so how much race information survives in a learned embedding is directly
measurable by linear probing. Family structure is father/mother plus
alternating son/daughter children, giving all four kin-edge types.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .records import IdentityRecord, KinEdge, KinType, RaceLabel, RACES, SourceRow, write_jsonl


class SynthError(ValueError):
    """Raised for invalid synthesis configs."""


DEFAULT_FAMILIES_PER_RACE: dict[RaceLabel, int] = {
    RaceLabel.AFRICAN: 12,
    RaceLabel.ASIAN: 12,
    RaceLabel.CAUCASIAN: 36,
    RaceLabel.INDIAN: 12,
}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for one synthetic population.

    The default family counts are Caucasian-dominant, mimicking the skew of
    real kinship corpora, so fairness effects are observable at desk scale.
    """

    families_per_race: Mapping[RaceLabel, int] = field(
        default_factory=lambda: dict(DEFAULT_FAMILIES_PER_RACE)
    )
    members_per_family: int = 4
    images_per_member: int = 4
    image_size: tuple[int, int] = (16, 16)
    channels: int = 3
    family_signal: float = 0.55
    race_signal: float = 0.35
    noise_sigma: float = 0.04
    seed: int = 0

    def __post_init__(self) -> None:
        if self.channels != 3:
            raise SynthError("only 3-channel images are supported")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise SynthError(f"image size must be at least 8x8, got {h}x{w}")
        if not 0.0 <= self.family_signal <= 1.0 or not 0.0 <= self.race_signal <= 1.0:
            raise SynthError("signal weights must lie in [0, 1]")
        if self.family_signal + self.race_signal > 1.0 + 1e-12:
            raise SynthError("family_signal + race_signal must not exceed 1")
        if self.noise_sigma < 0:
            raise SynthError("noise_sigma must be non-negative")
        if self.members_per_family < 1 or self.images_per_member < 1:
            raise SynthError("members_per_family and images_per_member must be >= 1")
        for race in self.families_per_race:
            if not isinstance(race, RaceLabel):
                raise SynthError(f"unknown race key {race!r}")

    @property
    def n_families(self) -> int:
        return sum(self.families_per_race.get(r, 0) for r in RACES)

    @property
    def n_images(self) -> int:
        return self.n_families * self.members_per_family * self.images_per_member

    def to_dict(self) -> dict:
        return {
            "families_per_race": {r.value: int(n) for r, n in self.families_per_race.items()},
            "members_per_family": self.members_per_family,
            "images_per_member": self.images_per_member,
            "image_size": list(self.image_size),
            "channels": self.channels,
            "family_signal": self.family_signal,
            "race_signal": self.race_signal,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        if "families_per_race" in data:
            data["families_per_race"] = {
                RaceLabel(k): int(v) for k, v in data["families_per_race"].items()
            }
        if "image_size" in data:
            data["image_size"] = tuple(data["image_size"])
        return cls(**data)


# member index -> (role tag, is_parent, sex) with sex "m"/"f"
def _member_role(index: int) -> tuple[str, bool, str]:
    if index == 0:
        return "father", True, "m"
    if index == 1:
        return "mother", True, "f"
    child = index - 2
    sex = "m" if child % 2 == 0 else "f"
    return f"child{child}", False, sex


_KIN_BY_SEXES = {
    ("m", "m"): KinType.FS,
    ("m", "f"): KinType.FD,
    ("f", "m"): KinType.MS,
    ("f", "f"): KinType.MD,
}


@dataclass(frozen=True)
class Population:
    config: SynthConfig
    records: tuple[IdentityRecord, ...]
    kin_edges: tuple[KinEdge, ...]
    images: np.ndarray  # (N, H, W, 3) float32
    race_of_image: tuple[RaceLabel, ...]
    family_of_image: tuple[str, ...]


def image_ref(index: int) -> str:
    return f"img:{index}"


def _pattern_basis(h: int, w: int, channels: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k seeded orthonormal patterns over the flattened pixel space.

    Patterns are random mixtures of low-frequency cosine modes, then
    QR-orthonormalized. Keeping them smooth matters: small conv nets are
    spectrally biased and cannot pick up white-noise directions at desk
    scale, while smooth orthonormal patterns stay fully separable factors.
    """
    max_freq = 2
    while (max_freq + 1) ** 2 * channels < k:
        max_freq += 1
    ys = (np.arange(h)[:, None] + 0.5) / h
    xs = (np.arange(w)[None, :] + 0.5) / w
    modes = np.stack(
        [
            np.cos(np.pi * fy * ys) * np.cos(np.pi * fx * xs)
            for fy in range(max_freq + 1)
            for fx in range(max_freq + 1)
        ]
    )  # (M, h, w)
    columns = np.empty((h * w * channels, k))
    for col in range(k):
        field = np.stack(
            [
                np.tensordot(rng.standard_normal(len(modes)), modes, axes=1)
                for _ in range(channels)
            ],
            axis=-1,
        )
        columns[:, col] = field.reshape(-1)
    basis, _ = np.linalg.qr(columns)
    return basis


def make_population(cfg: SynthConfig) -> Population:
    """Generate a deterministic population for the given config."""
    h, w = cfg.image_size
    dim = h * w * cfg.channels
    n_patterns = 4 + cfg.n_families
    if n_patterns > dim:
        raise SynthError(
            f"{n_patterns} basis patterns do not fit in {dim} pixel dimensions"
        )

    rng = np.random.default_rng(cfg.seed)
    basis = _pattern_basis(h, w, cfg.channels, n_patterns, rng)
    gram = basis.T @ basis
    if not np.allclose(gram, np.eye(n_patterns), atol=1e-8):
        raise SynthError("basis patterns failed the orthogonality check")
    race_patterns = {race: basis[:, i] for i, race in enumerate(RACES)}

    records: list[IdentityRecord] = []
    edges: list[KinEdge] = []
    images: list[np.ndarray] = []
    race_of_image: list[RaceLabel] = []
    family_of_image: list[str] = []

    family_index = 0
    for race in RACES:
        for _ in range(cfg.families_per_race.get(race, 0)):
            family_id = f"fam-{race.value}-{family_index:03d}"
            family_pattern = basis[:, 4 + family_index]
            base = (
                cfg.family_signal * family_pattern
                + cfg.race_signal * race_patterns[race]
            )
            member_ids: list[tuple[str, bool, str]] = []
            for m in range(cfg.members_per_family):
                role, is_parent, sex = _member_role(m)
                identity_id = f"{family_id}.{role}"
                refs = []
                for _ in range(cfg.images_per_member):
                    noise = rng.standard_normal(dim)
                    flat = base + cfg.noise_sigma * noise
                    refs.append(image_ref(len(images)))
                    images.append(flat.reshape(h, w, cfg.channels).astype(np.float32))
                    race_of_image.append(race)
                    family_of_image.append(family_id)
                records.append(
                    IdentityRecord(
                        identity_id=identity_id,
                        family_id=family_id,
                        race=race,
                        images=tuple(refs),
                        source_dataset="synth",
                    )
                )
                member_ids.append((identity_id, is_parent, sex))
            for parent_id, is_parent, parent_sex in member_ids:
                if not is_parent:
                    continue
                for child_id, child_is_parent, child_sex in member_ids:
                    if child_is_parent:
                        continue
                    edges.append(
                        KinEdge(
                            parent_id=parent_id,
                            child_id=child_id,
                            kin_type=_KIN_BY_SEXES[(parent_sex, child_sex)],
                        )
                    )
            family_index += 1

    return Population(
        config=cfg,
        records=tuple(records),
        kin_edges=tuple(edges),
        images=np.stack(images) if images else np.zeros((0, h, w, 3), np.float32),
        race_of_image=tuple(race_of_image),
        family_of_image=tuple(family_of_image),
    )


class ImageStore:
    """Maps ``img:<index>`` references to image arrays backed by one file."""

    def __init__(self, images: np.ndarray):
        self.images = images

    def get(self, ref: str) -> np.ndarray:
        return self.images[self.index_of(ref)]

    @staticmethod
    def index_of(ref: str) -> int:
        if not ref.startswith("img:"):
            raise KeyError(f"not an image-store reference: {ref!r}")
        return int(ref[4:])

    def batch(self, refs: list[str]) -> np.ndarray:
        return self.images[[self.index_of(r) for r in refs]]

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def load(cls, path: str | Path) -> "ImageStore":
        return cls(np.load(path))


IMAGES_FILE = "images.npy"
SOURCE_FILE = "manifest.jsonl"  # a source table consumable by the manifest builder
SYNTH_META_FILE = "synth_meta.json"


def save_population(pop: Population, out_dir: str | Path) -> list[Path]:
    """Write images.npy plus a source table consumable by the manifest builder.

    Kin edges ride on the parent identity's row; children carry none.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / IMAGES_FILE, pop.images)

    edges_by_parent: dict[str, list[KinEdge]] = {}
    for edge in pop.kin_edges:
        edges_by_parent.setdefault(edge.parent_id, []).append(edge)
    rows = []
    for rec in pop.records:
        row = SourceRow(
            identity_id=rec.identity_id,
            family_id=rec.family_id,
            images=rec.images,
            race=rec.race,
            kin_edges=tuple(edges_by_parent.get(rec.identity_id, ())),
            source_dataset=rec.source_dataset,
        )
        rows.append(row.to_dict())
    write_jsonl(out / SOURCE_FILE, rows)
    (out / SYNTH_META_FILE).write_text(
        json.dumps({"config": pop.config.to_dict(), "images_file": IMAGES_FILE},
                   indent=2, sort_keys=True)
    )
    return [out / IMAGES_FILE, out / SOURCE_FILE, out / SYNTH_META_FILE]
