"""Verification accuracy and fairness evaluation.

Per-race verification accuracy at a single swept threshold, the cross-race
standard deviation that serves as the fairness headline, intra/inter-class
embedding angles, training-curve extraction, embedding export, and a linear
race probe for measuring residual race information in embeddings.
"""

from __future__ import annotations

import csv
import json
import random
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .losses import cosine
from .records import IdentityRecord, PairSample, RACES, RaceLabel
from .seeding import derive_seed


class MetricsError(ValueError):
    pass


def pair_similarities(
    pairs: Sequence[PairSample], embeddings: Mapping[str, np.ndarray]
) -> np.ndarray:
    return np.array([cosine(embeddings[p.img_a], embeddings[p.img_b]) for p in pairs])


def _accuracy_at(sims: np.ndarray, is_kin: np.ndarray, threshold: float) -> float:
    predictions = sims > threshold
    return float((predictions == is_kin).mean())


def select_threshold(
    pairs: Sequence[PairSample], embeddings: Mapping[str, np.ndarray]
) -> float:
    """Cosine threshold maximizing overall accuracy on the given pairs.

    Sweeps the midpoints between consecutive sorted similarity values plus
    the two boundary candidates; a pair counts as kin when its similarity is
    strictly above the threshold. Ties go to the lowest threshold.
    """
    if not pairs:
        raise MetricsError("cannot select a threshold without pairs")
    is_kin = np.array([p.is_kin for p in pairs])
    if is_kin.all() or not is_kin.any():
        raise MetricsError("threshold selection needs both kin and non-kin pairs")
    sims = pair_similarities(pairs, embeddings)
    values = np.unique(sims)
    candidates = [-1.0]
    candidates.extend((values[:-1] + values[1:]) / 2.0)
    candidates.append(1.0)
    best_threshold = candidates[0]
    best_accuracy = -1.0
    for threshold in candidates:
        accuracy = _accuracy_at(sims, is_kin, threshold)
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_threshold = threshold
    return float(best_threshold)


def sample_std(values: Sequence[float]) -> float:
    """Sample standard deviation (n-1 denominator) used for cross-race spread."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return 0.0
    return float(arr.std(ddof=1))


@dataclass(frozen=True)
class FairnessReport:
    """Per-race verification accuracy (percent) and its aggregates.

    Negative pairs are attributed to the anchor image's race bucket; that
    convention is recorded in the report itself.
    """

    acc_per_race: dict[RaceLabel, float]
    macro_avg: float
    weighted_avg: float
    std: float
    threshold: float
    n_pairs_per_race: dict[RaceLabel, int]
    negative_attribution: str = "anchor_race"

    def to_dict(self) -> dict:
        return {
            "acc_per_race": {r.value: v for r, v in self.acc_per_race.items()},
            "macro_avg": self.macro_avg,
            "weighted_avg": self.weighted_avg,
            "std": self.std,
            "threshold": self.threshold,
            "n_pairs_per_race": {r.value: v for r, v in self.n_pairs_per_race.items()},
            "negative_attribution": self.negative_attribution,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["race", "accuracy_percent", "n_pairs"])
            for race in RACES:
                if race in self.acc_per_race:
                    writer.writerow(
                        [race.value, f"{self.acc_per_race[race]:.9g}",
                         self.n_pairs_per_race[race]]
                    )
            writer.writerow(["macro_avg", f"{self.macro_avg:.9g}", ""])
            writer.writerow(["weighted_avg", f"{self.weighted_avg:.9g}", ""])
            writer.writerow(["std", f"{self.std:.9g}", ""])


def per_race_accuracy(
    pairs: Sequence[PairSample],
    embeddings: Mapping[str, np.ndarray],
    threshold: float,
) -> FairnessReport:
    """Verification accuracy per race at a fixed threshold, with aggregates.

    Races with no pairs are omitted (with a warning); the std is the sample
    standard deviation over the remaining per-race accuracies.
    """
    if not pairs:
        raise MetricsError("cannot evaluate an empty pair list")
    sims = pair_similarities(pairs, embeddings)
    correct: dict[RaceLabel, int] = defaultdict(int)
    totals: dict[RaceLabel, int] = defaultdict(int)
    for pair, sim in zip(pairs, sims):
        race = pair.race_a  # kin pairs are single-race; negatives follow the anchor
        predicted = sim > threshold
        totals[race] += 1
        if predicted == pair.is_kin:
            correct[race] += 1

    acc: dict[RaceLabel, float] = {}
    for race in RACES:
        if totals.get(race, 0) == 0:
            warnings.warn(f"race {race.value} has no test pairs; omitted from the report")
            continue
        acc[race] = 100.0 * correct[race] / totals[race]

    if not acc:
        raise MetricsError("no race bucket has any pairs")
    values = list(acc.values())
    weights = [totals[race] for race in acc]
    return FairnessReport(
        acc_per_race=acc,
        macro_avg=float(np.mean(values)),
        weighted_avg=float(np.average(values, weights=weights)),
        std=sample_std(values),
        threshold=float(threshold),
        n_pairs_per_race={race: totals[race] for race in acc},
    )


# --- embedding angles -------------------------------------------------------


def angle_degrees(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.degrees(np.arccos(np.clip(cosine(u, v), -1.0, 1.0))))


@dataclass(frozen=True)
class FamilySample:
    family_id: str
    race: RaceLabel
    image_refs: tuple[str, ...]


def sample_families(
    records: Sequence[IdentityRecord], per_race: int = 20, seed: int = 0
) -> list[FamilySample]:
    """Randomly pick up to per_race families of each race, with their images."""
    by_family: dict[str, list[IdentityRecord]] = defaultdict(list)
    for rec in records:
        by_family[rec.family_id].append(rec)
    by_race: dict[RaceLabel, list[str]] = defaultdict(list)
    for family_id in sorted(by_family):
        races = {rec.race for rec in by_family[family_id]}
        if len(races) == 1:
            by_race[races.pop()].append(family_id)
    rng = random.Random(derive_seed(seed, "angle-families"))
    samples: list[FamilySample] = []
    for race in RACES:
        candidates = by_race.get(race, [])
        chosen = candidates if len(candidates) <= per_race else rng.sample(candidates, per_race)
        for family_id in sorted(chosen):
            refs = tuple(
                ref
                for rec in sorted(by_family[family_id], key=lambda r: r.identity_id)
                for ref in rec.images
            )
            samples.append(FamilySample(family_id=family_id, race=race, image_refs=refs))
    return samples


@dataclass(frozen=True)
class AngleReport:
    intra_per_race: dict[RaceLabel, float]
    inter_per_race: dict[RaceLabel, float]
    std_intra: float
    std_inter: float

    def to_dict(self) -> dict:
        return {
            "intra_per_race": {r.value: v for r, v in self.intra_per_race.items()},
            "inter_per_race": {r.value: v for r, v in self.inter_per_race.items()},
            "std_intra": self.std_intra,
            "std_inter": self.std_inter,
        }


def intra_inter_angles(
    families: Sequence[FamilySample], embeddings: Mapping[str, np.ndarray]
) -> AngleReport:
    """Mean pairwise embedding angles within and across families, per race.

    Intra: all image pairs inside one family. Inter: all image pairs across
    two different families of the same race. Families with one embedding
    contribute no intra pairs. Angles in degrees.
    """
    intra: dict[RaceLabel, list[float]] = defaultdict(list)
    inter: dict[RaceLabel, list[float]] = defaultdict(list)
    by_race: dict[RaceLabel, list[FamilySample]] = defaultdict(list)
    for family in families:
        by_race[family.race].append(family)

    for race, group in by_race.items():
        vectors = [
            np.stack([np.asarray(embeddings[ref], dtype=np.float64) for ref in fam.image_refs])
            for fam in group
        ]
        for mat in vectors:
            for i in range(len(mat)):
                for j in range(i + 1, len(mat)):
                    intra[race].append(angle_degrees(mat[i], mat[j]))
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                for u in vectors[a]:
                    for v in vectors[b]:
                        inter[race].append(angle_degrees(u, v))

    intra_mean = {race: float(np.mean(vals)) for race, vals in intra.items() if vals}
    inter_mean = {race: float(np.mean(vals)) for race, vals in inter.items() if vals}
    return AngleReport(
        intra_per_race=intra_mean,
        inter_per_race=inter_mean,
        std_intra=sample_std(list(intra_mean.values())),
        std_inter=sample_std(list(inter_mean.values())),
    )


# --- training-curve extraction ----------------------------------------------


def std_trajectory(log_records: Iterable) -> list[tuple[int, float]]:
    """(iteration, val_std) series from a training log, in iteration order."""
    series = [
        (record.iteration, record.val_std)
        for record in log_records
        if getattr(record, "val_std", None) is not None
    ]
    return sorted(series)


def write_std_csv(series: Sequence[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "val_std"])
        for iteration, std in series:
            writer.writerow([iteration, f"{std:.9g}"])


# --- embedding export --------------------------------------------------------


def export_embeddings(
    pairs: Sequence[PairSample],
    embeddings: Mapping[str, np.ndarray],
    out: str | Path,
    per_race: int = 400,
    seed: int = 0,
) -> int:
    """Write a TSV of anchor embeddings for up to per_race pairs per race.

    Columns: the embedding values at 9 significant digits, then race, then
    the anchor's family id. Returns the number of rows written.
    """
    by_race: dict[RaceLabel, list[PairSample]] = defaultdict(list)
    for pair in pairs:
        by_race[pair.race_a].append(pair)
    rng = random.Random(derive_seed(seed, "export"))
    rows = 0
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for race in RACES:
            group = by_race.get(race, [])
            chosen = group if len(group) <= per_race else rng.sample(group, per_race)
            for pair in chosen:
                vec = np.asarray(embeddings[pair.img_a], dtype=np.float64)
                fields = [f"{v:.9g}" for v in vec]
                fields.append(race.value)
                fields.append(pair.family_a)
                fh.write("\t".join(fields))
                fh.write("\n")
                rows += 1
    return rows


# --- linear race probe -------------------------------------------------------


def fit_linear_probe(
    features: np.ndarray, labels: Sequence[int], n_classes: int = 4, ridge: float = 1e-3
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ridge regression onto one-hot labels; returns (W, b)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.zeros((len(labels), n_classes))
    y[np.arange(len(labels)), np.asarray(labels)] = 1.0
    mean = x.mean(axis=0)
    xc = x - mean
    gram = xc.T @ xc + ridge * np.eye(x.shape[1])
    weights = np.linalg.solve(gram, xc.T @ y)
    bias = y.mean(axis=0) - mean @ weights
    return weights, bias


def probe_accuracy(
    weights: np.ndarray, bias: np.ndarray, features: np.ndarray, labels: Sequence[int]
) -> float:
    scores = np.asarray(features, dtype=np.float64) @ weights + bias
    return float((scores.argmax(axis=1) == np.asarray(labels)).mean())


def race_probe_accuracy(
    train_features: np.ndarray,
    train_labels: Sequence[int],
    test_features: np.ndarray,
    test_labels: Sequence[int],
    ridge: float = 1e-3,
) -> float:
    """Fit a linear race probe on train features, report test accuracy."""
    weights, bias = fit_linear_probe(train_features, train_labels, ridge=ridge)
    return probe_accuracy(weights, bias, test_features, test_labels)
