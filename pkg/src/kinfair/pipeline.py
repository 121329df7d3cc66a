"""Pipeline orchestration: synth -> manifest -> train -> eval -> report.

Each stage writes its outputs plus a state file holding content hashes of
its config, inputs, and outputs. A completed stage with unchanged hashes is
skipped on rerun unless forced; a corrupted or missing artifact re-runs the
stage that owns it. All stage randomness is derived from the single global
seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import metrics
from .manifest import (
    build_split_manifest,
    load_source_dir,
    merge_sources,
    read_manifest_dir,
    write_manifest_dir,
)
from .model import ModelConfig
from .records import PairSample
from .seeding import derive_seed
from .synth import ImageStore, SynthConfig, make_population, save_population
from .trainer import (
    TrainConfig,
    TrainData,
    load_checkpoint,
    read_train_log,
    train,
)

STAGES = ("synth", "manifest", "train", "eval", "report")

EXIT_CODES = {
    "config": 2,
    "synth": 10,
    "manifest": 11,
    "train": 12,
    "eval": 13,
    "report": 14,
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage
        self.exit_code = EXIT_CODES.get(stage, 1)


def _strict_fields(cls, data: Mapping[str, Any], section: str) -> dict:
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(
            f"unknown keys in section {section!r}: {sorted(unknown)}"
        )
    return dict(data)


@dataclass(frozen=True)
class ManifestStageConfig:
    # heavier val/test shares than the usual 0.7/0.15/0.15 keep per-race
    # accuracy estimates stable on desk-scale populations
    ratios: tuple[float, float, float] = (0.4, 0.25, 0.35)
    cap: int = 30
    neg_per_pos: int = 1
    balance_tolerance: float = 0.05

    def to_dict(self) -> dict:
        return {
            "ratios": list(self.ratios),
            "cap": self.cap,
            "neg_per_pos": self.neg_per_pos,
            "balance_tolerance": self.balance_tolerance,
        }


@dataclass(frozen=True)
class EvalStageConfig:
    angle_families_per_race: int = 20
    export_per_race: int = 400

    def to_dict(self) -> dict:
        return {
            "angle_families_per_race": self.angle_families_per_race,
            "export_per_race": self.export_per_race,
        }


@dataclass(frozen=True)
class RunConfig:
    """Whole-pipeline configuration; every section validates up front and
    unknown keys anywhere are errors."""

    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    manifest: ManifestStageConfig = field(default_factory=ManifestStageConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalStageConfig = field(default_factory=EvalStageConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "synth": self.synth.to_dict(),
            "manifest": self.manifest.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        data = _strict_fields(cls, data, "run")
        try:
            synth = SynthConfig.from_dict(
                _strict_fields(SynthConfig, data.get("synth", {}), "synth")
            )
            manifest_data = _strict_fields(
                ManifestStageConfig, data.get("manifest", {}), "manifest"
            )
            if "ratios" in manifest_data:
                manifest_data["ratios"] = tuple(manifest_data["ratios"])
            manifest = ManifestStageConfig(**manifest_data)
            model = ModelConfig.from_dict(
                _strict_fields(ModelConfig, data.get("model", {}), "model")
            )
            train_cfg = TrainConfig(
                **_strict_fields(TrainConfig, data.get("train", {}), "train")
            )
            eval_cfg = EvalStageConfig(
                **_strict_fields(EvalStageConfig, data.get("eval", {}), "eval")
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(
            seed=int(data.get("seed", 0)),
            synth=synth,
            manifest=manifest,
            model=model,
            train=train_cfg,
            eval=eval_cfg,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


STATE_FILE = "stage_state.json"

# every pipeline input file is owned by exactly one producing stage
_PRODUCER = {
    "synth/images.npy": "synth",
    "synth/manifest.jsonl": "synth",
    "synth/synth_meta.json": "synth",
    "manifest/manifest.jsonl": "manifest",
    "manifest/kin_edges.jsonl": "manifest",
    "manifest/splits.json": "manifest",
    "manifest/pairs_train.jsonl": "manifest",
    "manifest/pairs_val.jsonl": "manifest",
    "manifest/pairs_test.jsonl": "manifest",
    "manifest/distribution.csv": "manifest",
    "manifest/manifest_meta.json": "manifest",
    "train/checkpoint_final.npz": "train",
    "train/train_log.jsonl": "train",
}


@dataclass
class StageSummary:
    stage: str
    status: str  # ran | skipped
    outputs: list[str]

    def to_dict(self) -> dict:
        return {"stage": self.stage, "status": self.status, "outputs": self.outputs}


class _Stage:
    def __init__(
        self,
        name: str,
        inputs: Sequence[str],
        outputs: Sequence[str],
        run: Callable[[], None],
        config_payload: dict,
    ):
        self.name = name
        self.inputs = list(inputs)
        self.outputs = list(outputs)
        self.run = run
        self.config_payload = config_payload


def _check_inputs(root: Path, stage: _Stage) -> dict[str, str]:
    hashes = {}
    for rel in stage.inputs:
        path = root / rel
        if not path.exists():
            producer = _PRODUCER.get(rel, "?")
            raise StageError(
                stage.name,
                f"missing upstream artifact {rel}; run stage {producer!r} first",
            )
        hashes[rel] = _sha256(path)
    return hashes


def _can_skip(root: Path, stage: _Stage, input_hashes: dict[str, str]) -> bool:
    state_path = root / stage.name / STATE_FILE
    if not state_path.exists():
        return False
    try:
        state = json.loads(state_path.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    if state.get("config_hash") != _config_hash(stage.config_payload):
        return False
    if state.get("inputs") != input_hashes:
        return False
    outputs = state.get("outputs", {})
    if set(outputs) != set(stage.outputs):
        return False
    for rel, expected in outputs.items():
        path = root / rel
        if not path.exists() or _sha256(path) != expected:
            return False
    return True


def _write_state(root: Path, stage: _Stage, input_hashes: dict[str, str]) -> None:
    outputs = {}
    for rel in stage.outputs:
        path = root / rel
        if not path.exists():
            raise StageError(stage.name, f"did not produce declared output {rel}")
        outputs[rel] = _sha256(path)
    state = {
        "stage": stage.name,
        "config_hash": _config_hash(stage.config_payload),
        "inputs": input_hashes,
        "outputs": outputs,
    }
    (root / stage.name).mkdir(parents=True, exist_ok=True)
    (root / stage.name / STATE_FILE).write_text(json.dumps(state, indent=2, sort_keys=True))


def _build_stages(config: RunConfig, root: Path) -> list[_Stage]:
    synth_cfg = replace(config.synth, seed=derive_seed(config.seed, "synth"))
    manifest_seed = derive_seed(config.seed, "manifest")
    train_cfg = replace(config.train, seed=derive_seed(config.seed, "train"))

    def run_synth() -> None:
        population = make_population(synth_cfg)
        save_population(population, root / "synth")

    def run_manifest() -> None:
        sources = load_source_dir(root / "synth")
        merged = merge_sources(sources, cap=config.manifest.cap, seed=manifest_seed)
        split = build_split_manifest(
            merged,
            ratios=config.manifest.ratios,
            seed=manifest_seed,
            neg_per_pos=config.manifest.neg_per_pos,
            balance_tolerance=config.manifest.balance_tolerance,
        )
        write_manifest_dir(
            root / "manifest", merged, split, images_path="../synth/images.npy"
        )

    def run_train() -> None:
        data = load_train_data(root / "manifest")
        train(config.model, train_cfg, data, out_dir=root / "train")

    def run_eval() -> None:
        evaluate_checkpoint(
            checkpoint=root / "train" / "checkpoint_final.npz",
            manifest_dir=root / "manifest",
            out_dir=root / "eval",
            angle_families_per_race=config.eval.angle_families_per_race,
            seed=derive_seed(config.seed, "eval"),
        )

    def run_report() -> None:
        out = root / "report"
        out.mkdir(parents=True, exist_ok=True)
        log = read_train_log(root / "train" / "train_log.jsonl")
        metrics.write_std_csv(metrics.std_trajectory(log), out / "std_curve.csv")
        export_pair_embeddings(
            checkpoint=root / "train" / "checkpoint_final.npz",
            manifest_dir=root / "manifest",
            out_file=out / "emb.tsv",
            per_race=config.eval.export_per_race,
            seed=derive_seed(config.seed, "report"),
        )

    manifest_outputs = [
        "manifest/manifest.jsonl",
        "manifest/kin_edges.jsonl",
        "manifest/splits.json",
        "manifest/pairs_train.jsonl",
        "manifest/pairs_val.jsonl",
        "manifest/pairs_test.jsonl",
        "manifest/distribution.csv",
        "manifest/manifest_meta.json",
    ]
    return [
        _Stage(
            "synth",
            inputs=[],
            outputs=["synth/images.npy", "synth/manifest.jsonl", "synth/synth_meta.json"],
            run=run_synth,
            config_payload={"seed": config.seed, "synth": config.synth.to_dict()},
        ),
        _Stage(
            "manifest",
            inputs=["synth/manifest.jsonl"],
            outputs=manifest_outputs,
            run=run_manifest,
            config_payload={"seed": config.seed, "manifest": config.manifest.to_dict()},
        ),
        _Stage(
            "train",
            inputs=[
                "synth/images.npy",
                "manifest/pairs_train.jsonl",
                "manifest/pairs_val.jsonl",
                "manifest/manifest_meta.json",
            ],
            outputs=["train/checkpoint_final.npz", "train/train_log.jsonl"],
            run=run_train,
            config_payload={
                "seed": config.seed,
                "model": config.model.to_dict(),
                "train": config.train.to_dict(),
            },
        ),
        _Stage(
            "eval",
            inputs=[
                "synth/images.npy",
                "manifest/manifest.jsonl",
                "manifest/pairs_val.jsonl",
                "manifest/pairs_test.jsonl",
                "manifest/manifest_meta.json",
                "train/checkpoint_final.npz",
            ],
            outputs=["eval/report.json", "eval/per_race.csv"],
            run=run_eval,
            config_payload={"seed": config.seed, "eval": config.eval.to_dict()},
        ),
        _Stage(
            "report",
            inputs=[
                "synth/images.npy",
                "manifest/pairs_test.jsonl",
                "manifest/manifest_meta.json",
                "train/train_log.jsonl",
                "train/checkpoint_final.npz",
            ],
            outputs=["report/std_curve.csv", "report/emb.tsv"],
            run=run_report,
            config_payload={"seed": config.seed, "eval": config.eval.to_dict()},
        ),
    ]


def run_pipeline(
    config: RunConfig,
    out_root: str | Path,
    stages: Sequence[str] | None = None,
    force: bool = False,
) -> list[StageSummary]:
    """Run the selected stages in dependency order; returns one summary each."""
    selected = list(stages) if stages is not None else list(STAGES)
    unknown = set(selected) - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stages: {sorted(unknown)}")

    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.effective.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True)
    )

    summaries = []
    for stage in _build_stages(config, root):
        if stage.name not in selected:
            continue
        input_hashes = _check_inputs(root, stage)
        if not force and _can_skip(root, stage, input_hashes):
            summaries.append(StageSummary(stage.name, "skipped", stage.outputs))
            continue
        try:
            stage.run()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage.name, str(exc)) from exc
        _write_state(root, stage, input_hashes)
        summaries.append(StageSummary(stage.name, "ran", stage.outputs))
    return summaries


# --- pieces shared with the standalone CLI subcommands -----------------------


def load_train_data(manifest_dir: str | Path) -> TrainData:
    bundle = read_manifest_dir(manifest_dir)
    store = _store_for(manifest_dir, bundle["meta"])
    return TrainData(
        train_pairs=bundle["pairs"]["train"],
        val_pairs=bundle["pairs"]["val"],
        store=store,
    )


def _store_for(manifest_dir: str | Path, meta: dict, images: str | Path | None = None) -> ImageStore:
    path = Path(images) if images else None
    if path is None:
        rel = meta.get("images_path")
        if rel is None:
            raise ConfigError(
                f"manifest {manifest_dir} does not record an image store; pass --images"
            )
        path = (Path(manifest_dir) / rel).resolve()
    return ImageStore.load(path)


def evaluate_checkpoint(
    checkpoint: str | Path,
    manifest_dir: str | Path,
    out_dir: str | Path,
    images: str | Path | None = None,
    angle_families_per_race: int = 20,
    seed: int = 0,
) -> dict:
    """Embed val/test images, pick the threshold on val, report on test.

    Writes report.json (fairness report plus intra/inter angle statistics)
    and per_race.csv; returns the report dictionary.
    """
    bundle = read_manifest_dir(manifest_dir)
    store = _store_for(manifest_dir, bundle["meta"], images)
    model = load_checkpoint(checkpoint)

    val_pairs: list[PairSample] = bundle["pairs"]["val"]
    test_pairs: list[PairSample] = bundle["pairs"]["test"]
    refs = sorted(
        {p.img_a for p in val_pairs + test_pairs}
        | {p.img_b for p in val_pairs + test_pairs}
    )
    embeddings = dict(zip(refs, model.embed(store.batch(refs))))

    threshold = metrics.select_threshold(val_pairs, embeddings)
    report = metrics.per_race_accuracy(test_pairs, embeddings, threshold)

    test_families = {p.family_a for p in test_pairs} | {p.family_b for p in test_pairs}
    test_records = [r for r in bundle["records"] if r.family_id in test_families]
    angle_refs = sorted({ref for rec in test_records for ref in rec.images})
    angle_embeddings = dict(zip(angle_refs, model.embed(store.batch(angle_refs))))
    families = metrics.sample_families(test_records, per_race=angle_families_per_race, seed=seed)
    angles = metrics.intra_inter_angles(families, angle_embeddings)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["angles"] = angles.to_dict()
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    report.write_csv(out / "per_race.csv")
    return payload


def export_pair_embeddings(
    checkpoint: str | Path,
    manifest_dir: str | Path,
    out_file: str | Path,
    images: str | Path | None = None,
    per_race: int = 400,
    seed: int = 0,
    split: str = "test",
) -> int:
    bundle = read_manifest_dir(manifest_dir)
    store = _store_for(manifest_dir, bundle["meta"], images)
    model = load_checkpoint(checkpoint)
    pairs: list[PairSample] = bundle["pairs"][split]
    refs = sorted({p.img_a for p in pairs})
    embeddings = dict(zip(refs, model.embed(store.batch(refs))))
    return metrics.export_embeddings(
        pairs, embeddings, out_file, per_race=per_race, seed=seed
    )
