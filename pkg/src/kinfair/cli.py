"""Command-line entry point.

Subcommands cover each pipeline stage plus an end-to-end runner. Logs go to
stderr; files land under the chosen output directories; the pipeline prints
a machine-readable stage summary as JSON on stdout.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from .manifest import (
    ManifestError,
    build_split_manifest,
    load_source_dir,
    merge_sources,
    write_manifest_dir,
)
from .pipeline import (
    ConfigError,
    EXIT_CODES,
    RunConfig,
    StageError,
    STAGES,
    evaluate_checkpoint,
    export_pair_embeddings,
    load_train_data,
    run_pipeline,
)
from .seeding import derive_seed
from .synth import SynthConfig, make_population, save_population
from .trainer import TrainConfig, read_train_log, train, TrainerError
from . import metrics

log = logging.getLogger("kinfair")


def _fail(code: int, message: str) -> None:
    log.error(message)
    sys.exit(code)


@click.group()
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON run config (per-stage sections).")
@click.option("--force", is_flag=True, help="Re-run stages even when up to date.")
@click.pass_context
def main(ctx: click.Context, seed: int | None, config_path: str | None, force: bool) -> None:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["config_path"] = config_path
    ctx.obj["force"] = force


def _load_run_config(ctx: click.Context) -> RunConfig:
    path = ctx.obj.get("config_path")
    try:
        config = RunConfig.from_file(path) if path else RunConfig.from_dict({})
        if ctx.obj.get("seed") is not None:
            config = RunConfig.from_dict({**config.to_dict(), "seed": ctx.obj["seed"]})
        return config
    except (ConfigError, ValueError) as exc:
        _fail(EXIT_CODES["config"], f"bad config: {exc}")
        raise AssertionError  # unreachable


@main.command()
@click.option("--config", "synth_config", type=click.Path(exists=True), default=None,
              help="JSON file of synthesis settings.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def synth(ctx: click.Context, synth_config: str | None, out_dir: str) -> None:
    """Generate a synthetic population: images.npy plus a source table."""
    try:
        cfg = (
            SynthConfig.from_dict(json.loads(Path(synth_config).read_text()))
            if synth_config
            else SynthConfig()
        )
        if ctx.obj.get("seed") is not None:
            cfg = SynthConfig.from_dict({**cfg.to_dict(), "seed": ctx.obj["seed"]})
        population = make_population(cfg)
        paths = save_population(population, out_dir)
    except (ValueError, OSError) as exc:
        _fail(EXIT_CODES["synth"], f"synth failed: {exc}")
        return
    log.info("wrote %s", ", ".join(str(p) for p in paths))


@main.command("build-manifest")
@click.option("--sources", "sources_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ratios", default="0.7,0.15,0.15", show_default=True,
              help="train,val,test family ratios.")
@click.option("--cap", type=int, default=30, show_default=True)
@click.option("--neg-per-pos", type=int, default=1, show_default=True)
@click.option("--images", "images_path", type=click.Path(), default=None,
              help="Image store recorded into the manifest meta.")
@click.pass_context
def build_manifest(
    ctx: click.Context,
    sources_dir: str,
    out_dir: str,
    seed: int,
    ratios: str,
    cap: int,
    neg_per_pos: int,
    images_path: str | None,
) -> None:
    """Merge source tables, split by family, and generate kin/non-kin pairs."""
    if ctx.obj.get("seed") is not None:
        seed = ctx.obj["seed"]
    try:
        parts = tuple(float(r) for r in ratios.split(","))
        sources = load_source_dir(sources_dir)
        merged = merge_sources(sources, cap=cap, seed=seed)
        split = build_split_manifest(
            merged, ratios=parts, seed=seed, neg_per_pos=neg_per_pos
        )
        if images_path is None:
            candidate = Path(sources_dir) / "images.npy"
            if candidate.exists():
                images_path = os.path.relpath(candidate, out_dir)
        written = write_manifest_dir(out_dir, merged, split, images_path=images_path)
    except (ManifestError, ValueError, OSError) as exc:
        _fail(EXIT_CODES["manifest"], f"build-manifest failed: {exc}")
        return
    log.info("wrote %s", ", ".join(str(p) for p in written))


@main.command("train")
@click.option("--manifest", "manifest_dir", type=click.Path(exists=True), required=True)
@click.option("--mode", type=click.Choice(["multi_task", "adversarial"]), default=None)
@click.option("--config", "train_config", type=click.Path(exists=True), default=None,
              help='JSON with "model" and "train" sections.')
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def train_cmd(
    ctx: click.Context,
    manifest_dir: str,
    mode: str | None,
    train_config: str | None,
    out_dir: str,
) -> None:
    """Train a model on a built manifest."""
    try:
        raw = json.loads(Path(train_config).read_text()) if train_config else {}
        unknown = set(raw) - {"model", "train", "seed"}
        if unknown:
            raise ConfigError(f"unknown keys in train config: {sorted(unknown)}")
        config = RunConfig.from_dict(raw)
        train_cfg = config.train
        if mode is not None:
            train_cfg = TrainConfig(**{**train_cfg.to_dict(), "mode": mode})
        if ctx.obj.get("seed") is not None:
            train_cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": ctx.obj["seed"]})
        data = load_train_data(manifest_dir)
        result = train(config.model, train_cfg, data, out_dir=out_dir)
    except (ConfigError, TrainerError, ValueError, OSError) as exc:
        _fail(EXIT_CODES["train"], f"train failed: {exc}")
        return
    log.info(
        "trained %d iterations; best val macro %.2f, best val std %.4f",
        result.log[-1].iteration if result.log else 0,
        result.best_val_macro,
        result.best_val_std,
    )


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--manifest", "manifest_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--images", type=click.Path(exists=True), default=None,
              help="Image store override when the manifest meta lacks one.")
@click.pass_context
def eval_cmd(
    ctx: click.Context, checkpoint: str, manifest_dir: str, out_dir: str, images: str | None
) -> None:
    """Evaluate a checkpoint: threshold on val, fairness report on test."""
    seed = ctx.obj.get("seed") or 0
    try:
        payload = evaluate_checkpoint(
            checkpoint, manifest_dir, out_dir, images=images,
            seed=derive_seed(seed, "eval"),
        )
    except (ConfigError, ValueError, OSError, TrainerError) as exc:
        _fail(EXIT_CODES["eval"], f"eval failed: {exc}")
        return
    log.info(
        "macro %.2f%%, std %.4f at threshold %.4f",
        payload["macro_avg"], payload["std"], payload["threshold"],
    )


@main.command("report")
@click.option("--log", "log_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def report_cmd(log_path: str, out_path: str) -> None:
    """Extract the validation-std trajectory from a training log as CSV."""
    try:
        records = read_train_log(log_path)
        metrics.write_std_csv(metrics.std_trajectory(records), out_path)
    except (ValueError, OSError) as exc:
        _fail(EXIT_CODES["report"], f"report failed: {exc}")
        return
    log.info("wrote %s", out_path)


@main.command("export-emb")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--manifest", "manifest_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--per-race", type=int, default=400, show_default=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test",
              show_default=True)
@click.option("--images", type=click.Path(exists=True), default=None)
@click.pass_context
def export_emb(
    ctx: click.Context,
    checkpoint: str,
    manifest_dir: str,
    out_path: str,
    per_race: int,
    split: str,
    images: str | None,
) -> None:
    """Export per-pair anchor embeddings as TSV for external projection."""
    seed = ctx.obj.get("seed") or 0
    try:
        rows = export_pair_embeddings(
            checkpoint, manifest_dir, out_path, images=images,
            per_race=per_race, seed=derive_seed(seed, "report"), split=split,
        )
    except (ConfigError, ValueError, OSError, TrainerError) as exc:
        _fail(EXIT_CODES["report"], f"export-emb failed: {exc}")
        return
    log.info("wrote %d rows to %s", rows, out_path)


@main.command("pipeline")
@click.option("--out", "out_root", type=click.Path(), default=None,
              help="Output root (or KINFAIR_OUT_ROOT).")
@click.option("--stages", default=None,
              help=f"Comma-separated subset of {','.join(STAGES)}.")
@click.pass_context
def pipeline_cmd(ctx: click.Context, out_root: str | None, stages: str | None) -> None:
    """Run the full pipeline: synth, manifest, train, eval, report."""
    config = _load_run_config(ctx)
    out_root = out_root or os.environ.get("KINFAIR_OUT_ROOT")
    if out_root is None:
        _fail(EXIT_CODES["config"], "no output root: pass --out or set KINFAIR_OUT_ROOT")
        return
    selected = stages.split(",") if stages else None
    try:
        summaries = run_pipeline(
            config, out_root, stages=selected, force=ctx.obj.get("force", False)
        )
    except ConfigError as exc:
        _fail(EXIT_CODES["config"], str(exc))
        return
    except StageError as exc:
        _fail(exc.exit_code, str(exc))
        return
    click.echo(json.dumps([s.to_dict() for s in summaries], sort_keys=True))


if __name__ == "__main__":
    main()
