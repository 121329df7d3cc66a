"""SGD training loop with two modes (multi_task / adversarial), deterministic
batching, JSON Lines logging, and best-accuracy / best-std checkpointing."""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .losses import BiasVector, LossBreakdown
from .model import KinshipModel, ModelConfig, build_model
from .records import PairSample, RACE_INDEX
from .seeding import derive_seed
from .synth import ImageStore

CHECKPOINT_VERSION = 1


class TrainerError(RuntimeError):
    pass


class CheckpointError(TrainerError):
    pass


class TrainingAborted(TrainerError):
    """Raised when a non-finite loss appears; the last good checkpoint stays."""

    def __init__(self, iteration: int, last_good: "Path | None"):
        super().__init__(
            f"non-finite loss at iteration {iteration}; "
            f"last good checkpoint: {last_good}"
        )
        self.iteration = iteration
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 25
    epochs: int = 10
    max_iterations: int | None = None
    tau: float = 0.08
    mode: Literal["multi_task", "adversarial"] = "multi_task"
    grl_lambda: float = 1.0
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise TrainerError("batch_size must be >= 2 (the loss needs negatives)")
        if self.tau <= 0:
            raise TrainerError("tau must be positive")
        if self.eval_every < 1:
            raise TrainerError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "max_iterations": self.max_iterations,
            "tau": self.tau,
            "mode": self.mode,
            "grl_lambda": self.grl_lambda,
            "seed": self.seed,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class TrainLogRecord:
    """One training-log line; validation fields are filled at eval iterations."""

    iteration: int
    l_fairness: float
    l_race: float
    l_total: float
    mean_bias: float
    val_accuracy_per_race: dict[str, float] | None = None
    val_std: float | None = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "l_fairness": self.l_fairness,
            "l_race": self.l_race,
            "l_total": self.l_total,
            "mean_bias": self.mean_bias,
            "val_accuracy_per_race": self.val_accuracy_per_race,
            "val_std": self.val_std,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainLogRecord":
        return cls(**data)


@dataclass
class TrainData:
    """Pairs plus the image store backing their references."""

    train_pairs: Sequence[PairSample]
    val_pairs: Sequence[PairSample]
    store: ImageStore


def fair_pair_loss(
    model: KinshipModel,
    images_a: torch.Tensor,
    images_b: torch.Tensor,
    labels_a: torch.Tensor,
    labels_b: torch.Tensor,
    tau: float,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Training loss for a batch of positive pairs, differentiable end to end.

    Mirrors the numpy reference loss: per-direction bias vectors come from
    the debias layer over each side's fused features, and gradients flow
    through the bias into the debias layer (no stop-gradient).
    """
    n = images_a.shape[0]
    out = model.forward_pair(images_a, images_b)
    f_a, f_b = out.att_a.fused, out.att_b.fused

    eps_a = model.debias.eps_matrix(f_a)
    eps_b = model.debias.eps_matrix(f_b)
    b_a = eps_a.sum(dim=1) / max(n - 1, 1)
    b_b = eps_b.sum(dim=1) / max(n - 1, 1)

    fa = F.normalize(f_a, dim=1, eps=1e-12)
    fb = F.normalize(f_b, dim=1, eps=1e-12)
    cos_xy = fa @ fb.T
    cos_xx = fa @ fa.T
    cos_yy = fb @ fb.T

    l_fair = 0.5 * (
        _direction_loss_torch(cos_xy, cos_xx, b_a, tau)
        + _direction_loss_torch(cos_xy.T, cos_yy, b_b, tau)
    )

    logits = model.race_logits(torch.cat([out.pack_a.e, out.pack_b.e]))
    l_race = F.cross_entropy(logits, torch.cat([labels_a, labels_b]))
    total = l_fair + l_race

    eps_np = eps_a.detach().double().numpy()
    breakdown = LossBreakdown.build(
        l_fairness=float(l_fair.detach()),
        l_race=float(l_race.detach()),
        bias=BiasVector.from_eps(eps_np),
    )
    return total, breakdown


def _direction_loss_torch(
    cos_ab: torch.Tensor, cos_aa: torch.Tensor, b: torch.Tensor, tau: float
) -> torch.Tensor:
    n = cos_ab.shape[0]
    if n < 2:
        raise TrainerError("contrastive loss needs at least 2 pairs in the batch")
    pos = (cos_ab.diagonal() - b) / tau
    neg_mask = ~torch.eye(n, dtype=torch.bool)
    minus_inf = torch.finfo(cos_ab.dtype).min
    within = torch.where(neg_mask, cos_aa / tau, torch.full_like(cos_aa, minus_inf))
    cross = torch.where(neg_mask, cos_ab / tau, torch.full_like(cos_ab, minus_inf))
    all_logits = torch.cat([within, cross, pos[:, None]], dim=1)
    return (torch.logsumexp(all_logits, dim=1) - pos).mean()


@dataclass
class TrainResult:
    model: KinshipModel
    log: list[TrainLogRecord]
    checkpoints: dict[str, Path]
    best_val_macro: float
    best_val_std: float


def _batch_tensors(
    pairs: Sequence[PairSample], store: ImageStore
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    imgs_a = torch.as_tensor(store.batch([p.img_a for p in pairs]), dtype=torch.float32)
    imgs_b = torch.as_tensor(store.batch([p.img_b for p in pairs]), dtype=torch.float32)
    labels_a = torch.tensor([RACE_INDEX[p.race_a] for p in pairs], dtype=torch.long)
    labels_b = torch.tensor([RACE_INDEX[p.race_b] for p in pairs], dtype=torch.long)
    return imgs_a, imgs_b, labels_a, labels_b


def _validate(
    model: KinshipModel, val_pairs: Sequence[PairSample], store: ImageStore
) -> tuple[dict[str, float], float]:
    refs = sorted({p.img_a for p in val_pairs} | {p.img_b for p in val_pairs})
    embeddings = dict(zip(refs, model.embed(store.batch(refs))))
    threshold = metrics.select_threshold(val_pairs, embeddings)
    report = metrics.per_race_accuracy(val_pairs, embeddings, threshold)
    acc = {race.value: value for race, value in report.acc_per_race.items()}
    return acc, report.std


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: TrainData,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run SGD over seeded epoch permutations of the positive training pairs.

    Each batch holds batch_size positive pairs; negatives are formed in-batch
    by cross-pairing. Every eval_every iterations the model is validated and
    the best-accuracy / best-std checkpoints are refreshed. A non-finite loss
    aborts with the last good checkpoint retained on disk.
    """
    positives = [p for p in data.train_pairs if p.is_kin]
    if len(positives) < train_cfg.batch_size:
        raise TrainerError(
            f"need at least {train_cfg.batch_size} positive pairs, "
            f"got {len(positives)}"
        )

    model_cfg = replace(
        model_cfg, mode=train_cfg.mode, grl_lambda=train_cfg.grl_lambda
    )
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)  # bit-for-bit reproducible runs
    try:
        model = build_model(model_cfg, seed=derive_seed(train_cfg.seed, "init"))
        optimizer = torch.optim.SGD(
            model.parameters(),
            lr=train_cfg.lr,
            momentum=train_cfg.momentum,
            weight_decay=train_cfg.weight_decay,
        )
        rng = np.random.default_rng(derive_seed(train_cfg.seed, "batches"))

        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        checkpoints: dict[str, Path] = {}
        log: list[TrainLogRecord] = []
        best_macro = -np.inf
        best_std = np.inf
        last_good: Path | None = None

        batches_per_epoch = len(positives) // train_cfg.batch_size
        total_iters = train_cfg.epochs * batches_per_epoch
        if train_cfg.max_iterations is not None:
            total_iters = min(total_iters, train_cfg.max_iterations)

        def save(name: str) -> Path | None:
            if out is None:
                return None
            path = out / f"checkpoint_{name}.npz"
            save_checkpoint(model, path)
            checkpoints[name] = path
            return path

        iteration = 0
        done = False
        for _ in range(train_cfg.epochs):
            if done:
                break
            order = rng.permutation(len(positives))
            for start in range(0, batches_per_epoch * train_cfg.batch_size, train_cfg.batch_size):
                if iteration >= total_iters:
                    done = True
                    break
                batch = [positives[i] for i in order[start : start + train_cfg.batch_size]]
                imgs_a, imgs_b, labels_a, labels_b = _batch_tensors(batch, data.store)
                model.train()
                total, breakdown = fair_pair_loss(
                    model, imgs_a, imgs_b, labels_a, labels_b, train_cfg.tau
                )
                if not torch.isfinite(total):
                    raise TrainingAborted(iteration, last_good)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                iteration += 1

                record = TrainLogRecord(
                    iteration=iteration,
                    l_fairness=breakdown.l_fairness,
                    l_race=breakdown.l_race,
                    l_total=breakdown.l_total,
                    mean_bias=float(breakdown.bias.b.mean()),
                )
                if iteration % train_cfg.eval_every == 0 or iteration == total_iters:
                    if data.val_pairs:
                        acc, std = _validate(model, data.val_pairs, data.store)
                        record.val_accuracy_per_race = acc
                        record.val_std = std
                        macro = float(np.mean(list(acc.values())))
                        if macro > best_macro:
                            best_macro = macro
                            save("best_acc")
                        if std < best_std:
                            best_std = std
                            save("best_std")
                    last_good = save("latest") or last_good
                log.append(record)

        save("final")
        if out is not None:
            write_train_log(out / "train_log.jsonl", log)
        return TrainResult(
            model=model,
            log=log,
            checkpoints=checkpoints,
            best_val_macro=float(best_macro),
            best_val_std=float(best_std),
        )
    finally:
        torch.set_num_threads(n_threads)


def write_train_log(path: str | Path, log: Sequence[TrainLogRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record.to_dict(), sort_keys=True))
            fh.write("\n")


def read_train_log(path: str | Path) -> list[TrainLogRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(TrainLogRecord.from_dict(json.loads(line)))
    return records


def save_checkpoint(model: KinshipModel, path: str | Path) -> Path:
    """Write a self-describing archive: config, version, named parameters."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        f"param/{name}": tensor.detach().numpy()
        for name, tensor in model.state_dict().items()
    }
    meta = {"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path: str | Path, mode: str | None = None) -> KinshipModel:
    """Restore a model bit-exactly; version mismatches fail loudly.

    ``mode`` overrides the stored training mode (the parameter set is
    mode-independent).
    """
    try:
        with np.load(path) as archive:
            if "__meta__" not in archive:
                raise CheckpointError(f"{path} is not a model checkpoint")
            meta = json.loads(bytes(archive["__meta__"]).decode())
            arrays = {
                key[len("param/") :]: archive[key]
                for key in archive.files
                if key.startswith("param/")
            }
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = meta.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version!r} does not match "
            f"supported version {CHECKPOINT_VERSION}"
        )
    cfg = ModelConfig.from_dict(meta["config"])
    if mode is not None:
        cfg = replace(cfg, mode=mode)
    model = KinshipModel(cfg)
    state = {name: torch.as_tensor(arr) for name, arr in arrays.items()}
    missing = set(model.state_dict()) - set(state)
    unexpected = set(state) - set(model.state_dict())
    if missing or unexpected:
        raise CheckpointError(
            f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
        )
    model.load_state_dict(state)
    return model
