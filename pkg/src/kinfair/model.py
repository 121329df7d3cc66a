"""The pair model: backbone, cross-image attention fusion, debias layer,
and a race classifier behind an optional gradient-reversal layer.

Two training modes share identical parameters and forward behavior:
multi_task backpropagates the race branch normally, adversarial reverses
its gradient into the backbone to strip race information from embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cbam import CBAM
from .records import RACES

N_RACES = len(RACES)

Mode = Literal["multi_task", "adversarial"]


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (16, 16)
    backbone_stages: int = 3
    width: int = 64
    cbam_in_backbone: bool = True
    cbam_reduction: int = 8
    grl_lambda: float = 1.0
    race_head_hidden: int = 64
    mode: Mode = "multi_task"
    fusion: Literal["product", "concat"] = "product"
    debias_dim: int | None = None

    def __post_init__(self) -> None:
        if self.backbone_stages < 3:
            raise ModelConfigError("backbone needs at least 3 stages")
        if self.width < 1:
            raise ModelConfigError("width must be positive")
        if self.grl_lambda < 0:
            raise ModelConfigError("grl_lambda must be non-negative")
        if self.mode not in ("multi_task", "adversarial"):
            raise ModelConfigError(f"unknown mode {self.mode!r}")
        if self.fusion not in ("product", "concat"):
            raise ModelConfigError(f"unknown fusion {self.fusion!r}")
        h, w = self.image_size
        if min(h, w) < 8:
            raise ModelConfigError("image size must be at least 8x8")

    @property
    def map_size(self) -> tuple[int, int]:
        h, w = self.image_size
        for _ in range(self.backbone_stages):
            h = (h + 1) // 2
            w = (w + 1) // 2
        return h, w

    @property
    def fused_dim(self) -> int:
        return self.width * (2 if self.fusion == "concat" else 1)

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "backbone_stages": self.backbone_stages,
            "width": self.width,
            "cbam_in_backbone": self.cbam_in_backbone,
            "cbam_reduction": self.cbam_reduction,
            "grl_lambda": self.grl_lambda,
            "race_head_hidden": self.race_head_hidden,
            "mode": self.mode,
            "fusion": self.fusion,
            "debias_dim": self.debias_dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        if "image_size" in data:
            data["image_size"] = tuple(data["image_size"])
        return cls(**data)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, lam: float) -> torch.Tensor:
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return -ctx.lam * grad_output, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity on the forward pass; scales the gradient by -lam backward."""
    if lam < 0:
        raise ModelConfigError("grad_reverse lambda must be non-negative")
    return _GradReverse.apply(x, lam)


@dataclass
class FeaturePack:
    """Backbone outputs for a batch: feature map m (B, H', W', C) and
    embedding e (B, C)."""

    m: torch.Tensor
    e: torch.Tensor


def _norm_groups(channels: int) -> int:
    for groups in (8, 4, 2):
        if channels % groups == 0:
            return groups
    return 1


def _spatial_kernel(map_hw: tuple[int, int]) -> int:
    return 7 if min(map_hw) >= 7 else 3


class Backbone(nn.Module):
    """Stack of stride-2 conv stages emitting (m, e).

    CBAM is inserted after each of the last three stages when enabled. The
    embedding is a linear head over the globally pooled final map. Any
    module producing the same (m, e) contract can stand in for it.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        cbams: list[nn.Module] = []
        h, w = cfg.image_size
        in_ch = 3
        for stage in range(cfg.backbone_stages):
            stages.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, cfg.width, 3, stride=2, padding=1),
                    nn.GroupNorm(_norm_groups(cfg.width), cfg.width),
                    nn.ReLU(inplace=True),
                )
            )
            h, w = (h + 1) // 2, (w + 1) // 2
            wants_cbam = (
                cfg.cbam_in_backbone
                and stage >= cfg.backbone_stages - 3
            )
            cbams.append(
                CBAM(cfg.width, cfg.cbam_reduction, _spatial_kernel((h, w)))
                if wants_cbam
                else nn.Identity()
            )
            in_ch = cfg.width
        self.stages = nn.ModuleList(stages)
        self.stage_cbams = nn.ModuleList(cbams)
        self.head = nn.Linear(cfg.width, cfg.width)

    def forward(self, images: torch.Tensor) -> FeaturePack:
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ModelConfigError(
                f"expected images of shape (B, H, W, 3), got {tuple(images.shape)}"
            )
        if tuple(images.shape[1:3]) != tuple(self.cfg.image_size):
            raise ModelConfigError(
                f"image size {tuple(images.shape[1:3])} does not match "
                f"configured {tuple(self.cfg.image_size)}"
            )
        x = images.permute(0, 3, 1, 2)
        for stage, cbam in zip(self.stages, self.stage_cbams):
            x = cbam(stage(x))
        e = self.head(x.mean(dim=(2, 3)))
        return FeaturePack(m=x.permute(0, 2, 3, 1), e=e)


@dataclass
class AttentionOutputs:
    """Per-image attention products.

    s: pooled channel features; s_proj: the projected pooled features;
    attn: this image's query attention map over the other image's positions
    (rows sum to 1); c: the attended CBAM vector; fused: fuse(e, c).
    """

    s: torch.Tensor
    s_proj: torch.Tensor
    attn: torch.Tensor
    c: torch.Tensor
    fused: torch.Tensor


class AttentionFusion(nn.Module):
    """Cross-image attention over projected feature maps.

    Pipeline per image pair: average-pool each map to channel features,
    project maps and pooled features with a shared 1x1 conv + ReLU, build
    scaled dot-product attention maps in both query directions, and pool
    each image's CBAM-refined map by the attention mass the other image's
    queries place on its positions. The attended vector is fused with the
    backbone embedding elementwise (or by concatenation).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Conv2d(cfg.width, cfg.width, 1)
        self.cbam = CBAM(cfg.width, cfg.cbam_reduction, _spatial_kernel(cfg.map_size))

    def forward(
        self, p1: FeaturePack, p2: FeaturePack
    ) -> tuple[AttentionOutputs, AttentionOutputs]:
        m1 = p1.m.permute(0, 3, 1, 2)
        m2 = p2.m.permute(0, 3, 1, 2)
        b, c = m1.shape[0], m1.shape[1]

        s1 = m1.mean(dim=(2, 3))
        s2 = m2.mean(dim=(2, 3))
        s1_proj = F.relu(self.proj(s1[:, :, None, None])).reshape(b, c)
        s2_proj = F.relu(self.proj(s2[:, :, None, None])).reshape(b, c)

        g1 = F.relu(self.proj(m1)).flatten(2).transpose(1, 2)  # (B, N, C)
        g2 = F.relu(self.proj(m2)).flatten(2).transpose(1, 2)
        logits = g1 @ g2.transpose(1, 2) / math.sqrt(c)
        a12 = torch.softmax(logits, dim=-1)
        a21 = torch.softmax(logits.transpose(1, 2), dim=-1)

        cb1 = self.cbam(m1).flatten(2).transpose(1, 2)  # (B, N, C)
        cb2 = self.cbam(m2).flatten(2).transpose(1, 2)
        w1 = a21.mean(dim=1)  # attention mass received by image 1's positions
        w2 = a12.mean(dim=1)
        c1 = (w1[:, :, None] * cb1).sum(dim=1)
        c2 = (w2[:, :, None] * cb2).sum(dim=1)

        fused1 = self._fuse(p1.e, c1)
        fused2 = self._fuse(p2.e, c2)
        out1 = AttentionOutputs(s=s1, s_proj=s1_proj, attn=a12, c=c1, fused=fused1)
        out2 = AttentionOutputs(s=s2, s_proj=s2_proj, attn=a21, c=c2, fused=fused2)
        return out1, out2

    def _fuse(self, e: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if self.cfg.fusion == "product":
            return e * c
        return torch.cat([e, c], dim=1)


class DebiasLayer(nn.Module):
    """Shared affine map M; one application per identity and per midpoint."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)

    def forward(
        self, f_i: torch.Tensor, f_j: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        f_m = 0.5 * (f_i + f_j)
        return self.linear(f_i), self.linear(f_j), self.linear(f_m)

    def eps_matrix(self, features: torch.Tensor) -> torch.Tensor:
        """Pairwise bias estimates for a batch of fused features (B, D)."""
        n = features.shape[0]
        mapped = self.linear(features)
        midpoints = 0.5 * (features[:, None, :] + features[None, :, :])
        m_mid = self.linear(midpoints)  # (B, B, D)
        cos_i = F.cosine_similarity(m_mid, mapped[:, None, :], dim=-1, eps=1e-12)
        cos_j = F.cosine_similarity(m_mid, mapped[None, :, :], dim=-1, eps=1e-12)
        eps = cos_i**2 - cos_j**2
        eps = 0.5 * (eps - eps.transpose(0, 1))  # exact antisymmetry
        return eps


class RaceHead(nn.Module):
    """Two-layer MLP over embeddings emitting one logit per race."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, N_RACES),
        )

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return self.net(e)


@dataclass
class PairOutputs:
    pack_a: FeaturePack
    pack_b: FeaturePack
    att_a: AttentionOutputs
    att_b: AttentionOutputs


class KinshipModel(nn.Module):
    """Backbone + attention fusion + debias layer + race classifier.

    The mode only changes the backward pass of the race branch; forward
    outputs are identical for both modes given the same weights.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.attention = AttentionFusion(cfg)
        debias_dim = cfg.debias_dim or cfg.width
        self.debias = DebiasLayer(cfg.fused_dim, debias_dim)
        self.race_head = RaceHead(cfg.width, cfg.race_head_hidden)

    def forward_pair(self, images_a: torch.Tensor, images_b: torch.Tensor) -> PairOutputs:
        pack_a = self.backbone(images_a)
        pack_b = self.backbone(images_b)
        att_a, att_b = self.attention(pack_a, pack_b)
        return PairOutputs(pack_a=pack_a, pack_b=pack_b, att_a=att_a, att_b=att_b)

    def race_logits(self, e: torch.Tensor) -> torch.Tensor:
        if self.cfg.mode == "adversarial":
            e = grad_reverse(e, self.cfg.grl_lambda)
        return self.race_head(e)

    def set_mode(self, mode: Mode) -> None:
        self.cfg = replace(self.cfg, mode=mode)

    @torch.no_grad()
    def embed(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Per-image backbone embeddings e, used for verification and export.

        The race branch acts on e, so these vectors are where adversarial
        training removes race information; the attention-fused vectors remain
        internal to the pair loss.
        """
        was_training = self.training
        self.eval()
        chunks = []
        for start in range(0, len(images), batch_size):
            batch = torch.as_tensor(
                np.asarray(images[start : start + batch_size]), dtype=torch.float32
            )
            chunks.append(self.backbone(batch).e.numpy().copy())
        if was_training:
            self.train()
        return (
            np.concatenate(chunks)
            if chunks
            else np.zeros((0, self.cfg.width), np.float32)
        )


def build_model(cfg: ModelConfig, seed: int = 0) -> KinshipModel:
    """Construct a model with seeded parameter initialization."""
    torch.manual_seed(seed)
    return KinshipModel(cfg)
