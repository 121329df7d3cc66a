"""Contrastive losses with a learned per-anchor bias, and analytic gradients.

This is the reference implementation of the loss stack, in double-precision
numpy. A batch holds n positive pairs: anchors x_1..x_n and their kin
counterparts y_1..y_n. For anchor x_i the positive is y_i and the in-batch
negatives are all x_j and y_j with j != i.

The baseline loss is a symmetrized supervised contrastive loss over cosine
similarities at temperature tau. The fair variant subtracts a per-anchor
bias b_i from the positive logit:

    L_i = -log( e^{(cos(x_i, y_i) - b_i)/tau}
                / ( sum_{j!=i} [ e^{cos(x_i, x_j)/tau} + e^{cos(x_i, y_j)/tau} ]
                    + e^{(cos(x_i, y_i) - b_i)/tau} ) )

b_i is the batch average of pairwise bias estimates
eps(i, j) = cos(M(f_m), M(f_i))^2 - cos(M(f_m), M(f_j))^2 with
f_m = (f_i + f_j) / 2 and M an affine debias map; eps > 0 means identity i
carries more bias than identity j. All losses here are pure functions; the
torch training path is checked against them in the test suite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

NORM_FLOOR = 1e-12
_COS_TOL = 1e-9

# Count of cosine() calls where both inputs were numerically zero-length.
degenerate_cosine_count = 0


class LossConfigError(ValueError):
    """Raised for invalid loss inputs (bad tau, batch too small, ...)."""


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss term is non-finite; treated as a training abort."""


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity with a norm floor, clamped to [-1, 1].

    When both vectors are numerically zero the result is defined as 0 and a
    module-level warning counter is incremented.
    """
    global degenerate_cosine_count
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu <= NORM_FLOOR and nv <= NORM_FLOOR:
        degenerate_cosine_count += 1
        warnings.warn("cosine of two zero-length vectors, defined as 0", stacklevel=2)
        return 0.0
    value = float(u @ v) / (nu * nv + NORM_FLOOR)
    return float(np.clip(value, -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    sims = (a @ b.T) / (na * nb.T + NORM_FLOOR)
    return np.clip(sims, -1.0, 1.0)


@dataclass(frozen=True)
class SimMatrix:
    """Cosine similarities of one batch at temperature tau.

    cos_xy[i, j] = cos(x_i, y_j); cos_xx and cos_yy are the within-side
    similarity matrices (cos_yy is needed by the symmetrized direction whose
    anchors are the y side).
    """

    cos_xy: np.ndarray
    cos_xx: np.ndarray
    cos_yy: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise LossConfigError(f"tau must be positive, got {self.tau}")
        n = self.n
        for name in ("cos_xy", "cos_xx", "cos_yy"):
            mat = getattr(self, name)
            if mat.shape != (n, n):
                raise LossConfigError(f"{name} must be ({n}, {n}), got {mat.shape}")
            if np.abs(mat).max(initial=0.0) > 1.0 + _COS_TOL:
                raise LossConfigError(f"{name} has entries outside [-1, 1]")
        diag = np.diag(self.cos_xx)
        if n and np.abs(diag - 1.0).max() > 1e-6:
            raise LossConfigError("diagonal of cos_xx must equal 1")

    @property
    def n(self) -> int:
        return self.cos_xy.shape[0]

    @classmethod
    def from_embeddings(cls, x: np.ndarray, y: np.ndarray, tau: float) -> "SimMatrix":
        return cls(
            cos_xy=cosine_matrix(x, y),
            cos_xx=cosine_matrix(x, x),
            cos_yy=cosine_matrix(y, y),
            tau=tau,
        )

    @property
    def transposed(self) -> "SimMatrix":
        """The same batch viewed with the y side as anchors."""
        return SimMatrix(
            cos_xy=self.cos_xy.T, cos_xx=self.cos_yy, cos_yy=self.cos_xx, tau=self.tau
        )


@dataclass(frozen=True)
class BiasVector:
    """Per-anchor bias b and the pairwise estimate matrix it averages.

    eps_matrix is antisymmetric with zero diagonal; b_i is the mean of row i
    over the off-diagonal entries.
    """

    b: np.ndarray
    eps_matrix: np.ndarray

    def __post_init__(self) -> None:
        n = self.eps_matrix.shape[0]
        if self.eps_matrix.shape != (n, n):
            raise LossConfigError("eps_matrix must be square")
        if self.b.shape != (n,):
            raise LossConfigError("b must match eps_matrix's row count")
        if n:
            if np.abs(self.eps_matrix + self.eps_matrix.T).max() > _COS_TOL:
                raise LossConfigError("eps_matrix must be antisymmetric")
            if np.abs(batch_bias(self.eps_matrix) - self.b).max() > _COS_TOL:
                raise LossConfigError("b must equal the row means of eps_matrix")

    @classmethod
    def from_eps(cls, eps_matrix: np.ndarray) -> "BiasVector":
        eps_matrix = np.asarray(eps_matrix, dtype=np.float64)
        return cls(b=batch_bias(eps_matrix), eps_matrix=eps_matrix)

    @classmethod
    def zeros(cls, n: int) -> "BiasVector":
        return cls(b=np.zeros(n), eps_matrix=np.zeros((n, n)))


@dataclass(frozen=True)
class LossBreakdown:
    """One batch's loss values; l_total is the exact float sum of the parts."""

    l_fairness: float
    l_race: float
    l_total: float
    bias: BiasVector

    @classmethod
    def build(cls, l_fairness: float, l_race: float, bias: BiasVector) -> "LossBreakdown":
        return cls(
            l_fairness=l_fairness,
            l_race=l_race,
            l_total=total_loss(l_fairness, l_race),
            bias=bias,
        )

    def to_dict(self) -> dict:
        return {
            "l_fairness": self.l_fairness,
            "l_race": self.l_race,
            "l_total": self.l_total,
            "mean_bias": float(self.bias.b.mean()) if self.bias.b.size else 0.0,
        }


def pair_bias(mf_m: np.ndarray, mf_i: np.ndarray, mf_j: np.ndarray) -> float:
    """Pairwise bias estimate: squared-cosine difference against the midpoint.

    Positive values mean identity i carries more bias than identity j;
    swapping i and j negates the result.
    """
    return cosine(mf_m, mf_i) ** 2 - cosine(mf_m, mf_j) ** 2


def batch_bias(eps_matrix: np.ndarray) -> np.ndarray:
    """b_i = mean over j != i of eps(i, j); zero for a single-element batch."""
    eps_matrix = np.asarray(eps_matrix, dtype=np.float64)
    n = eps_matrix.shape[0]
    if n <= 1:
        return np.zeros(n)
    off_diag_sum = eps_matrix.sum(axis=1) - np.diag(eps_matrix)
    return off_diag_sum / (n - 1)


def bias_vector_from_features(
    features: np.ndarray, weight: np.ndarray, bias: np.ndarray
) -> BiasVector:
    """Reference bias computation for a batch of fused features.

    Applies the affine debias map M(f) = f @ weight + bias to every feature,
    to every pairwise midpoint, and fills the eps matrix from the
    squared-cosine differences.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    mapped = features @ weight + bias
    eps = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            midpoint = 0.5 * (features[i] + features[j])
            m_mid = midpoint @ weight + bias
            eps[i, j] = pair_bias(m_mid, mapped[i], mapped[j])
            eps[j, i] = -eps[i, j]
    return BiasVector.from_eps(eps)


def _as_bias_array(bias: "BiasVector | np.ndarray | None", n: int) -> np.ndarray:
    if bias is None:
        return np.zeros(n)
    if isinstance(bias, BiasVector):
        arr = bias.b
    else:
        arr = np.asarray(bias, dtype=np.float64)
    if arr.shape != (n,):
        raise LossConfigError(f"bias must have shape ({n},), got {arr.shape}")
    return arr


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    # rows of `logits`; stabilized by per-row max subtraction
    m = logits.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))


def _direction_logits(
    s: SimMatrix, b: np.ndarray, include_self_term: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor (positive logit, negative logits) for the x-anchor direction."""
    n = s.n
    pos = (np.diag(s.cos_xy) - b) / s.tau
    off = ~np.eye(n, dtype=bool)
    if include_self_term:
        # literal double sum over all j: every x-x and x-y term enters the
        # denominator, including the self similarity and the positive itself
        negs = np.concatenate([s.cos_xx, s.cos_xy], axis=1) / s.tau
    else:
        negs = np.stack(
            [
                np.concatenate([s.cos_xx[i, off[i]], s.cos_xy[i, off[i]]])
                for i in range(n)
            ]
        ) / s.tau
    return pos, negs


def _direction_losses(
    s: SimMatrix, b: np.ndarray, include_self_term: bool = False
) -> np.ndarray:
    pos, negs = _direction_logits(s, b, include_self_term)
    if include_self_term:
        # positive already appears inside the double sum
        return _logsumexp(negs) - pos
    all_logits = np.concatenate([negs, pos[:, None]], axis=1)
    return _logsumexp(all_logits) - pos


def supcon_loss(s: SimMatrix, include_self_term: bool = False) -> float:
    """Symmetrized supervised contrastive loss over the batch.

    Default convention excludes j = i from the denominator sum; the literal
    variant that keeps the self similarity term is available behind
    ``include_self_term`` for ablation.
    """
    if s.n < 2:
        raise LossConfigError("contrastive loss needs at least 2 pairs in the batch")
    zeros = np.zeros(s.n)
    forward = _direction_losses(s, zeros, include_self_term)
    backward = _direction_losses(s.transposed, zeros, include_self_term)
    return float((forward.sum() + backward.sum()) / (2 * s.n))


def fair_contrastive_loss(
    s: SimMatrix,
    bias: "BiasVector | np.ndarray",
    bias_y: "BiasVector | np.ndarray | None" = None,
) -> float:
    """Fair contrastive loss: positive logit shifted by -b_i per anchor.

    ``bias`` applies to the x-anchor direction. ``bias_y`` applies to the
    symmetrized y-anchor direction; when omitted the x-side bias is reused
    (the default pipeline recomputes it per direction).
    """
    if s.n < 2:
        raise LossConfigError("contrastive loss needs at least 2 pairs in the batch")
    b_x = _as_bias_array(bias, s.n)
    b_y = _as_bias_array(bias_y, s.n) if bias_y is not None else b_x
    forward = _direction_losses(s, b_x)
    backward = _direction_losses(s.transposed, b_y)
    return float((forward.sum() + backward.sum()) / (2 * s.n))


def p_ij(s: SimMatrix, bias: "BiasVector | np.ndarray | None" = None) -> np.ndarray:
    """Row-softmax probabilities over anchor-anchor negatives plus the positive.

    Entry (i, j), j != i, is the probability of (x_i, x_j) being recognized
    as the positive; entry (i, i) holds the true positive's probability with
    its logit shifted by -b_i. Rows sum to 1. With zero bias this is the
    plain gradient-analysis probability.
    """
    n = s.n
    b = _as_bias_array(bias, n)
    logits = s.cos_xx / s.tau
    pos = (np.diag(s.cos_xy) - b) / s.tau
    logits = logits.copy()
    np.fill_diagonal(logits, pos)
    m = logits.max(axis=1, keepdims=True)
    exps = np.exp(logits - m)
    return exps / exps.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class DirectionProbs:
    """Full-row probabilities for one anchor direction of the fair loss.

    p_pos[i] is the positive's probability; p_within[i, j] and
    p_cross[i, j] (zero diagonals) are the probabilities of the
    anchor-side negative (a_i, a_j) and the cross negative (a_i, b_j).
    Each row satisfies p_pos + sum(p_within) + sum(p_cross) = 1.
    """

    p_pos: np.ndarray
    p_within: np.ndarray
    p_cross: np.ndarray


def _direction_probs(s: SimMatrix, b: np.ndarray) -> DirectionProbs:
    n = s.n
    pos = (np.diag(s.cos_xy) - b) / s.tau
    within = s.cos_xx / s.tau
    cross = s.cos_xy / s.tau
    # exclude j = i by sending those logits to -inf
    diag_mask = np.eye(n, dtype=bool)
    within = np.where(diag_mask, -np.inf, within)
    cross = np.where(diag_mask, -np.inf, cross)
    all_logits = np.concatenate([within, cross, pos[:, None]], axis=1)
    m = all_logits.max(axis=1, keepdims=True)
    exps = np.exp(all_logits - m)
    z = exps.sum(axis=1, keepdims=True)
    probs = exps / z
    return DirectionProbs(
        p_pos=probs[:, -1],
        p_within=probs[:, :n],
        p_cross=probs[:, n : 2 * n],
    )


def fair_loss_probabilities(
    s: SimMatrix,
    bias: "BiasVector | np.ndarray | None" = None,
    bias_y: "BiasVector | np.ndarray | None" = None,
) -> tuple[DirectionProbs, DirectionProbs]:
    """Per-direction row probabilities of the fair loss (x anchors, y anchors)."""
    b_x = _as_bias_array(bias, s.n)
    b_y = _as_bias_array(bias_y, s.n) if bias_y is not None else b_x
    return _direction_probs(s, b_x), _direction_probs(s.transposed, b_y)


@dataclass(frozen=True)
class SimGradients:
    """Gradients of the symmetrized fair loss w.r.t. every stored similarity."""

    d_cos_xy: np.ndarray
    d_cos_xx: np.ndarray
    d_cos_yy: np.ndarray


def loss_grad_wrt_sims(
    s: SimMatrix,
    bias: "BiasVector | np.ndarray | None" = None,
    bias_y: "BiasVector | np.ndarray | None" = None,
) -> SimGradients:
    """Analytic gradients of fair_contrastive_loss w.r.t. the cosine entries.

    Built from the gradient identities of the contrastive loss: for each
    anchor direction, d/d(pos) = -(1/tau) * (1 - P_pos) = -(1/tau) * sum of
    negative probabilities, and d/d(neg) = (1/tau) * P_neg. Both directions'
    contributions are accumulated onto the entries they read (the y-anchor
    direction reads cos_xy transposed), each weighted by 1/(2n).
    """
    n = s.n
    if n < 2:
        raise LossConfigError("contrastive loss needs at least 2 pairs in the batch")
    probs_x, probs_y = fair_loss_probabilities(s, bias, bias_y)
    scale = 1.0 / (2 * n * s.tau)

    d_xy = np.zeros((n, n))
    d_xx = np.zeros((n, n))
    d_yy = np.zeros((n, n))

    # positive cos_xy[i, i] appears in both directions
    np.fill_diagonal(d_xy, -scale * ((1 - probs_x.p_pos) + (1 - probs_y.p_pos)))
    # x-direction negatives: (x_i, x_j) reads cos_xx[i, j]; (x_i, y_j) reads cos_xy[i, j]
    d_xx += scale * probs_x.p_within
    d_xy += scale * probs_x.p_cross
    # y-direction negatives: (y_i, y_j) reads cos_yy[i, j]; (y_i, x_j) reads cos_xy[j, i]
    d_yy += scale * probs_y.p_within
    d_xy += scale * probs_y.p_cross.T

    return SimGradients(d_cos_xy=d_xy, d_cos_xx=d_xx, d_cos_yy=d_yy)


def race_ce(logits: np.ndarray, labels: Sequence[int]) -> float:
    """Mean cross-entropy of race logits against integer labels in 0..3."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != 4:
        raise LossConfigError(f"logits must be (batch, 4), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise LossConfigError("labels must match the logits batch")
    if labels.size and (labels.min() < 0 or labels.max() > 3):
        raise LossConfigError("race labels must lie in 0..3")
    lse = _logsumexp(logits)
    picked = logits[np.arange(len(labels)), labels]
    return float((lse - picked).mean())


def total_loss(l_fairness: float, l_race: float) -> float:
    """Unweighted sum of the two loss parts; non-finite inputs abort training."""
    if not np.isfinite(l_fairness) or not np.isfinite(l_race):
        raise NonFiniteLossError(
            f"non-finite loss terms: fairness={l_fairness!r}, race={l_race!r}"
        )
    return l_fairness + l_race
