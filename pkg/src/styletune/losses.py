"""The five training losses and their weighted combination.

Terms: few-shot cross-entropy on the prompted views; KL consistency
between the frozen and prompted class distributions; MSE alignment of
prompted embeddings to their frozen counterparts; diversity of the style
bases on the unit hypersphere; and cross-covariance content consistency
between prompted and frozen patch features. Frozen quantities are always
treated as fixed targets: gradients flow only into the prompted path and
the style bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import (
    DualEncoderState,
    class_token_batch,
    encode_image_frozen,
    encode_image_prompted,
    encode_text_frozen,
    encode_text_prompted,
)
from .errors import ContractError, DimensionError, NumericDomainError
from .tensor import Tensor, logsumexp, matmul, softmax

PROB_FLOOR = 1e-12
VARIANCE_GUARD = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the combined objective. The alignment weights sit
    inside the MSE term; diversity and content are weighted in the sum."""

    lambda_f: float = 15.0
    lambda_g: float = 25.0
    lambda_div: float = 0.005
    lambda_content: float = 0.2
    lambda_cm: float = 1.0
    tau: float | None = None  # None: use the encoder temperature

    def __post_init__(self):
        for name in ("lambda_f", "lambda_g", "lambda_div", "lambda_content", "lambda_cm"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if self.tau is not None and self.tau <= 0:
            raise ContractError("tau must be positive")

    def to_dict(self) -> dict:
        return {
            "lambda_f": self.lambda_f,
            "lambda_g": self.lambda_g,
            "lambda_div": self.lambda_div,
            "lambda_content": self.lambda_content,
            "lambda_cm": self.lambda_cm,
            "tau": self.tau,
        }

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(**d)


def ce_only_weights(tau: float | None = None) -> LossWeights:
    """Degenerate configuration: every extra term switched off."""
    return LossWeights(lambda_f=0.0, lambda_g=0.0, lambda_div=0.0, lambda_content=0.0, lambda_cm=0.0, tau=tau)


@dataclass
class LossBreakdown:
    """Per-step scalars. ``cm`` and ``feat`` carry their multipliers already;
    ``diversity`` and ``content`` are raw and weighted inside ``total``."""

    ce: float
    cm: float
    feat: float
    diversity: float
    content: float
    total: float

    def to_dict(self) -> dict:
        return {
            "ce": self.ce,
            "cm": self.cm,
            "feat": self.feat,
            "diversity": self.diversity,
            "content": self.content,
            "total": self.total,
        }


@dataclass
class TrainingBatch:
    images: np.ndarray  # (B, C, H, W)
    labels: np.ndarray  # (B,) indices into class_ids
    class_ids: np.ndarray  # (C,) global class ids for the active class set


@dataclass
class FrozenOutputs:
    """Cacheable frozen-view activations for one batch + class set."""

    image_emb: Tensor
    final_patch_feats: Tensor
    text_emb: Tensor


def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy_loss(
    image_embs: Tensor, class_embs: Tensor, labels: np.ndarray, tau: float
) -> Tensor:
    """Mean negative log-likelihood of the softmax over class similarities."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("cross_entropy_loss on an empty batch")
    n_classes = class_embs.shape[0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(f"label outside [0, {n_classes}): {labels}")
    logits = matmul(image_embs, class_embs.transpose((1, 0))) * (1.0 / tau)
    lse = logsumexp(logits, axis=1)
    picked = (logits * Tensor(_onehot(labels, n_classes))).sum(axis=1)
    return (lse - picked).mean()


def diversity_loss(bank) -> Tensor:
    """Sum of |cos| over ordered basis pairs, for mu and sigma bases."""
    n = bank.n_bases
    if n < 2:
        return Tensor(0.0)
    total = None
    for mat in (bank.mu(), bank.sigma()):
        norms_sq = (mat * mat).sum(axis=1, keepdims=True)
        if np.any(norms_sq.data == 0.0):
            raise NumericDomainError("zero-norm style basis in diversity loss")
        unit = mat / norms_sq.sqrt()
        gram = matmul(unit, unit.transpose((1, 0)))
        off = Tensor(1.0 - np.eye(n))
        term = (gram.abs() * off).sum()
        total = term if total is None else total + term
    return total


def content_loss(
    prompted: Tensor, frozen: Tensor, variance_guard: float = VARIANCE_GUARD
) -> Tensor:
    """Cross-covariance content consistency for one (P^2, D) pair.

    Both maps are standardized per dimension across patches; the loss is
    the euclidean norm of diag(cross-covariance) minus one.
    """
    if prompted.shape != frozen.shape or prompted.ndim != 2:
        raise DimensionError(
            f"content_loss shapes disagree: {prompted.shape} vs {frozen.shape}"
        )
    return _content_loss_nd(prompted, frozen, variance_guard)


def _standardize_patches(x: Tensor, variance_guard: float) -> Tensor:
    mu = x.mean(axis=-2, keepdims=True)
    var = ((x - mu) * (x - mu)).mean(axis=-2, keepdims=True)
    if np.any(var.data <= variance_guard):
        raise NumericDomainError("zero-variance dimension in content standardization")
    return (x - mu) / var.sqrt()


def _content_loss_nd(prompted: Tensor, frozen: Tensor, variance_guard: float) -> Tensor:
    """Works on (P^2, D) or batched (B, P^2, D); batched returns the mean."""
    sp = _standardize_patches(prompted, variance_guard)
    sf = _standardize_patches(frozen.detach(), variance_guard)
    diag = (sp * sf).mean(axis=-2)  # diagonal of (1/P^2) Sp^T Sf, shape (..., D)
    dev = diag - 1.0
    per_map = (dev * dev).sum(axis=-1).sqrt()
    return per_map.mean() if per_map.ndim > 0 else per_map


def feature_alignment_loss(
    f: Tensor, f_p: Tensor, g: Tensor, g_p: Tensor, lambda_f: float, lambda_g: float
) -> Tensor:
    """Weighted MSE between prompted embeddings and detached frozen targets.

    Accepts (d,) vectors or (B, d) batches; batches return the mean.
    """
    if f.shape != f_p.shape or g.shape != g_p.shape or f.shape[-1] != g.shape[-1]:
        raise DimensionError(
            f"embedding shapes disagree: {f.shape}/{f_p.shape} vs {g.shape}/{g_p.shape}"
        )
    d = f.shape[-1]
    df = f.detach() - f_p
    dg = g.detach() - g_p
    per_sample = ((df * df).sum(axis=-1) * lambda_f + (dg * dg).sum(axis=-1) * lambda_g) * (1.0 / d)
    return per_sample.mean() if per_sample.ndim > 0 else per_sample


def cross_modal_loss(pre: Tensor, pre_p: Tensor) -> Tensor:
    """KL(frozen prediction || prompted prediction); frozen is the fixed target."""
    if pre.shape != pre_p.shape:
        raise DimensionError(f"prediction shapes disagree: {pre.shape} vs {pre_p.shape}")
    target = Tensor(pre.data)  # no gradient into the target distribution
    log_ratio = target.clamp_min(PROB_FLOOR).log() - pre_p.clamp_min(PROB_FLOOR).log()
    per_dist = (target * log_ratio).sum(axis=-1)
    return per_dist.mean() if per_dist.ndim > 0 else per_dist


def compute_frozen_outputs(
    state: DualEncoderState, images: np.ndarray, class_ids: np.ndarray
) -> FrozenOutputs:
    seqs = class_token_batch(state.config, class_ids)
    image_emb, feats = encode_image_frozen(state, images)
    text_emb = encode_text_frozen(state, seqs)
    return FrozenOutputs(
        image_emb=image_emb.detach(),
        final_patch_feats=feats[-1].detach(),
        text_emb=text_emb.detach(),
    )


def total_loss(
    state: DualEncoderState,
    batch: TrainingBatch,
    weights: LossWeights,
    style_mode: str = "shift",
    with_grads: bool = True,
    frozen: FrozenOutputs | None = None,
    mask_prompts: bool = False,
) -> LossBreakdown:
    """Both forward passes, all five terms, and (optionally) one backward.

    ``mask_prompts`` is the degenerate-prompt test harness passed through
    to the prompted encoders.
    """
    tau = weights.tau if weights.tau is not None else state.temperature()
    if frozen is None:
        frozen = compute_frozen_outputs(state, batch.images, batch.class_ids)
    seqs = class_token_batch(state.config, batch.class_ids)

    fp_emb, fp_feats = encode_image_prompted(
        state, batch.images, style_mode=style_mode, mask_prompts=mask_prompts
    )
    gp_emb = encode_text_prompted(state, seqs, mask_prompts=mask_prompts)

    ce = cross_entropy_loss(fp_emb, gp_emb, batch.labels, tau)

    pre = softmax(matmul(frozen.image_emb, frozen.text_emb.transpose((1, 0))) * (1.0 / tau), axis=-1)
    pre_p = softmax(matmul(fp_emb, gp_emb.transpose((1, 0))) * (1.0 / tau), axis=-1)
    cm = cross_modal_loss(pre, pre_p) * weights.lambda_cm

    onehot = Tensor(_onehot(np.asarray(batch.labels), len(batch.class_ids)))
    feat = feature_alignment_loss(
        frozen.image_emb,
        fp_emb,
        matmul(onehot, frozen.text_emb),
        matmul(onehot, gp_emb),
        weights.lambda_f,
        weights.lambda_g,
    )

    diversity = diversity_loss(state.style_bank) if state.style_bank is not None else Tensor(0.0)
    content = _content_loss_nd(fp_feats[-1], frozen.final_patch_feats, VARIANCE_GUARD)

    total = ce + cm + feat + diversity * weights.lambda_div + content * weights.lambda_content
    if with_grads:
        state.zero_grads()
        total.backward()
    return LossBreakdown(
        ce=ce.item(),
        cm=cm.item(),
        feat=feat.item(),
        diversity=diversity.item(),
        content=content.item(),
        total=total.item(),
    )
