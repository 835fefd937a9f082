"""The four training objectives and their weighted combination.

Contrastive alignment over [CLS] features, masked image reconstruction
(MSE), masked text reconstruction (cross-entropy), and supervised
classification, combined as
``total = w_contrast * contrast + w_recon * (image + text) + w_cls * cls``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TokenSequence
from .errors import DegenerateInputError, DimensionError, LabelError, NumericError
from .tensor import Tensor, log_softmax, unit_rows


@dataclass
class LossWeights:
    contrastive: float = 1.0
    reconstruction: float = 1.0
    classification: float = 1.0


@dataclass
class LossBreakdown:
    contrastive: Tensor
    recon_image: Tensor
    recon_text: Tensor
    classification: Tensor
    total: Tensor
    weights: LossWeights

    def scalars(self) -> dict[str, float]:
        return {
            "l_cl": self.contrastive.item(),
            "l_res_image": self.recon_image.item(),
            "l_res_text": self.recon_text.item(),
            "l_cls": self.classification.item(),
            "l_total": self.total.item(),
        }


def itc_loss(z_image: Tensor, z_text: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE over cosine similarities of paired rows.

    Both directions (image->text and text->image) are summed, each averaged
    over the batch so the value is batch-size independent. Diagonal entries
    are the positives.
    """
    if z_image.ndim != 2 or z_image.shape != z_text.shape:
        raise DimensionError("expected two equal-shape (batch, dim) tensors")
    b = z_image.shape[0]
    zi = unit_rows(z_image)
    zt = unit_rows(z_text)
    if not isinstance(tau, Tensor):
        tau = Tensor(np.array(float(tau)))
    sims = (zi @ zt.T) * tau.reshape(1, 1) ** -1.0  # (b, b)
    diag = Tensor(np.eye(b))
    loss_i2t = -(log_softmax(sims, axis=1) * diag).sum() * (1.0 / b)
    loss_t2i = -(log_softmax(sims, axis=0) * diag).sum() * (1.0 / b)
    return loss_i2t + loss_t2i


def image_recon_loss(target: np.ndarray, recon: Tensor,
                     masked_idx: np.ndarray) -> Tensor:
    """MSE over voxels of the masked patches; empty mask set gives 0."""
    if recon.shape != tuple(target.shape):
        raise DimensionError(
            f"reconstruction shape {recon.shape} != target {target.shape}")
    masked_idx = np.asarray(masked_idx, dtype=np.int64)
    if masked_idx.size == 0:
        return Tensor(np.array(0.0))
    diff = recon[masked_idx] - Tensor(target[masked_idx])
    return (diff * diff).mean()


def text_recon_loss(tokens: TokenSequence, logits: Tensor,
                    masked_idx: np.ndarray) -> Tensor:
    """Mean cross-entropy of the true token ids at masked positions."""
    masked_idx = np.asarray(masked_idx, dtype=np.int64)
    if masked_idx.size == 0:
        return Tensor(np.array(0.0))
    assert masked_idx.min() >= 1, "masked positions must exclude [CLS]"
    assert tokens.pad_mask[masked_idx].all(), "masked positions must be real tokens"
    logp = log_softmax(logits[masked_idx], axis=-1)
    onehot = np.zeros((masked_idx.size, logits.shape[-1]))
    onehot[np.arange(masked_idx.size), tokens.ids[masked_idx]] = 1.0
    return -(logp * Tensor(onehot)).sum() * (1.0 / masked_idx.size)


def classification_loss(class_logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of the true class."""
    n = class_logits.shape[-1]
    if not 0 <= label < n:
        raise LabelError(f"label {label} outside [0, {n})")
    logp = log_softmax(class_logits.reshape(1, -1), axis=-1)
    return -logp[0, label].reshape(())


def total_loss(contrastive: Tensor, recon_image: Tensor, recon_text: Tensor,
               classification: Tensor,
               weights: LossWeights | None = None) -> LossBreakdown:
    weights = weights or LossWeights()
    for part in (contrastive, recon_image, recon_text, classification):
        if not np.isfinite(part.data).all():
            raise NumericError("non-finite loss component")
    total = (weights.contrastive * contrastive
             + weights.reconstruction * (recon_image + recon_text)
             + weights.classification * classification)
    return LossBreakdown(contrastive=contrastive, recon_image=recon_image,
                         recon_text=recon_text, classification=classification,
                         total=total, weights=weights)
