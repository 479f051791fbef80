"""Contrastive objectives.

Both losses are the same symmetric InfoNCE applied to different pairs:
the query-target loss pulls the composed masked-pair query toward the
feature of its original image, and the original loss keeps the generic
"a photo of <pseudo>" prompt aligned with the image the pseudo word was
inverted from.  The total is a weighted sum of the two.

All similarities are inner products of unit-normalized features scaled
by 1 / temperature, and each direction is a numerically stable softmax
cross-entropy against the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import FeatureBatch
from .errors import ConfigError, InvalidInputError


@dataclass
class LossBundle:
    """All scalar loss components of one training step.

    Fields hold 0-dim tensors so ``total`` can drive backprop directly;
    ``as_dict`` converts to plain floats for logging.
    """

    total: torch.Tensor
    qt: torch.Tensor
    org: torch.Tensor
    qt_i2t: torch.Tensor
    qt_t2i: torch.Tensor
    org_i2t: torch.Tensor
    org_t2i: torch.Tensor
    alpha: float

    def as_dict(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()), "qt": float(self.qt.detach()),
            "org": float(self.org.detach()),
            "qt_i2t": float(self.qt_i2t.detach()), "qt_t2i": float(self.qt_t2i.detach()),
            "org_i2t": float(self.org_i2t.detach()), "org_t2i": float(self.org_t2i.detach()),
            "alpha": self.alpha,
        }


def _directional(logits: torch.Tensor) -> torch.Tensor:
    # Cross-entropy of the row softmax against the diagonal, via log-softmax
    # with max subtraction rather than a literal exp/sum transcription.
    n = logits.shape[0]
    log_probs = F.log_softmax(logits, dim=-1)
    return -log_probs[torch.arange(n), torch.arange(n)].mean()


def symmetric_info_nce(a: FeatureBatch, b: FeatureBatch, temperature: float
                       ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Contrastive loss in both directions plus their mean.

    Returns ``(mean, a_to_b, b_to_a)`` where the a-to-b direction uses
    rows of a as anchors against all of b, diagonal pairs positive, and
    the mean is half the sum of the two directions.  A batch of one is
    allowed and yields zero (a one-element softmax).
    """
    if temperature <= 0:
        raise ConfigError(f"loss.temperature must be positive; got {temperature}")
    if a.vectors.shape != b.vectors.shape:
        raise InvalidInputError(
            f"feature shapes differ: {tuple(a.vectors.shape)} vs {tuple(b.vectors.shape)}"
        )
    a.require_normalized()
    b.require_normalized()
    logits = a.vectors @ b.vectors.T / temperature
    a_to_b = _directional(logits)
    b_to_a = _directional(logits.T)
    return 0.5 * (a_to_b + b_to_a), a_to_b, b_to_a


def query_target_loss(target_image_feats: FeatureBatch, composed_feats: FeatureBatch,
                      temperature: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pull each composed query toward its own original image.

    ``target_image_feats`` come from the unmasked images; the i2t
    direction anchors on them, the t2i direction on the composed
    queries.
    """
    return symmetric_info_nce(target_image_feats, composed_feats, temperature)


def original_loss(image_feats: FeatureBatch, prompt_feats: FeatureBatch,
                  temperature: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Keep "a photo of <pseudo>" aligned with the image it came from."""
    return symmetric_info_nce(image_feats, prompt_feats, temperature)


def total_loss(qt: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
               org: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
               alpha: float) -> LossBundle:
    """Weighted sum: alpha times the query-target term plus the original term."""
    if alpha < 0:
        raise ConfigError(f"train.alpha must be non-negative; got {alpha}")
    qt_mean, qt_i2t, qt_t2i = qt
    org_mean, org_i2t, org_t2i = org
    return LossBundle(total=alpha * qt_mean + org_mean, qt=qt_mean, org=org_mean,
                      qt_i2t=qt_i2t, qt_t2i=qt_t2i, org_i2t=org_i2t, org_t2i=org_t2i,
                      alpha=alpha)
