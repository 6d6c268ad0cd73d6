"""Training objectives: identity cosine, non-saturating adversarial pair with
R1 gradient penalty, weak feature matching, pixel+perceptual reconstruction,
mask binary cross entropy, and their weighted total.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .networks import IdentityEmbedder


@dataclass
class LossWeights:
    """Balancing coefficients. The adversarial term always has weight 1."""

    lambda_id: float = 10.0
    lambda_fm: float = 100.0
    lambda_rec: float = 100.0
    lambda_mask: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")


@dataclass
class LossReport:
    """Per-step scalar record of every generator-side term plus the weighted
    total; reconstruction and mask terms are None on steps/branches where they
    do not apply. d_adv and r1 describe the discriminator's own update."""

    adv: float
    identity: float
    feature_match: float
    reconstruction: float | None
    mask: float | None
    total: float
    d_adv: float = 0.0
    r1: float = 0.0

    @classmethod
    def from_parts(cls, adv, identity, feature_match, reconstruction, mask, weights: LossWeights, d_adv=0.0, r1=0.0):
        def val(x):
            if x is None:
                return None
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

        return cls(
            adv=val(adv),
            identity=val(identity),
            feature_match=val(feature_match),
            reconstruction=val(reconstruction),
            mask=val(mask),
            total=val(total_loss(adv, identity, feature_match, reconstruction, mask, weights)),
            d_adv=val(d_adv),
            r1=val(r1),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def id_loss(f_src: torch.Tensor, generated: torch.Tensor, embedder: IdentityEmbedder, augment=None) -> torch.Tensor:
    """1 - cosine similarity between the source identity embedding and the
    embedding of the generated image. `augment` (e.g. color jitter) is applied
    to the generated image before embedding; reference embeddings in f_src are
    expected to come from augmented inputs as well."""
    if augment is not None:
        generated = augment(generated)
    f_gen = embedder(generated)
    cos = (f_src * f_gen).sum(dim=1)
    return (1.0 - cos).mean()


def adv_losses(
    logit_real: torch.Tensor,
    logit_fake: torch.Tensor,
    real_images: torch.Tensor | None = None,
    gamma: float = 1.0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Non-saturating logistic GAN losses.

    Returns (g_loss, d_loss, r1_penalty). The R1 term (gamma/2 times the
    squared input-gradient norm of the real logits) is only computed when
    real_images is passed; it is meant to be applied lazily every few steps
    and added to the discriminator loss by the caller.
    """
    g_loss = F.softplus(-logit_fake).mean()
    d_loss = F.softplus(logit_fake).mean() + F.softplus(-logit_real).mean()
    if real_images is not None:
        (grad,) = torch.autograd.grad(logit_real.sum(), real_images, create_graph=True)
        r1 = (gamma / 2.0) * grad.pow(2).flatten(1).sum(dim=1).mean()
    else:
        r1 = torch.zeros((), dtype=logit_real.dtype, device=logit_real.device)
    return g_loss, d_loss, r1


def default_start_layer(num_layers: int) -> int:
    """First (1-based) discriminator layer used for feature matching: the
    deepest half of the layers only, hence 'weak' matching."""
    return math.ceil(num_layers / 2) + 1


def fm_loss(feats_gen: list[torch.Tensor], feats_real: list[torch.Tensor], start_layer: int | None = None) -> torch.Tensor:
    """Sum of mean-absolute feature differences over layers start_layer..N,
    1-based, comparing discriminator activations of generated vs real images."""
    if len(feats_gen) != len(feats_real):
        raise ValueError("feature lists must have equal length")
    n = len(feats_real)
    if start_layer is None:
        start_layer = default_start_layer(n)
    if not 1 <= start_layer <= n:
        raise ValueError(f"start_layer {start_layer} outside 1..{n}")
    total = feats_gen[0].new_zeros(())
    for m in range(start_layer - 1, n):
        total = total + (feats_gen[m] - feats_real[m]).abs().mean()
    return total


def rec_loss(generated: torch.Tensor, reference: torch.Tensor, embedder: IdentityEmbedder) -> torch.Tensor:
    """Pixel L1 plus a perceptual term: mean-absolute differences of the first
    three frozen embedder feature stages."""
    if generated.shape != reference.shape:
        raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(reference.shape)}")
    loss = (generated - reference).abs().mean()
    feats_gen = embedder.features(generated)[:3]
    feats_ref = embedder.features(reference)[:3]
    for fg, fr in zip(feats_gen, feats_ref):
        loss = loss + (fg - fr).abs().mean()
    return loss


BCE_MARGIN = 1e-7


def mask_loss(mask: torch.Tensor, mask_ref: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise binary cross entropy of the soft mask against the binary
    ground truth, with the prediction clamped away from {0, 1}."""
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ValueError("predicted mask must lie in [0, 1]")
    m = mask.clamp(BCE_MARGIN, 1.0 - BCE_MARGIN)
    ref = mask_ref.to(m.dtype)
    return -(ref * m.log() + (1.0 - ref) * (1.0 - m).log()).mean()


def total_loss(adv, identity, feature_match, reconstruction, mask, weights: LossWeights):
    """adv + lambda_id*id + lambda_fm*fm [+ lambda_rec*rec] [+ lambda_mask*mask].

    Reconstruction only applies to branches with pixel-level supervision
    (self-swap and same-identity swap); the mask term only once the mask
    branch is active. Pass None to drop a term.
    """
    total = adv + weights.lambda_id * identity + weights.lambda_fm * feature_match
    if reconstruction is not None:
        total = total + weights.lambda_rec * reconstruction
    if mask is not None:
        total = total + weights.lambda_mask * mask
    return total
