"""Progressive face-mask prediction alongside the generator.

Each generator block emits one-channel mask logits from its features. Logits
are accumulated across resolutions in pre-sigmoid space: the running
accumulator is bilinearly upsampled and the next block's logits are added.
A sigmoid turns each accumulator into a soft mask; the top-resolution mask
blends the generated face into the target frame, and intermediate masks gate
how much attribute information enters the following block.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import RenderHead, upsample2x


class ToMask(RenderHead):
    """Mask-logit head: identical in structure to the RGB head but with a
    single output channel, zero-initialized so masks start at 0.5."""

    def __init__(self, in_ch: int, style_dim: int):
        super().__init__(in_ch, style_dim, out_ch=1, zero_init=True)


@dataclass
class MaskPyramid:
    """Per-resolution mask state: raw block logits, pre-sigmoid accumulators,
    and normalized soft masks. `final` is the top-resolution soft mask."""

    raw: list[torch.Tensor]
    accum: list[torch.Tensor]
    norm: list[torch.Tensor]

    @property
    def final(self) -> torch.Tensor:
        return self.norm[-1]


def accumulate(prev_accum: torch.Tensor | None, raw: torch.Tensor) -> torch.Tensor:
    """Pre-sigmoid accumulation: upsampled previous accumulator plus this
    level's logits. At the lowest resolution there is nothing to carry over."""
    if prev_accum is None:
        return raw
    if prev_accum.shape[-1] * 2 != raw.shape[-1] or prev_accum.shape[-2] * 2 != raw.shape[-2]:
        raise ValueError(
            f"accumulator {tuple(prev_accum.shape[-2:])} must be half the logits' size {tuple(raw.shape[-2:])}"
        )
    return upsample2x(prev_accum) + raw


def normalize(accum: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(accum)


def blend(mask: torch.Tensor, swapped: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """mask * swapped + (1 - mask) * target, mask broadcast over RGB."""
    if mask.shape[1] != 1:
        raise ValueError(f"mask must be one-channel, got {mask.shape[1]}")
    if mask.shape[-2:] != swapped.shape[-2:] or swapped.shape != target.shape:
        raise ValueError("mask, swapped, and target must share spatial shape")
    return mask * swapped + (1.0 - mask) * target


def mask_attributes(features: torch.Tensor, mask: torch.Tensor | None, level: int) -> torch.Tensor:
    """Suppress attribute features where the face mask is confident:
    features * (1 - mask). The lowest-resolution map (level 1) carries the
    coarse layout and is never gated."""
    if level == 1:
        return features
    if mask is None:
        raise ValueError("mask required for level > 1")
    if mask.shape[-2:] != features.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape[-2:])} does not match features {tuple(features.shape[-2:])}")
    return features * (1.0 - mask)
