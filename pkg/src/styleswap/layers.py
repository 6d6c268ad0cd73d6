"""Building-block layers shared by the generator, encoders, and discriminator.

All learnable weights are stored as unit-variance normal draws and rescaled at
call time by 1/sqrt(fan_in) (the equalized learning-rate trick), so every
layer sees comparable gradient magnitudes under plain Adam.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def fused_leaky_relu(x: torch.Tensor, bias: torch.Tensor | None = None, negative_slope: float = 0.2) -> torch.Tensor:
    if bias is not None:
        x = x + bias.view(1, -1, *([1] * (x.ndim - 2)))
    return F.leaky_relu(x, negative_slope) * math.sqrt(2)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x upsampling with half-pixel centers (corners not aligned)."""
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class EqualLinear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, bias_init: float = 0.0, lr_mul: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim).div_(lr_mul))
        self.bias = nn.Parameter(torch.full((out_dim,), bias_init / lr_mul)) if bias else None
        self.scale = (1.0 / math.sqrt(in_dim)) * lr_mul
        self.lr_mul = lr_mul

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bias = self.bias * self.lr_mul if self.bias is not None else None
        return F.linear(x, self.weight * self.scale, bias)


class EqualConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.stride = stride
        self.padding = padding

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight * self.scale, self.bias, stride=self.stride, padding=self.padding)


class ConvLayer(nn.Module):
    """EqualConv2d followed by the biased leaky ReLU, 'same' padding."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.conv = EqualConv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, bias=False)
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return fused_leaky_relu(self.conv(x), self.bias)


class ModulatedConv2d(nn.Module):
    """3x3 (or 1x1) convolution whose kernel is scaled per input channel by an
    affine function of a style vector, with optional per-output-channel
    demodulation back to unit norm.

    Implemented by scaling the input activations per channel and the output by
    the demodulation factor, which is algebraically identical to building a
    per-sample kernel but avoids grouped convolutions.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, style_dim: int, demodulate: bool = True, eps: float = 1e-8):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.affine = EqualLinear(style_dim, in_ch, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.padding = kernel // 2
        self.demodulate = demodulate
        self.eps = eps

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        s = self.affine(style)  # (B, in_ch)
        weight = self.weight * self.scale
        out = F.conv2d(x * s[:, :, None, None], weight, padding=self.padding)
        if self.demodulate:
            # ||s_i * w_oi.||_2 per output channel, as if the kernel were scaled
            wsq = weight.pow(2).sum(dim=(2, 3))  # (out_ch, in_ch)
            demod = torch.rsqrt(s.pow(2) @ wsq.t() + self.eps)  # (B, out_ch)
            out = out * demod[:, :, None, None]
        return out


class StyledConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, style_dim: int, eps: float = 1e-8):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, kernel, style_dim, demodulate=True, eps=eps)
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return fused_leaky_relu(self.conv(x, style), self.bias)


class RenderHead(nn.Module):
    """1x1 modulated convolution without demodulation, used for the per-block
    RGB outputs and (with out_ch=1 and zero initialization) the mask logits."""

    def __init__(self, in_ch: int, style_dim: int, out_ch: int = 3, zero_init: bool = False):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(out_ch))
        if zero_init:
            nn.init.zeros_(self.conv.weight)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return self.conv(x, style) + self.bias.view(1, -1, 1, 1)
