"""Model architecture: the style-modulated generator with per-resolution
attribute infusion, the attribute encoder, the identity embedder and its
style mapper, and the residual discriminator.

The generator follows the skip-connection design: a learned constant 4x4
input, two style-modulated 3x3 convolutions per resolution block, and an RGB
ladder where each block's 1x1 RGB output is added to the upsampled running
image. Instead of per-layer noise, each block receives a spatial attribute
map concatenated to its input features, so the target's pose, background,
lighting, and expression enter as spatial conditioning while identity enters
through the style vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import mask_branch
from .layers import ConvLayer, EqualConv2d, EqualLinear, RenderHead, StyledConv, upsample2x


def _default_channels() -> dict[int, int]:
    return {4: 128, 8: 128, 16: 64, 32: 64}


@dataclass
class GeneratorConfig:
    """Shape contract for the generator and both encoders.

    num_blocks is the number of resolution levels; the output resolution is
    4 * 2**(num_blocks - 1). Each block consumes one attribute map and two
    style rows, so a full style stack has 2 * num_blocks rows.
    """

    num_blocks: int = 4
    style_dim: int = 64
    channel_schedule: dict[int, int] = field(default_factory=_default_channels)
    attribute_channels: dict[int, int] | None = None
    demod_epsilon: float = 1e-8

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.style_dim < 1:
            raise ValueError("style_dim must be >= 1")
        if self.demod_epsilon <= 0:
            raise ValueError("demod_epsilon must be positive")
        if self.attribute_channels is None:
            self.attribute_channels = {r: max(1, c // 2) for r, c in self.channel_schedule.items()}
        for r in self.resolutions:
            if r not in self.channel_schedule:
                raise ValueError(f"channel_schedule missing resolution {r}")
            if r not in self.attribute_channels:
                raise ValueError(f"attribute_channels missing resolution {r}")

    @property
    def resolution(self) -> int:
        return 4 * 2 ** (self.num_blocks - 1)

    @property
    def resolutions(self) -> list[int]:
        return [4 * 2 ** l for l in range(self.num_blocks)]

    @property
    def num_style_slots(self) -> int:
        return 2 * self.num_blocks

    def to_dict(self) -> dict:
        return {
            "num_blocks": self.num_blocks,
            "style_dim": self.style_dim,
            "channel_schedule": {str(r): c for r, c in self.channel_schedule.items()},
            "attribute_channels": {str(r): c for r, c in self.attribute_channels.items()},
            "demod_epsilon": self.demod_epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(
            num_blocks=d["num_blocks"],
            style_dim=d["style_dim"],
            channel_schedule={int(r): c for r, c in d["channel_schedule"].items()},
            attribute_channels={int(r): c for r, c in d["attribute_channels"].items()},
            demod_epsilon=d["demod_epsilon"],
        )


@dataclass
class SwapOutput:
    """Generator result: the raw generated image, and when the mask branch is
    active, the mask pyramid plus the mask-blended composite."""

    image: torch.Tensor
    masks: mask_branch.MaskPyramid | None = None
    blended: torch.Tensor | None = None


def _check_image(img: torch.Tensor, resolution: int, who: str):
    if img.ndim != 4 or img.shape[1] != 3 or img.shape[-2:] != (resolution, resolution):
        raise ValueError(f"{who} expects (B, 3, {resolution}, {resolution}) input, got {tuple(img.shape)}")


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        C, A = config.channel_schedule, config.attribute_channels
        self.const = nn.Parameter(torch.randn(1, C[4], 4, 4))
        self.convs1 = nn.ModuleList()
        self.convs2 = nn.ModuleList()
        self.to_rgbs = nn.ModuleList()
        self.to_masks = nn.ModuleList()
        in_ch = C[4]
        for r in config.resolutions:
            self.convs1.append(StyledConv(in_ch + A[r], C[r], 3, config.style_dim, eps=config.demod_epsilon))
            self.convs2.append(StyledConv(C[r], C[r], 3, config.style_dim, eps=config.demod_epsilon))
            self.to_rgbs.append(RenderHead(C[r], config.style_dim, out_ch=3))
            self.to_masks.append(mask_branch.ToMask(C[r], config.style_dim))
            in_ch = C[r]

    def _broadcast_styles(self, styles: torch.Tensor) -> torch.Tensor:
        slots = self.config.num_style_slots
        if styles.ndim == 2:
            return styles.unsqueeze(1).expand(-1, slots, -1)
        if styles.ndim == 3:
            if styles.shape[1] != slots:
                raise ValueError(f"style stack must have {slots} rows, got {styles.shape[1]}")
            return styles
        raise ValueError(f"styles must be (B, style_dim) or (B, {slots}, style_dim)")

    def _check_pyramid(self, pyramid: list[torch.Tensor]):
        cfg = self.config
        if len(pyramid) != cfg.num_blocks:
            raise ValueError(f"attribute pyramid must have {cfg.num_blocks} maps, got {len(pyramid)}")
        for level, (fmap, r) in enumerate(zip(pyramid, cfg.resolutions), start=1):
            want = (cfg.attribute_channels[r], r, r)
            if tuple(fmap.shape[1:]) != want:
                raise ValueError(f"pyramid map {level} must be (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(fmap.shape)}")

    def forward(
        self,
        pyramid: list[torch.Tensor],
        styles: torch.Tensor,
        mask_enabled: bool = False,
        target: torch.Tensor | None = None,
    ) -> SwapOutput:
        self._check_pyramid(pyramid)
        styles = self._broadcast_styles(styles)
        batch = pyramid[0].shape[0]

        x = self.const.expand(batch, -1, -1, -1)
        skip = None
        raws: list[torch.Tensor] = []
        accums: list[torch.Tensor] = []
        accum = None
        for l in range(self.config.num_blocks):
            fmap = pyramid[l]
            if l > 0:
                x = upsample2x(x)
                if mask_enabled:
                    # gate with the mask state known so far, carried up to
                    # this block's resolution in pre-sigmoid space
                    gate = mask_branch.normalize(upsample2x(accum))
                    fmap = mask_branch.mask_attributes(fmap, gate, level=l + 1)
            x = torch.cat([x, fmap], dim=1)
            x = self.convs1[l](x, styles[:, 2 * l])
            x = self.convs2[l](x, styles[:, 2 * l + 1])
            rgb = self.to_rgbs[l](x, styles[:, 2 * l + 1])
            skip = rgb if skip is None else upsample2x(skip) + rgb
            if mask_enabled:
                raw = self.to_masks[l](x, styles[:, 2 * l + 1])
                accum = mask_branch.accumulate(accum, raw)
                raws.append(raw)
                accums.append(accum)

        image = torch.tanh(skip)
        if not mask_enabled:
            return SwapOutput(image=image)
        masks = mask_branch.MaskPyramid(raw=raws, accum=accums, norm=[mask_branch.normalize(a) for a in accums])
        blended = None
        if target is not None:
            _check_image(target, self.config.resolution, "blend target")
            blended = mask_branch.blend(masks.final, image, target)
        return SwapOutput(image=image, masks=masks, blended=blended)


class AttributeEncoder(nn.Module):
    """Strided conv pyramid over the target image, one output map per
    generator resolution (finest map at full resolution, coarsest at 4x4)."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        C, A = config.channel_schedule, config.attribute_channels
        res_desc = config.resolutions[::-1]
        self.from_rgb = ConvLayer(3, C[res_desc[0]], 3)
        self.downs = nn.ModuleList(
            [ConvLayer(C[r], C[r // 2], 3, stride=2) for r in res_desc[:-1]]
        )
        self.heads = nn.ModuleList(
            [EqualConv2d(C[r], A[r], 3, padding=1) for r in res_desc]
        )

    def forward(self, target: torch.Tensor) -> list[torch.Tensor]:
        _check_image(target, self.config.resolution, "attribute encoder")
        x = self.from_rgb(target)
        maps = [self.heads[0](x)]
        for down, head in zip(self.downs, self.heads[1:]):
            x = down(x)
            maps.append(head(x))
        return maps[::-1]


class IdentityEmbedder(nn.Module):
    """Small convolutional embedder producing a unit-norm identity vector.

    Pre-trained on synthetic identities with a cosine-softmax classifier and
    frozen afterwards; downstream losses differentiate through its input only.
    """

    def __init__(self, resolution: int, embed_dim: int = 64, base_width: int = 32):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1) != 0:
            raise ValueError("resolution must be a power of two >= 8")
        self.resolution = resolution
        self.embed_dim = embed_dim
        widths = [base_width * min(2 ** i, 4) for i in range(int(math.log2(resolution // 4)) + 1)]
        self.stem = ConvLayer(3, widths[0], 3)
        self.downs = nn.ModuleList(
            [ConvLayer(widths[i], widths[i + 1], 3, stride=2) for i in range(len(widths) - 1)]
        )
        self.head = EqualLinear(widths[-1], embed_dim)

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage activations, used as a perceptual distance."""
        _check_image(img, self.resolution, "identity embedder")
        x = self.stem(img)
        feats = [x]
        for down in self.downs:
            x = down(x)
            feats.append(x)
        return feats

    def raw_embedding(self, img: torch.Tensor) -> torch.Tensor:
        """Head output before normalization; distribution statistics keep the
        magnitude information that the unit-norm identity vector discards."""
        x = self.features(img)[-1]
        return self.head(x.mean(dim=(2, 3)))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.raw_embedding(img), dim=1)


class StyleMapper(nn.Module):
    """Two fully connected layers mapping an identity embedding to a style vector."""

    def __init__(self, embed_dim: int, style_dim: int):
        super().__init__()
        self.fc1 = EqualLinear(embed_dim, style_dim)
        self.fc2 = EqualLinear(style_dim, style_dim)

    def forward(self, f_id: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.leaky_relu(self.fc1(f_id), 0.2) * math.sqrt(2))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = ConvLayer(in_ch, in_ch, 3)
        self.conv2 = ConvLayer(in_ch, out_ch, 3, stride=2)
        self.skip = EqualConv2d(in_ch, out_ch, 1, stride=2, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (self.conv2(self.conv1(x)) + self.skip(x)) / math.sqrt(2)


class Discriminator(nn.Module):
    """Residual discriminator; exposes one feature map per resolution plus the
    final pre-logit vector for the feature-matching loss."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        C = config.channel_schedule
        res_desc = config.resolutions[::-1]
        self.from_rgb = ConvLayer(3, C[res_desc[0]], 3)
        self.blocks = nn.ModuleList([ResBlock(C[r], C[r // 2]) for r in res_desc[:-1]])
        self.final_conv = ConvLayer(C[4], C[4], 3)
        self.final_fc = EqualLinear(C[4] * 4 * 4, C[4])
        self.logit = EqualLinear(C[4], 1)

    def forward(self, img: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        _check_image(img, self.config.resolution, "discriminator")
        x = self.from_rgb(img)
        feats = [x]
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        x = self.final_conv(x)
        vec = F.leaky_relu(self.final_fc(x.flatten(1)), 0.2) * math.sqrt(2)
        feats.append(vec)
        return self.logit(vec).squeeze(1), feats


class SwapModel(nn.Module):
    """All networks of the swapping system in one container.

    The identity embedder is a pre-trained, frozen component: load its weights
    and call freeze_identity() before training anything else.
    """

    def __init__(self, config: GeneratorConfig, embed_dim: int = 64, id_width: int = 32):
        super().__init__()
        self.config = config
        self.generator = Generator(config)
        self.attribute_encoder = AttributeEncoder(config)
        self.identity_embedder = IdentityEmbedder(config.resolution, embed_dim, id_width)
        self.style_mapper = StyleMapper(embed_dim, config.style_dim)
        self.discriminator = Discriminator(config)

    def freeze_identity(self):
        self.identity_embedder.requires_grad_(False)

    def identity_style(self, source: torch.Tensor) -> torch.Tensor:
        return self.style_mapper(self.identity_embedder(source))

    def swap(self, source: torch.Tensor, target: torch.Tensor, mask_enabled: bool = False) -> SwapOutput:
        """Generate target's frame wearing source's identity."""
        w = self.identity_style(source)
        pyramid = self.attribute_encoder(target)
        return self.generator(pyramid, w, mask_enabled=mask_enabled, target=target)

    def generator_parameters(self):
        """Everything trained against the adversary: generator (with mask
        heads), attribute encoder, and style mapper. Excludes the frozen
        identity embedder."""
        for module in (self.generator, self.attribute_encoder, self.style_mapper):
            yield from module.parameters()
