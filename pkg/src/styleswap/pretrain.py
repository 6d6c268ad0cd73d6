"""Pre-training for the auxiliary networks.

The identity embedder is trained as a cosine-softmax classifier over a
synthetic identity corpus disjoint from any swap-training data, with color
jitter so it keys on stable identity factors instead of lighting. It is
frozen before swap training starts. The same routine with a different seed
and width produces the independent embedder used only for evaluation.

The yaw regressor gives evaluation an oracle-free pose readout; it is fit on
clean renders with known yaw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ckpt
from .layers import ConvLayer, EqualLinear
from .networks import IdentityEmbedder
from .synth import DatasetSpec, SyntheticDataset
from .training import color_jitter, jitter_stream, to_tensor

_TAG_PRETRAIN = 0x1DE


def _batch_stream(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _TAG_PRETRAIN, step)))


@dataclass
class EmbedderPretrainConfig:
    resolution: int = 32
    embed_dim: int = 64
    width: int = 32
    num_identities: int = 100
    frames_per_identity: int = 8
    steps: int = 1200
    batch_size: int = 64
    learning_rate: float = 1e-3
    logit_scale: float = 16.0
    cosine_margin: float = 0.0
    pair_weight: float = 0.0
    seed: int = 0
    dataset_seed: int = 9000

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("need at least two identities to separate")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.cosine_margin < 1.0:
            raise ValueError("cosine_margin must lie in [0, 1)")
        if self.pair_weight < 0.0:
            raise ValueError("pair_weight must be >= 0")


def embedding_margin(
    embedder: IdentityEmbedder, dataset: SyntheticDataset, frames: int = 2
) -> tuple[float, float]:
    """(mean intra-identity cosine, mean inter-identity cosine) on frames the
    classifier never saw."""
    ids = dataset.num_identities
    held = np.stack(
        [[dataset.held_out_frame(i, k).image for k in range(frames)] for i in range(ids)]
    )  # (ids, frames, H, W, 3)
    with torch.no_grad():
        embs = torch.stack([embedder(to_tensor(held[:, k])) for k in range(frames)], dim=1)
    intra = []
    for a in range(frames):
        for b in range(a + 1, frames):
            intra.append((embs[:, a] * embs[:, b]).sum(dim=1))
    first = embs[:, 0]
    sims = first @ first.t()
    off_diagonal = sims[~torch.eye(ids, dtype=torch.bool)]
    return float(torch.cat(intra).mean()), float(off_diagonal.mean())


def pretrain_identity_embedder(
    config: EmbedderPretrainConfig, log_fn=None
) -> tuple[IdentityEmbedder, dict]:
    """Train, freeze, and report separation statistics.

    Returns (embedder, stats) where stats holds the final classifier loss and
    the held-out intra/inter cosine means.
    """
    spec = DatasetSpec(
        num_identities=config.num_identities,
        frames_per_identity=config.frames_per_identity,
        resolution=config.resolution,
        seed=config.dataset_seed,
    )
    dataset = SyntheticDataset.generate(spec)

    torch.manual_seed(config.seed)
    embedder = IdentityEmbedder(config.resolution, config.embed_dim, config.width)
    class_weights = nn.Parameter(torch.randn(config.num_identities, config.embed_dim))
    optimizer = torch.optim.Adam(
        list(embedder.parameters()) + [class_weights], lr=config.learning_rate
    )

    loss_value = float("nan")
    for step in range(config.steps):
        rng = _batch_stream(config.seed, step)
        ids = rng.integers(config.num_identities, size=config.batch_size)
        frames = rng.integers(config.frames_per_identity, size=config.batch_size)
        jrng = jitter_stream(config.seed, step)
        images = color_jitter(to_tensor(dataset.images[ids, frames]), jrng)

        emb = embedder(images)
        labels = torch.from_numpy(ids.astype(np.int64))
        cosines = emb @ F.normalize(class_weights, dim=1).t()
        if config.cosine_margin > 0.0:
            # Additive cosine margin: the true class must win by a gap, which
            # pulls every frame of an identity toward a tight cluster instead
            # of merely past the decision boundary.
            cosines = cosines - config.cosine_margin * F.one_hot(
                labels, config.num_identities
            )
        logits = config.logit_scale * cosines
        loss = F.cross_entropy(logits, labels)
        if config.pair_weight > 0.0:
            # second frames of the same identities; pulling the two embeddings
            # together optimizes cross-frame cosine directly, which the
            # classifier alone does not reward past its decision margin
            frames_b = rng.integers(config.frames_per_identity, size=config.batch_size)
            images_b = color_jitter(to_tensor(dataset.images[ids, frames_b]), jrng)
            emb_b = embedder(images_b)
            loss = loss + config.pair_weight * (1.0 - (emb * emb_b).sum(dim=1)).mean()
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        loss_value = float(loss.detach())
        if log_fn is not None and step % 100 == 0:
            log_fn({"step": step, "classifier_loss": loss_value})

    embedder.requires_grad_(False)
    embedder.eval()
    intra, inter = embedding_margin(embedder, dataset)
    stats = {
        "classifier_loss": loss_value,
        "intra_cosine": intra,
        "inter_cosine": inter,
        "margin": intra - inter,
    }
    return embedder, stats


def evaluation_embedder_config(base: EmbedderPretrainConfig | None = None) -> EmbedderPretrainConfig:
    """Companion configuration guaranteeing independence from the training
    embedder: different init seed, different corpus, different width."""
    base = base or EmbedderPretrainConfig()
    return EmbedderPretrainConfig(
        resolution=base.resolution,
        embed_dim=base.embed_dim,
        width=base.width + 16,
        num_identities=base.num_identities,
        frames_per_identity=base.frames_per_identity,
        steps=base.steps,
        batch_size=base.batch_size,
        learning_rate=base.learning_rate,
        logit_scale=base.logit_scale,
        cosine_margin=base.cosine_margin,
        pair_weight=base.pair_weight,
        seed=base.seed + 101,
        dataset_seed=base.dataset_seed + 7,
    )


class YawRegressor(nn.Module):
    """Strided conv stack regressing head yaw in radians from one image."""

    def __init__(self, resolution: int, width: int = 24):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1) != 0:
            raise ValueError("resolution must be a power of two >= 8")
        self.resolution = resolution
        layers: list[nn.Module] = [ConvLayer(3, width, 3)]
        size = resolution
        channels = width
        while size > 4:
            layers.append(ConvLayer(channels, min(channels * 2, 96), 3, stride=2))
            channels = min(channels * 2, 96)
            size //= 2
        self.body = nn.Sequential(*layers)
        self.head = EqualLinear(channels, 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = self.body(img)
        return self.head(x.mean(dim=(2, 3)))


@dataclass
class YawPretrainConfig:
    resolution: int = 32
    steps: int = 1400
    batch_size: int = 64
    learning_rate: float = 2e-3
    train_samples: int = 4000
    seed: int = 0
    dataset_seed: int = 9100

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.train_samples < 1:
            raise ValueError("steps, batch_size, train_samples must be positive")


def _render_corpus(spec_seed: int, count: int, resolution: int, frames_per_identity: int = 6):
    """Random renders with their ground-truth yaw, as one fixed array pair."""
    num_ids = (count + frames_per_identity - 1) // frames_per_identity
    spec = DatasetSpec(
        num_identities=max(num_ids, 2),
        frames_per_identity=frames_per_identity,
        resolution=resolution,
        seed=spec_seed,
    )
    dataset = SyntheticDataset.generate(spec)
    images = dataset.images.reshape(-1, resolution, resolution, 3)[:count]
    yaws = np.array(
        [dataset.attributes[i][f].yaw for i in range(dataset.num_identities) for f in range(dataset.frames_per_identity)],
        dtype=np.float32,
    )[:count]
    return images, yaws


def pretrain_yaw_regressor(config: YawPretrainConfig, log_fn=None) -> tuple[YawRegressor, dict]:
    """Fit the regressor and report held-out mean absolute error in radians."""
    images, yaws = _render_corpus(config.dataset_seed, config.train_samples, config.resolution)
    held_images, held_yaws = _render_corpus(config.dataset_seed + 1, 256, config.resolution)

    torch.manual_seed(config.seed)
    model = YawRegressor(config.resolution)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    for step in range(config.steps):
        rng = _batch_stream(config.seed + 1, step)
        idx = rng.integers(images.shape[0], size=config.batch_size)
        pred = model(to_tensor(images[idx])).squeeze(-1)
        loss = F.mse_loss(pred, torch.from_numpy(yaws[idx]))
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if log_fn is not None and step % 100 == 0:
            log_fn({"step": step, "yaw_mse": float(loss.detach())})

    model.requires_grad_(False)
    model.eval()
    with torch.no_grad():
        pred = model(to_tensor(held_images)).squeeze(-1).numpy()
    mae = float(np.mean(np.abs(pred - held_yaws)))
    return model, {"held_out_mae": mae}


def save_embedder(path: str, embedder: IdentityEmbedder, config: EmbedderPretrainConfig, stats: dict):
    arrays = {name: p.detach().numpy() for name, p in embedder.state_dict().items()}
    header = {
        "kind": "identity_embedder",
        "resolution": embedder.resolution,
        "embed_dim": embedder.embed_dim,
        "width": config.width,
        "stats": stats,
    }
    ckpt.save_arrays(path, arrays, header)


def load_embedder(path: str) -> tuple[IdentityEmbedder, dict]:
    arrays, header = ckpt.load_arrays(path)
    if header.get("kind") != "identity_embedder":
        raise ValueError(f"not an identity embedder checkpoint: {path}")
    embedder = IdentityEmbedder(header["resolution"], header["embed_dim"], header["width"])
    embedder.load_state_dict({name: torch.from_numpy(arr) for name, arr in arrays.items()})
    embedder.requires_grad_(False)
    embedder.eval()
    return embedder, header
