"""Training loop: per-step assembly of the three supervision branches
(swap, self-reconstruction, same-identity cross-frame swap), alternating
discriminator/generator updates, color jitter on identity-encoder inputs,
lazy R1 regularization, the late mask-branch fine-tuning stage, and
bit-reproducible checkpointing.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import ckpt, losses, synth
from .networks import GeneratorConfig, SwapModel

_TAG_JITTER = 0xC0


def jitter_stream(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _TAG_JITTER, step)))


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(..., H, W, 3) float arrays in [-1, 1] to (B, 3, H, W) float32 tensors."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """(B, 3, H, W) tensors back to (B, H, W, 3) float32 arrays."""
    return tensor.detach().permute(0, 2, 3, 1).contiguous().numpy()


def mask_to_tensor(masks: np.ndarray) -> torch.Tensor:
    arr = np.asarray(masks, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(arr).unsqueeze(1)


def apply_jitter(
    images: torch.Tensor,
    brightness: torch.Tensor,
    contrast: torch.Tensor,
    saturation: torch.Tensor,
    hue: torch.Tensor,
) -> torch.Tensor:
    """Differentiable color jitter on [-1, 1] images.

    brightness adds, contrast scales about mid-gray (0), saturation scales the
    chroma about the luma, and hue rotates the RGB vector about the gray axis
    by hue * 2*pi. All-zero magnitudes give the identity transform; the result
    is clamped back to [-1, 1].
    """
    b = brightness.view(-1, 1, 1, 1).to(images.dtype)
    c = contrast.view(-1, 1, 1, 1).to(images.dtype)
    s = saturation.view(-1, 1, 1, 1).to(images.dtype)
    h = hue.view(-1, 1, 1, 1).to(images.dtype)

    x = images * (1.0 + c) + b
    r, g, bl = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    luma = 0.299 * r + 0.587 * g + 0.114 * bl
    x = luma + (x - luma) * (1.0 + s)

    # rotation about the (1,1,1)/sqrt(3) axis (Rodrigues formula)
    theta = h * (2.0 * math.pi)
    cos_t, sin_t = torch.cos(theta), torch.sin(theta)
    r, g, bl = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    dot = (r + g + bl) / 3.0  # u * (u . v) has equal components
    cross = torch.cat([bl - g, r - bl, g - r], dim=1) / math.sqrt(3.0)
    x = x * cos_t + cross * sin_t + dot.expand(-1, 3, -1, -1) * (1.0 - cos_t)
    return x.clamp(-1.0, 1.0)


def draw_jitter(rng: np.random.Generator, batch: int) -> tuple[torch.Tensor, ...]:
    mags = rng.uniform(-1.0, 1.0, size=(4, batch))
    return (
        torch.from_numpy(mags[0] * 0.2),
        torch.from_numpy(mags[1] * 0.2),
        torch.from_numpy(mags[2] * 0.2),
        torch.from_numpy(mags[3] * 0.05),
    )


def color_jitter(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Random brightness/contrast/saturation in +-0.2 and hue in +-0.05,
    drawn per batch element."""
    return apply_jitter(images, *draw_jitter(rng, images.shape[0]))


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    learning_rate: float = 1e-4
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    r1_interval: int = 16
    seed: int = 0
    mask_stage_start: int | None = None  # defaults to steps // 2
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.mask_stage_start is None:
            self.mask_stage_start = self.steps // 2
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.mask_stage_start <= self.steps:
            raise ValueError("mask_stage_start must lie in [0, steps]")
        if self.batch_size < 1 or self.r1_interval < 1 or self.checkpoint_interval < 1:
            raise ValueError("batch_size, r1_interval, checkpoint_interval must be >= 1")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "weights"}
        d.update(
            lambda_id=self.weights.lambda_id,
            lambda_fm=self.weights.lambda_fm,
            lambda_rec=self.weights.lambda_rec,
            lambda_mask=self.weights.lambda_mask,
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        weights = losses.LossWeights(
            lambda_id=d.pop("lambda_id", 10.0),
            lambda_fm=d.pop("lambda_fm", 100.0),
            lambda_rec=d.pop("lambda_rec", 100.0),
            lambda_mask=d.pop("lambda_mask", 1.0),
        )
        return cls(weights=weights, **d)


@dataclass
class TrainState:
    model: SwapModel
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    config: TrainConfig
    step: int = 0

    @property
    def mask_active(self) -> bool:
        return self.step >= self.config.mask_stage_start


def init_state(config: TrainConfig, gen_config: GeneratorConfig, embed_dim: int = 64, id_width: int = 32) -> TrainState:
    """Build a fresh model and optimizers; model init is seeded by the config."""
    # denormals cripple single-core throughput once gradients get small;
    # flushing them is deterministic and applies to resume runs identically
    torch.set_flush_denormal(True)
    torch.manual_seed(config.seed)
    model = SwapModel(gen_config, embed_dim=embed_dim, id_width=id_width)
    model.freeze_identity()
    opt_g = torch.optim.Adam(list(model.generator_parameters()), lr=config.learning_rate, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(list(model.discriminator.parameters()), lr=config.learning_rate, betas=(0.0, 0.99))
    return TrainState(model=model, opt_g=opt_g, opt_d=opt_d, config=config)


@dataclass
class BranchInputs:
    """The three branches of one step, stacked along the batch axis in the
    order: source-to-target swap, source self-reconstruction, cross-frame
    swap between two frames of the target identity."""

    pyramid: list[torch.Tensor]
    styles: torch.Tensor
    real: torch.Tensor
    mask_ref: torch.Tensor
    id_ref: torch.Tensor


def assemble_branches(model: SwapModel, batch: synth.PairBatch, jrng: np.random.Generator) -> BranchInputs:
    src = to_tensor(batch.source)
    tgt_a = to_tensor(batch.target_a)
    tgt_b = to_tensor(batch.target_b)
    with torch.no_grad():
        f_s = model.identity_embedder(color_jitter(src, jrng))
        f_ta = model.identity_embedder(color_jitter(tgt_a, jrng))
    w_s = model.style_mapper(f_s)
    w_ta = model.style_mapper(f_ta)
    pyr_tb = model.attribute_encoder(tgt_b)
    pyr_s = model.attribute_encoder(src)
    pyramid = [torch.cat([tb, s, tb]) for tb, s in zip(pyr_tb, pyr_s)]
    styles = torch.cat([w_s, w_s, w_ta])
    real = torch.cat([tgt_b, src, tgt_b])
    mask_ref = torch.cat([mask_to_tensor(batch.target_mask), mask_to_tensor(batch.source_mask), mask_to_tensor(batch.target_mask)])
    id_ref = torch.cat([f_s, f_s, f_ta])
    return BranchInputs(pyramid=pyramid, styles=styles, real=real, mask_ref=mask_ref, id_ref=id_ref)


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, report: losses.LossReport):
        super().__init__(f"non-finite loss at step {step}: {report.to_dict()}")
        self.step = step
        self.report = report


def train_step(state: TrainState, batch: synth.PairBatch) -> losses.LossReport:
    """One full optimization step: discriminator update, then generator-side
    update over all three branches. Returns the per-term loss record."""
    cfg = state.config
    model = state.model
    jrng = jitter_stream(cfg.seed, state.step)
    mask_on = state.mask_active

    inputs = assemble_branches(model, batch, jrng)
    out = model.generator(
        inputs.pyramid, inputs.styles, mask_enabled=mask_on, target=inputs.real if mask_on else None
    )
    fake = out.blended if mask_on else out.image

    # discriminator update on detached fakes, lazy R1 on schedule
    state.opt_d.zero_grad(set_to_none=True)
    logit_fake_d, _ = model.discriminator(fake.detach())
    run_r1 = state.step % cfg.r1_interval == 0
    real_d = inputs.real.detach().requires_grad_(True) if run_r1 else inputs.real
    logit_real, _ = model.discriminator(real_d)
    _, d_loss, r1 = losses.adv_losses(logit_real, logit_fake_d, real_images=real_d if run_r1 else None)
    (d_loss + r1).backward()
    state.opt_d.step()

    # generator-side update against the freshly updated discriminator
    state.opt_g.zero_grad(set_to_none=True)
    logit_fake, feats_fake = model.discriminator(fake)
    with torch.no_grad():
        _, feats_real = model.discriminator(inputs.real)
    adv_g = F.softplus(-logit_fake).mean()
    gen_jitter = draw_jitter(jrng, fake.shape[0])
    id_term = losses.id_loss(
        inputs.id_ref, fake, model.identity_embedder, augment=lambda x: apply_jitter(x, *gen_jitter)
    )
    fm = losses.fm_loss(feats_fake, feats_real)
    b = batch.source.shape[0]
    rec = losses.rec_loss(fake[b:], inputs.real[b:], model.identity_embedder)
    mask_term = losses.mask_loss(out.masks.final, inputs.mask_ref) if mask_on else None
    total = losses.total_loss(adv_g, id_term, fm, rec, mask_term, cfg.weights)
    total.backward()
    state.opt_g.step()

    report = losses.LossReport.from_parts(
        adv_g, id_term, fm, rec, mask_term, cfg.weights, d_adv=d_loss, r1=r1
    )
    state.step += 1
    if not all(math.isfinite(v) for v in report.to_dict().values() if v is not None):
        raise NonFiniteLoss(state.step - 1, report)
    return report


def _optimizer_arrays(opt: torch.optim.Adam, prefix: str) -> dict[str, np.ndarray]:
    arrays = {}
    params = opt.param_groups[0]["params"]
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        arrays[f"{prefix}/{i}/step"] = np.array(float(st["step"]), dtype=np.float64)
        arrays[f"{prefix}/{i}/exp_avg"] = st["exp_avg"].numpy()
        arrays[f"{prefix}/{i}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
    return arrays


def _restore_optimizer(opt: torch.optim.Adam, prefix: str, arrays: dict[str, np.ndarray]):
    params = opt.param_groups[0]["params"]
    for i, p in enumerate(params):
        key = f"{prefix}/{i}/step"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[key])),
            "exp_avg": torch.from_numpy(arrays[f"{prefix}/{i}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}/{i}/exp_avg_sq"].copy()),
        }


def save_checkpoint(state: TrainState, path: str):
    model = state.model
    arrays = {f"model/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    arrays.update(_optimizer_arrays(state.opt_g, "opt_g"))
    arrays.update(_optimizer_arrays(state.opt_d, "opt_d"))
    header = {
        "generator_config": model.config.to_dict(),
        "train_config": state.config.to_dict(),
        "step": state.step,
        "embed_dim": model.identity_embedder.embed_dim,
        "id_width": model.identity_embedder.stem.conv.weight.shape[0],
        "frozen": [f"identity_embedder.{n}" for n, _ in model.identity_embedder.named_parameters()],
    }
    ckpt.save_arrays(path, arrays, header)


def _model_from_arrays(arrays: dict[str, np.ndarray], header: dict) -> SwapModel:
    gen_config = GeneratorConfig.from_dict(header["generator_config"])
    model = SwapModel(gen_config, embed_dim=header["embed_dim"], id_width=header["id_width"])
    sd = {k.removeprefix("model/"): torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(sd)
    model.freeze_identity()
    return model


def load_model(path: str) -> tuple[SwapModel, dict]:
    """Rebuild just the model (no optimizers) from a checkpoint."""
    arrays, header = ckpt.load_arrays(path)
    return _model_from_arrays(arrays, header), header


def load_checkpoint(path: str) -> TrainState:
    # resumed runs must compute under the same denormal handling as the
    # original process, or step-for-step reproduction breaks
    torch.set_flush_denormal(True)
    arrays, header = ckpt.load_arrays(path)
    model = _model_from_arrays(arrays, header)
    config = TrainConfig.from_dict(header["train_config"])
    opt_g = torch.optim.Adam(list(model.generator_parameters()), lr=config.learning_rate, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(list(model.discriminator.parameters()), lr=config.learning_rate, betas=(0.0, 0.99))
    _restore_optimizer(opt_g, "opt_g", arrays)
    _restore_optimizer(opt_d, "opt_d", arrays)
    return TrainState(model=model, opt_g=opt_g, opt_d=opt_d, config=config, step=header["step"])


def write_sample_grid(state: TrainState, dataset: synth.SyntheticDataset, path: str, rows: int = 4):
    """Save a row-per-sample grid: source | target | generated | blended | mask."""
    from PIL import Image

    rng = np.random.default_rng(state.config.seed)
    batch = synth.make_pair_batch(dataset, rows, rng)
    src, tgt = to_tensor(batch.source), to_tensor(batch.target_b)
    with torch.no_grad():
        out = state.model.swap(src, tgt, mask_enabled=state.mask_active)
    gen = out.image
    blended = out.blended if out.blended is not None else gen
    mask = out.masks.final.expand(-1, 3, -1, -1) * 2 - 1 if out.masks is not None else torch.zeros_like(gen)
    cols = [src, tgt, gen, blended, mask]
    grid = torch.cat([torch.cat(list(c), dim=1) for c in cols], dim=2)  # stack rows, then columns
    img = ((to_image(grid[None])[0] + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def train(
    config: TrainConfig,
    dataset: synth.SyntheticDataset,
    gen_config: GeneratorConfig | None = None,
    embedder_state: dict | None = None,
    out_dir: str | None = None,
    resume_from: str | None = None,
    embed_dim: int = 64,
    id_width: int = 32,
    log_fn=None,
) -> TrainState:
    """Run the training loop to config.steps, optionally resuming.

    embedder_state: a state_dict for the pre-trained identity embedder; it is
    loaded before the first step and stays frozen throughout. out_dir, when
    given, receives log.jsonl, ckpt-<step>.bin, and samples-<step>.png.
    """
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        state.config = config
        for opt in (state.opt_g, state.opt_d):
            opt.param_groups[0]["lr"] = config.learning_rate
    else:
        if gen_config is None:
            gen_config = GeneratorConfig()
        state = init_state(config, gen_config, embed_dim=embed_dim, id_width=id_width)
        if embedder_state is not None:
            state.model.identity_embedder.load_state_dict(embedder_state)
            state.model.freeze_identity()

    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "log.jsonl"), "a")

    def emit(record: dict):
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
        if log_fn is not None:
            log_fn(record)

    try:
        while state.step < config.steps:
            step = state.step
            batch = synth.make_pair_batch(dataset, config.batch_size, synth.batch_stream(config.seed, step))
            try:
                report = train_step(state, batch)
            except NonFiniteLoss as err:
                emit({"step": err.step, "event": "non_finite", **err.report.to_dict()})
                raise
            emit({"step": step, **report.to_dict()})
            if out_dir is not None and state.step % config.checkpoint_interval == 0:
                save_checkpoint(state, os.path.join(out_dir, f"ckpt-{state.step}.bin"))
                write_sample_grid(state, dataset, os.path.join(out_dir, f"samples-{state.step}.png"))
        if out_dir is not None and config.steps > 0 and config.steps % config.checkpoint_interval != 0:
            save_checkpoint(state, os.path.join(out_dir, f"ckpt-{state.step}.bin"))
    finally:
        if log_file is not None:
            log_file.close()
    return state
