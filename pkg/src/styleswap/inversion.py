"""Identity-guided style inversion on a frozen model.

Starting from the mapped source style, the style rows are optimized so that a
round trip survives identity replacement: each iteration swaps a random
distractor identity onto the source frame, swaps the source styles back onto
that intermediate, and asks the result to match the source in pixels and
identity. Cycling through fresh distractors prevents the styles from
collapsing into a reconstruction code for one specific image.

One-to-one keeps whichever iterate best preserves identity on a concrete
target; one-to-many simply returns the final iterate for use on any target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses
from .networks import SwapModel
from .training import to_tensor

_TAG_POOL = 0xD1


@dataclass
class InversionConfig:
    iterations: int | None = None  # defaults: 200 one-to-one, 50 one-to-many
    step_size: float = 0.01
    space: str = "w_plus"  # "w" ties all rows to one vector
    lambda_rec: float = 100.0
    lambda_id: float = 10.0
    pool: np.ndarray | torch.Tensor | None = None  # distractor images
    seed: int = 0
    mask_enabled: bool = True

    def __post_init__(self):
        if self.space not in ("w", "w_plus"):
            raise ValueError(f"space must be 'w' or 'w_plus', got {self.space!r}")
        if self.iterations is not None and self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class IterationRecord:
    iteration: int  # 1-based optimization step index
    rec: float
    id_cycle: float
    id_target: float | None = None  # one-to-one only

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "rec": self.rec, "id_cycle": self.id_cycle, "id_target": self.id_target}


@dataclass
class InversionResult:
    """styles has shape (2L, style_dim) in w_plus space or (style_dim,) in w
    space. For one-to-one, best_iteration names the kept iterate: 1 is the
    initialization, n > 1 the styles after n-1 updates."""

    styles: torch.Tensor
    space: str
    trace: list[IterationRecord] = field(default_factory=list)
    best_iteration: int | None = None
    target_id_losses: list[float] = field(default_factory=list)  # one value per candidate iterate


def _pool_tensor(pool) -> torch.Tensor:
    if pool is None:
        raise ValueError("a distractor pool is required when iterations > 0")
    if isinstance(pool, torch.Tensor):
        t = pool
    else:
        t = to_tensor(np.asarray(pool))
    if t.ndim != 4 or t.shape[0] < 1:
        raise ValueError("pool must contain at least one image")
    return t


def _freeze(model: SwapModel) -> dict[str, bool]:
    flags = {n: p.requires_grad for n, p in model.named_parameters()}
    model.requires_grad_(False)
    return flags


def _restore(model: SwapModel, flags: dict[str, bool]):
    for n, p in model.named_parameters():
        p.requires_grad_(flags[n])


def init_styles(model: SwapModel, source: torch.Tensor, space: str) -> torch.Tensor:
    """Mapped source style, replicated across all rows for w_plus space."""
    with torch.no_grad():
        w = model.identity_style(source)  # (1, style_dim)
    if space == "w":
        return w.clone().requires_grad_(True)
    stack = w.unsqueeze(1).repeat(1, model.config.num_style_slots, 1)
    return stack.clone().requires_grad_(True)


def generate_with_styles(model: SwapModel, target: torch.Tensor, styles: torch.Tensor, mask_enabled: bool) -> torch.Tensor:
    """Swap using explicit style rows instead of a mapped source image."""
    pyramid = model.attribute_encoder(target)
    out = model.generator(pyramid, styles, mask_enabled=mask_enabled, target=target if mask_enabled else None)
    return out.blended if mask_enabled else out.image


def inversion_objective(
    model: SwapModel,
    styles: torch.Tensor,
    source: torch.Tensor,
    f_source: torch.Tensor,
    distractor: torch.Tensor,
    config: InversionConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Build the round trip through one distractor and score it against the
    source. Returns (objective, rec_term, id_term)."""
    with torch.no_grad():
        w_r = model.identity_style(distractor)
        intermediate = generate_with_styles(model, source, w_r, config.mask_enabled)
    cycle = generate_with_styles(model, intermediate, styles, config.mask_enabled)
    rec = losses.rec_loss(cycle, source, model.identity_embedder)
    idt = losses.id_loss(f_source, cycle, model.identity_embedder)
    return config.lambda_rec * rec + config.lambda_id * idt, rec, idt


def inversion_step(
    styles: torch.Tensor,
    source: torch.Tensor,
    distractor: torch.Tensor,
    model: SwapModel,
    optimizer: torch.optim.Optimizer,
    config: InversionConfig,
    f_source: torch.Tensor | None = None,
) -> tuple[float, float]:
    """One optimizer step on the styles alone; returns (rec, id_cycle)."""
    if f_source is None:
        with torch.no_grad():
            f_source = model.identity_embedder(source)
    optimizer.zero_grad(set_to_none=True)
    objective, rec, idt = inversion_objective(model, styles, source, f_source, distractor, config)
    objective.backward()
    optimizer.step()
    return float(rec.detach()), float(idt.detach())


def _target_id_loss(model: SwapModel, styles: torch.Tensor, target: torch.Tensor, f_source: torch.Tensor, mask_enabled: bool) -> float:
    with torch.no_grad():
        swap = generate_with_styles(model, target, styles, mask_enabled)
        return float(losses.id_loss(f_source, swap, model.identity_embedder))


def _run(
    model: SwapModel,
    source: torch.Tensor,
    config: InversionConfig,
    iterations: int,
    target: torch.Tensor | None,
) -> InversionResult:
    flags = _freeze(model)
    try:
        styles = init_styles(model, source, config.space)
        with torch.no_grad():
            f_source = model.identity_embedder(source)
        optimizer = torch.optim.Adam([styles], lr=config.step_size, betas=(0.9, 0.999))
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, _TAG_POOL)))
        pool = _pool_tensor(config.pool) if iterations > 0 else None

        track = target is not None
        trace: list[IterationRecord] = []
        target_losses: list[float] = []
        best_value, best_iteration, best_styles = np.inf, None, None
        for n in range(1, iterations + 1):
            # candidate n is the pre-update iterate; n = 1 is the initialization
            if track:
                value = _target_id_loss(model, styles, target, f_source, config.mask_enabled)
                target_losses.append(value)
                if value < best_value:
                    best_value, best_iteration = value, n
                    best_styles = styles.detach().clone()
            distractor = pool[int(rng.integers(pool.shape[0]))][None]
            rec, id_cycle = inversion_step(styles, source, distractor, model, optimizer, config, f_source)
            trace.append(
                IterationRecord(iteration=n, rec=rec, id_cycle=id_cycle, id_target=target_losses[-1] if track else None)
            )

        if track:
            if iterations == 0:
                best_styles, best_iteration = styles.detach().clone(), 1
                target_losses.append(_target_id_loss(model, styles, target, f_source, config.mask_enabled))
            final = best_styles
        else:
            final = styles.detach().clone()
            best_iteration = None
        return InversionResult(
            styles=final.squeeze(0),
            space=config.space,
            trace=trace,
            best_iteration=best_iteration,
            target_id_losses=target_losses,
        )
    finally:
        _restore(model, flags)


def invert_one_to_one(source: torch.Tensor, target: torch.Tensor, config: InversionConfig, model: SwapModel) -> InversionResult:
    """Optimize styles for one concrete source-target pair, returning the
    iterate with the lowest identity loss on the target swap (the
    initialization is always a candidate, so the result never loses to it)."""
    iterations = 200 if config.iterations is None else config.iterations
    return _run(model, source, config, iterations, target)


def invert_one_to_many(source: torch.Tensor, config: InversionConfig, model: SwapModel) -> InversionResult:
    """Optimize styles usable against any target; returns the final iterate."""
    iterations = 50 if config.iterations is None else config.iterations
    return _run(model, source, config, iterations, None)


def best_candidate_index(target_id_losses: list[float]) -> int:
    """1-based index of the first minimum; index 1 is the initialization."""
    if not target_id_losses:
        raise ValueError("no candidate evaluations")
    return int(np.argmin(target_id_losses)) + 1
