"""Metrics for judging swaps on the synthetic face corpus.

Identity transfer is scored with an embedder trained independently of the one
used for the training losses, so a model cannot pass by gaming its own loss
network. Attribute preservation exploits the corpus construction directly:
corners are always background, so background hue is read off the pixels, and
head yaw is recovered by a small regressor trained on clean renders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .synth import SyntheticDataset
from .training import to_tensor

_TAG_EVAL = 0xEA


def _image_hwc(image) -> np.ndarray:
    """Accept (H, W, 3) arrays or (3, H, W) / (1, 3, H, W) tensors."""
    if isinstance(image, torch.Tensor):
        t = image.detach()
        if t.ndim == 4:
            if t.shape[0] != 1:
                raise ValueError("expected a single image")
            t = t[0]
        return t.permute(1, 2, 0).numpy()
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3), got {arr.shape}")
    return arr


def rgb_to_hue(rgb: np.ndarray) -> np.ndarray:
    """Hue in [0, 1) for (..., 3) arrays of RGB in [0, 1]; gray maps to 0."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    cmax = rgb.max(axis=-1)
    delta = cmax - rgb.min(axis=-1)
    safe = np.where(delta == 0.0, 1.0, delta)
    hue = np.where(
        cmax == r,
        (g - b) / safe,
        np.where(cmax == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe),
    )
    hue = np.where(delta == 0.0, 0.0, hue / 6.0)
    return np.mod(hue, 1.0)


def circular_hue_distance(a, b) -> np.ndarray:
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 1.0
    return np.minimum(d, 1.0 - d)


def background_hue(image) -> float:
    """Hue of the mean corner pixel; corners never intersect the head."""
    hwc = _image_hwc(image)
    corners = np.stack([hwc[0, 0], hwc[0, -1], hwc[-1, 0], hwc[-1, -1]])
    mean_rgb = np.clip((corners.mean(axis=0) + 1.0) / 2.0, 0.0, 1.0)
    return float(rgb_to_hue(mean_rgb))


def id_metrics(
    swap_images: torch.Tensor,
    source_ids: list[int],
    gallery_images: torch.Tensor,
    gallery_ids: list[int],
    embedder,
) -> tuple[float, float]:
    """Mean cosine to the source's gallery entry, and rank-1 retrieval rate
    over the whole gallery (one entry per identity)."""
    if swap_images.shape[0] != len(source_ids):
        raise ValueError("one source id per swap image required")
    if gallery_images.shape[0] != len(gallery_ids):
        raise ValueError("one identity label per gallery image required")
    if len(set(gallery_ids)) != len(gallery_ids):
        raise ValueError("gallery must hold exactly one image per identity")
    with torch.no_grad():
        emb_swap = embedder(swap_images)
        emb_gal = embedder(gallery_images)
    sims = (emb_swap @ emb_gal.t()).numpy()  # (num_swaps, gallery)
    column = {gid: k for k, gid in enumerate(gallery_ids)}
    cosines, hits = [], 0
    for row, sid in enumerate(source_ids):
        if sid not in column:
            raise ValueError(f"source identity {sid} missing from gallery")
        cosines.append(sims[row, column[sid]])
        if gallery_ids[int(np.argmax(sims[row]))] == sid:
            hits += 1
    return float(np.mean(cosines)), hits / len(source_ids)


def pose_error(swap_images: torch.Tensor, target_yaws, pose_model) -> float:
    with torch.no_grad():
        pred = pose_model(swap_images).squeeze(-1).numpy()
    return float(np.mean(np.abs(pred - np.asarray(target_yaws, dtype=np.float64))))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric square root; tiny negative eigenvalues from finite samples
    are clamped to zero."""
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def toy_fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets (N, D)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be (N, D) with matching D")
    dim = a.shape[1]
    for name, x in (("first", a), ("second", b)):
        if x.shape[0] < dim + 1:
            raise ValueError(f"{name} feature set needs at least D + 1 = {dim + 1} samples, got {x.shape[0]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(value, 0.0)


def fid_features(images: torch.Tensor, embedder) -> np.ndarray:
    """Pre-normalization embedding vectors as (N, D) float64."""
    with torch.no_grad():
        return embedder.raw_embedding(images).double().numpy()


def mask_iou(predicted, reference, threshold: float = 0.5) -> float:
    """IoU after thresholding the prediction; two empty masks count as 1."""
    pred = predicted.detach().numpy() if isinstance(predicted, torch.Tensor) else np.asarray(predicted)
    ref = reference.detach().numpy() if isinstance(reference, torch.Tensor) else np.asarray(reference)
    pred = np.squeeze(pred)
    ref = np.squeeze(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    p = pred >= threshold
    r = ref >= threshold
    union = np.logical_or(p, r).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, r).sum() / union)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB between two [-1, 1] images, measured
    on the [0, 1] scale. Identical inputs give +inf."""
    x = a.detach().numpy() if isinstance(a, torch.Tensor) else np.asarray(a, dtype=np.float64)
    y = b.detach().numpy() if isinstance(b, torch.Tensor) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((np.asarray(x, dtype=np.float64) / 2.0 - np.asarray(y, dtype=np.float64) / 2.0) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class EvalReport:
    num_swaps: int
    id_cosine: float
    id_retrieval: float
    background_hue_err: float
    pose_err: float
    fid: float
    mask_iou_mean: float | None
    self_recon_psnr: float

    def to_dict(self) -> dict:
        return {
            "num_swaps": self.num_swaps,
            "id_cosine": self.id_cosine,
            "id_retrieval": self.id_retrieval,
            "background_hue_err": self.background_hue_err,
            "pose_err": self.pose_err,
            "fid": self.fid,
            "mask_iou_mean": self.mask_iou_mean,
            "self_recon_psnr": self.self_recon_psnr,
        }


def evaluate(
    model,
    dataset: SyntheticDataset,
    eval_embedder,
    pose_model,
    num_swaps: int = 200,
    seed: int = 0,
    mask_enabled: bool = True,
    held_out_per_identity: int = 2,
) -> EvalReport:
    """Full measurement pass over random cross-identity swaps.

    The gallery holds frame 0 of every identity. Swap pairs always cross
    identities; attribute errors compare against the target frame's known
    generative factors. The realism score compares swap features against an
    equally sized random sample of real frames.
    """
    if num_swaps < 1:
        raise ValueError("num_swaps must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((seed, _TAG_EVAL)))
    n_ids, n_fr = dataset.num_identities, dataset.frames_per_identity

    gallery_images = to_tensor(dataset.images[:, 0])
    gallery_ids = list(range(n_ids))

    swaps, preds_mask, refs_mask = [], [], []
    source_ids, bg_errs, yaws = [], [], []
    model.eval()
    with torch.no_grad():
        for _ in range(num_swaps):
            src_id = int(rng.integers(n_ids))
            tgt_id = int((src_id + 1 + rng.integers(n_ids - 1)) % n_ids)
            src = to_tensor(dataset.images[src_id, int(rng.integers(n_fr))])
            tgt_frame = int(rng.integers(n_fr))
            tgt = to_tensor(dataset.images[tgt_id, tgt_frame])
            out = model.swap(src, tgt, mask_enabled=mask_enabled)
            img = out.blended if mask_enabled else out.image
            swaps.append(img)
            source_ids.append(src_id)
            attr = dataset.attributes[tgt_id][tgt_frame]
            bg_errs.append(circular_hue_distance(background_hue(img), attr.background_hue))
            yaws.append(attr.yaw)
            if mask_enabled:
                preds_mask.append(mask_iou(out.masks.final[0, 0], dataset.masks[tgt_id, tgt_frame]))

        swap_batch = torch.cat(swaps, dim=0)
        cosine, retrieval = id_metrics(swap_batch, source_ids, gallery_images, gallery_ids, eval_embedder)
        pose = pose_error(swap_batch, yaws, pose_model)

        flat = dataset.images.reshape(-1, *dataset.images.shape[2:])
        real_idx = rng.choice(flat.shape[0], size=min(num_swaps, flat.shape[0]), replace=False)
        fid = toy_fid(fid_features(swap_batch, eval_embedder), fid_features(to_tensor(flat[real_idx]), eval_embedder))

        psnrs = []
        for identity in range(n_ids):
            for k in range(held_out_per_identity):
                held = dataset.held_out_frame(identity, k)
                img_t = to_tensor(held.image)
                out = model.swap(img_t, img_t, mask_enabled=mask_enabled)
                recon = out.blended if mask_enabled else out.image
                psnrs.append(psnr(recon, img_t))

    return EvalReport(
        num_swaps=num_swaps,
        id_cosine=cosine,
        id_retrieval=retrieval,
        background_hue_err=float(np.mean(bg_errs)),
        pose_err=pose,
        fid=fid,
        mask_iou_mean=float(np.mean(preds_mask)) if preds_mask else None,
        self_recon_psnr=float(np.mean(psnrs)),
    )
