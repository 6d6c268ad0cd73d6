"""Procedural synthetic-face dataset with exact ground truth.

Every sample is rendered from two factor records: identity factors that are
constant for a given identity id (face hue, proportions, eye spacing, nose
length, brow angle) and attribute factors that vary per frame (in-plane
rotation, scale, background hue, brightness, mouth curve). The renderer is a
pure function of the factors, so identity, attributes, and the binary face
mask are all known exactly, and the whole dataset is reproducible bit-for-bit
from its spec.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

SUPERSAMPLE = 4  # anti-aliasing: renders on a 4x grid, box-averaged down

# stream tags keep identity / frame / batch randomness independent
_TAG_IDENTITY = 0x1D
_TAG_FRAME = 0xF0
_TAG_BATCH = 0xBA

_IDENTITY_RANGES = {
    "face_hue": (0.0, 1.0),
    "face_aspect": (0.7, 1.3),
    "eye_spacing": (0.2, 0.5),
    "nose_length": (0.1, 0.3),
    "brow_angle": (-0.3, 0.3),
}

_ATTRIBUTE_RANGES = {
    "yaw": (-0.5, 0.5),
    "scale": (0.8, 1.2),
    "background_hue": (0.0, 1.0),
    "brightness": (0.7, 1.3),
    "mouth_curve": (-1.0, 1.0),
}


@dataclass(frozen=True)
class IdentityFactors:
    """Person-specific factors; frames of one identity share these exactly."""

    face_hue: float
    face_aspect: float
    eye_spacing: float
    nose_length: float
    brow_angle: float
    identity_id: int

    def __post_init__(self):
        for name, (lo, hi) in _IDENTITY_RANGES.items():
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class AttributeFactors:
    """Frame-specific factors: pose, scale, background, lighting, expression."""

    yaw: float
    scale: float
    background_hue: float
    brightness: float
    mouth_curve: float

    def __post_init__(self):
        for name, (lo, hi) in _ATTRIBUTE_RANGES.items():
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


@dataclass
class RenderedSample:
    """One rendered frame: image in [-1, 1] (H, W, 3), binary face mask, factors."""

    image: np.ndarray
    mask: np.ndarray
    identity: IdentityFactors
    attributes: AttributeFactors


@dataclass(frozen=True)
class DatasetSpec:
    num_identities: int
    frames_per_identity: int
    resolution: int
    seed: int

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("num_identities must be >= 2")
        if self.frames_per_identity < 2:
            raise ValueError("frames_per_identity must be >= 2")
        _check_resolution(self.resolution)


def _check_resolution(resolution: int):
    if resolution < 16 or resolution & (resolution - 1) != 0:
        raise ValueError(f"resolution must be a power of two >= 16, got {resolution}")


def identity_stream(seed: int, identity_id: int) -> np.random.Generator:
    """Random stream for one identity, independent of every other stream."""
    return np.random.default_rng(np.random.SeedSequence((seed, _TAG_IDENTITY, identity_id)))


def frame_stream(seed: int, identity_id: int, frame_id: int) -> np.random.Generator:
    """Random stream for one frame's attributes."""
    return np.random.default_rng(np.random.SeedSequence((seed, _TAG_FRAME, identity_id, frame_id)))


def batch_stream(seed: int, step: int) -> np.random.Generator:
    """Random stream for one training batch draw."""
    return np.random.default_rng(np.random.SeedSequence((seed, _TAG_BATCH, step)))


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


def sample_identity(rng: np.random.Generator, identity_id: int) -> IdentityFactors:
    """Draw identity factors uniformly from their ranges."""
    return IdentityFactors(
        face_hue=_uniform(rng, *_IDENTITY_RANGES["face_hue"]),
        face_aspect=_uniform(rng, *_IDENTITY_RANGES["face_aspect"]),
        eye_spacing=_uniform(rng, *_IDENTITY_RANGES["eye_spacing"]),
        nose_length=_uniform(rng, *_IDENTITY_RANGES["nose_length"]),
        brow_angle=_uniform(rng, *_IDENTITY_RANGES["brow_angle"]),
        identity_id=identity_id,
    )


def sample_attributes(rng: np.random.Generator) -> AttributeFactors:
    """Draw frame attributes uniformly from their ranges."""
    return AttributeFactors(
        yaw=_uniform(rng, *_ATTRIBUTE_RANGES["yaw"]),
        scale=_uniform(rng, *_ATTRIBUTE_RANGES["scale"]),
        background_hue=_uniform(rng, *_ATTRIBUTE_RANGES["background_hue"]),
        brightness=_uniform(rng, *_ATTRIBUTE_RANGES["brightness"]),
        mouth_curve=_uniform(rng, *_ATTRIBUTE_RANGES["mouth_curve"]),
    )


FACE_RADIUS = 0.35  # face semi-radius as a fraction of image height, at scale 1

_BG_SAT, _BG_VAL = 0.40, 0.70
_FACE_SAT, _FACE_VAL = 0.45, 0.75
_EYE_RGB = (0.08, 0.08, 0.10)
_BROW_RGB = (0.10, 0.07, 0.05)
_MOUTH_RGB = (0.55, 0.15, 0.18)
_NOSE_SHADE = 0.78  # nose color = face color scaled by this


def render(identity: IdentityFactors, attributes: AttributeFactors, resolution: int) -> RenderedSample:
    """Rasterize one face onto a plain background.

    Drawing happens on a 4x supersampled grid and is box-averaged down, so
    edges are anti-aliased. The mask marks pixels whose supersample coverage
    of the face ellipse is at least one half; it is computed before the
    brightness multiplier, which only rescales colors.
    """
    _check_resolution(resolution)
    S = resolution * SUPERSAMPLE

    # pixel-center coordinates in units of image height, origin at center
    cs = (np.arange(S, dtype=np.float64) + 0.5) / S - 0.5
    x, y = np.meshgrid(cs, cs)  # x: column offset, y: row offset (downward)

    # rotate into face coordinates (in-plane rotation by yaw)
    cos_y, sin_y = np.cos(attributes.yaw), np.sin(attributes.yaw)
    u = cos_y * x + sin_y * y
    v = -sin_y * x + cos_y * y

    # normalize by the face semi-axes; the ellipse is the unit disc in (p, q)
    semi_x = FACE_RADIUS * attributes.scale * np.sqrt(identity.face_aspect)
    semi_y = FACE_RADIUS * attributes.scale / np.sqrt(identity.face_aspect)
    p = u / semi_x
    q = v / semi_y

    face = p * p + q * q <= 1.0

    # eyes: dark discs either side of the vertical axis
    es = identity.eye_spacing
    eye_r2 = 0.14 ** 2
    eyes = np.minimum((p - es) ** 2 + (q + 0.30) ** 2, (p + es) ** 2 + (q + 0.30) ** 2) <= eye_r2

    # brows: thin bars above the eyes, tilted by +/- brow_angle
    brows = np.zeros_like(face)
    cos_b, sin_b = np.cos(identity.brow_angle), np.sin(identity.brow_angle)
    for side in (-1.0, 1.0):
        dp = p - side * es
        dq = q + 0.52
        along = cos_b * dp + side * sin_b * dq
        across = -side * sin_b * dp + cos_b * dq
        brows |= (np.abs(along) <= 0.16) & (np.abs(across) <= 0.05)

    # nose: downward wedge from just below eye level
    nose_len = identity.nose_length * 2.0  # fraction of face height -> q units
    t = (q + 0.05) / nose_len
    nose = (t >= 0.0) & (t <= 1.0) & (np.abs(p) <= 0.02 + 0.08 * t)

    # mouth: curved band, bending with mouth_curve
    mp = p / 0.38
    in_span = np.abs(mp) <= 1.0
    q_mid = 0.62 - 0.12 * attributes.mouth_curve * (1.0 - mp * mp)
    mouth = in_span & (np.abs(q - q_mid) <= 0.055)

    bg_rgb = np.array(colorsys.hsv_to_rgb(attributes.background_hue, _BG_SAT, _BG_VAL))
    face_rgb = np.array(colorsys.hsv_to_rgb(identity.face_hue, _FACE_SAT, _FACE_VAL))

    img = np.empty((S, S, 3), dtype=np.float64)
    img[:] = bg_rgb
    # paint back-to-front; every feature sits strictly inside the ellipse
    img[face] = face_rgb
    img[face & nose] = face_rgb * _NOSE_SHADE
    img[face & eyes] = _EYE_RGB
    img[face & brows] = _BROW_RGB
    img[face & mouth] = _MOUTH_RGB

    img *= attributes.brightness
    np.clip(img, 0.0, 1.0, out=img)

    # box-average down to the target resolution
    R = resolution
    img = img.reshape(R, SUPERSAMPLE, R, SUPERSAMPLE, 3).mean(axis=(1, 3))
    coverage = face.astype(np.float64).reshape(R, SUPERSAMPLE, R, SUPERSAMPLE).mean(axis=(1, 3))
    mask = (coverage >= 0.5).astype(np.uint8)

    image = (img * 2.0 - 1.0).astype(np.float32)
    return RenderedSample(image=image, mask=mask, identity=identity, attributes=attributes)


@dataclass
class SyntheticDataset:
    """All frames of a generated dataset held in memory.

    images: (num_identities, frames, H, W, 3) float32 in [-1, 1]
    masks:  (num_identities, frames, H, W) uint8 in {0, 1}
    """

    spec: DatasetSpec
    identities: list[IdentityFactors]
    attributes: list[list[AttributeFactors]]
    images: np.ndarray
    masks: np.ndarray

    @classmethod
    def generate(cls, spec: DatasetSpec) -> "SyntheticDataset":
        identities = [
            sample_identity(identity_stream(spec.seed, i), i) for i in range(spec.num_identities)
        ]
        R = spec.resolution
        images = np.empty((spec.num_identities, spec.frames_per_identity, R, R, 3), dtype=np.float32)
        masks = np.empty((spec.num_identities, spec.frames_per_identity, R, R), dtype=np.uint8)
        attributes: list[list[AttributeFactors]] = []
        for i, ident in enumerate(identities):
            row = []
            for f in range(spec.frames_per_identity):
                attr = sample_attributes(frame_stream(spec.seed, i, f))
                sample = render(ident, attr, R)
                images[i, f] = sample.image
                masks[i, f] = sample.mask
                row.append(attr)
            attributes.append(row)
        return cls(spec=spec, identities=identities, attributes=attributes, images=images, masks=masks)

    @property
    def num_identities(self) -> int:
        return self.spec.num_identities

    @property
    def frames_per_identity(self) -> int:
        return self.spec.frames_per_identity

    def sample(self, identity_id: int, frame_id: int) -> RenderedSample:
        return RenderedSample(
            image=self.images[identity_id, frame_id],
            mask=self.masks[identity_id, frame_id],
            identity=self.identities[identity_id],
            attributes=self.attributes[identity_id][frame_id],
        )

    def held_out_frame(self, identity_id: int, index: int) -> RenderedSample:
        """Fresh frame of a known identity, disjoint from the stored frames."""
        attr = sample_attributes(frame_stream(self.spec.seed, identity_id, self.frames_per_identity + index))
        return render(self.identities[identity_id], attr, self.spec.resolution)


@dataclass
class PairBatch:
    """One training batch: a source frame plus two frames of one target identity.

    target_a and target_b share identity factors but differ in attributes,
    standing in for two frames of one video. target_mask belongs to target_b;
    source_mask to the source frame.
    """

    source: np.ndarray
    source_mask: np.ndarray
    target_a: np.ndarray
    target_b: np.ndarray
    target_mask: np.ndarray
    source_id: np.ndarray
    target_id: np.ndarray
    target_b_attributes: list[AttributeFactors] = field(default_factory=list)


def make_pair_batch(dataset: SyntheticDataset, batch_size: int, rng: np.random.Generator) -> PairBatch:
    """Sample (source, target_a, target_b) tuples uniformly.

    The source identity is drawn independently of the target identity, so the
    two coincide with probability 1 / num_identities. target_a and target_b
    are distinct frames of the target identity.
    """
    if dataset.frames_per_identity < 2:
        raise ValueError("need at least two frames per identity to draw target pairs")
    n_id, n_fr = dataset.num_identities, dataset.frames_per_identity
    src_id = rng.integers(0, n_id, size=batch_size)
    src_fr = rng.integers(0, n_fr, size=batch_size)
    tgt_id = rng.integers(0, n_id, size=batch_size)
    fr_a = rng.integers(0, n_fr, size=batch_size)
    off = rng.integers(1, n_fr, size=batch_size)
    fr_b = (fr_a + off) % n_fr  # distinct from fr_a by construction

    return PairBatch(
        source=dataset.images[src_id, src_fr],
        source_mask=dataset.masks[src_id, src_fr],
        target_a=dataset.images[tgt_id, fr_a],
        target_b=dataset.images[tgt_id, fr_b],
        target_mask=dataset.masks[tgt_id, fr_b],
        source_id=src_id,
        target_id=tgt_id,
        target_b_attributes=[dataset.attributes[i][f] for i, f in zip(tgt_id, fr_b)],
    )


def save_dataset(dataset: SyntheticDataset, out_dir: str):
    """Write the dataset as a directory tree of 8-bit PNGs plus factor records."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i in range(dataset.num_identities):
        img_dir = os.path.join(out_dir, "images", f"{i:04d}")
        msk_dir = os.path.join(out_dir, "masks", f"{i:04d}")
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(msk_dir, exist_ok=True)
        for f in range(dataset.frames_per_identity):
            img01 = (dataset.images[i, f] + 1.0) / 2.0
            img8 = np.round(img01 * 255.0).astype(np.uint8)
            Image.fromarray(img8).save(os.path.join(img_dir, f"{f:04d}.png"))
            Image.fromarray(dataset.masks[i, f] * 255).save(os.path.join(msk_dir, f"{f:04d}.png"))
            rec = {"identity_id": i, "frame_id": f}
            ident = asdict(dataset.identities[i])
            ident.pop("identity_id")
            rec.update(ident)
            rec.update(asdict(dataset.attributes[i][f]))
            records.append(rec)
    with open(os.path.join(out_dir, "factors.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    with open(os.path.join(out_dir, "spec.json"), "w") as fh:
        json.dump(asdict(dataset.spec), fh, indent=2)


def load_dataset(in_dir: str) -> SyntheticDataset:
    """Read a dataset written by save_dataset (8-bit quantized)."""
    from PIL import Image

    with open(os.path.join(in_dir, "spec.json")) as fh:
        spec = DatasetSpec(**json.load(fh))
    by_frame: dict[tuple[int, int], dict] = {}
    with open(os.path.join(in_dir, "factors.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            by_frame[(rec["identity_id"], rec["frame_id"])] = rec

    R = spec.resolution
    images = np.empty((spec.num_identities, spec.frames_per_identity, R, R, 3), dtype=np.float32)
    masks = np.empty((spec.num_identities, spec.frames_per_identity, R, R), dtype=np.uint8)
    identities, attributes = [], []
    for i in range(spec.num_identities):
        rec0 = by_frame[(i, 0)]
        identities.append(
            IdentityFactors(
                face_hue=rec0["face_hue"],
                face_aspect=rec0["face_aspect"],
                eye_spacing=rec0["eye_spacing"],
                nose_length=rec0["nose_length"],
                brow_angle=rec0["brow_angle"],
                identity_id=i,
            )
        )
        row = []
        for f in range(spec.frames_per_identity):
            rec = by_frame[(i, f)]
            row.append(
                AttributeFactors(
                    yaw=rec["yaw"],
                    scale=rec["scale"],
                    background_hue=rec["background_hue"],
                    brightness=rec["brightness"],
                    mouth_curve=rec["mouth_curve"],
                )
            )
            img8 = np.asarray(Image.open(os.path.join(in_dir, "images", f"{i:04d}", f"{f:04d}.png")))
            images[i, f] = img8.astype(np.float32) / 255.0 * 2.0 - 1.0
            msk8 = np.asarray(Image.open(os.path.join(in_dir, "masks", f"{i:04d}", f"{f:04d}.png")))
            masks[i, f] = (msk8 >= 128).astype(np.uint8)
        attributes.append(row)
    return SyntheticDataset(spec=spec, identities=identities, attributes=attributes, images=images, masks=masks)
