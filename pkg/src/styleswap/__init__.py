"""Style-based face swapping at desk scale.

A style-based generator adapted for identity/attribute swapping on a
procedurally generated synthetic-face dataset: per-resolution attribute
infusion, a mask branch that blends generated and target pixels, GAN
training with identity/reconstruction/feature-matching objectives, and
gradient-based identity inversion in an expanded style space.
"""

__version__ = "0.1.0"

from .evaluation import EvalReport, evaluate, mask_iou, psnr, toy_fid
from .inversion import (
    InversionConfig,
    InversionResult,
    invert_one_to_many,
    invert_one_to_one,
)
from .networks import GeneratorConfig, SwapModel
from .pretrain import (
    EmbedderPretrainConfig,
    YawPretrainConfig,
    load_embedder,
    pretrain_identity_embedder,
    pretrain_yaw_regressor,
    save_embedder,
)
from .synth import (
    AttributeFactors,
    DatasetSpec,
    IdentityFactors,
    RenderedSample,
    SyntheticDataset,
    make_pair_batch,
    render,
    sample_attributes,
    sample_identity,
)
from .training import (
    TrainConfig,
    TrainState,
    init_state,
    load_checkpoint,
    load_model,
    save_checkpoint,
    train,
    train_step,
)

__all__ = [
    "AttributeFactors",
    "DatasetSpec",
    "EmbedderPretrainConfig",
    "EvalReport",
    "GeneratorConfig",
    "IdentityFactors",
    "InversionConfig",
    "InversionResult",
    "RenderedSample",
    "SwapModel",
    "SyntheticDataset",
    "TrainConfig",
    "TrainState",
    "YawPretrainConfig",
    "evaluate",
    "init_state",
    "invert_one_to_many",
    "invert_one_to_one",
    "load_checkpoint",
    "load_embedder",
    "load_model",
    "make_pair_batch",
    "mask_iou",
    "pretrain_identity_embedder",
    "pretrain_yaw_regressor",
    "psnr",
    "render",
    "sample_attributes",
    "sample_identity",
    "save_checkpoint",
    "save_embedder",
    "toy_fid",
    "train",
    "train_step",
    "__version__",
]
