"""Multi-task identity/attribute learning with MMD-based feature alignment."""

from .errors import MMFAError
from .kernels import FeatureBatch, KernelSpec, gram_matrix, mmd2_biased, rbf_kernel
from .losses import (
    LossReport,
    LossWeights,
    attribute_alignment_loss,
    attribute_loss,
    deep_feature_alignment_loss,
    identity_loss,
    total_loss,
)
from .model import ExtractorConfig, HeadConfig, MMFAModel, ModelConfig, forward_all
from .tensor import (
    BNState,
    Param,
    Tape,
    Tensor,
    backward,
    batch_norm,
    conv2d,
    default_dtype,
    dropout,
    global_max_pool,
    leaky_relu,
    matmul,
    read_tensor_file,
    write_tensor_file,
)
from .trainer import SGD, TrainConfig, lr_at_epoch, train, train_step

__version__ = "0.1.0"

__all__ = [
    "MMFAError", "FeatureBatch", "KernelSpec", "gram_matrix", "mmd2_biased",
    "rbf_kernel", "LossReport", "LossWeights", "attribute_alignment_loss",
    "attribute_loss", "deep_feature_alignment_loss", "identity_loss",
    "total_loss", "ExtractorConfig", "HeadConfig", "MMFAModel", "ModelConfig",
    "forward_all", "BNState", "Param", "Tape", "Tensor", "backward",
    "batch_norm", "conv2d", "default_dtype", "dropout", "global_max_pool",
    "leaky_relu", "matmul", "read_tensor_file", "write_tensor_file", "SGD",
    "TrainConfig", "lr_at_epoch", "train", "train_step", "__version__",
]
