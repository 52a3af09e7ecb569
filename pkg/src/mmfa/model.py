"""Shared-weight two-stream network: conv extractor -> global max pool -> heads.

One parameter set serves both domains; a forward pass is domain-agnostic except
for which dropout stream it consumes and whether it writes BN running stats
(source passes do, target passes don't). Heads run BN -> leaky ReLU -> dropout
-> linear, so logits are a pure linear map of the regularized pooled feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BatchSizeError, ConfigError, DimensionError
from .kernels import FeatureBatch
from .tensor import (
    BNState,
    Param,
    Tensor,
    add,
    batch_norm,
    conv2d,
    dropout,
    get_default_dtype,
    global_max_pool_argmax,
    leaky_relu,
    matmul,
)

KERNEL_SIZE = 3
PADDING = 1


@dataclass(frozen=True)
class ExtractorConfig:
    """Conv trunk: 3x3 stages with leaky-ReLU between them, then GMP."""

    height: int = 32
    width: int = 16
    channels: int = 3
    stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))  # (out_ch, stride)
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(c), int(s)) for c, s in self.stages))
        if not self.stages:
            raise ConfigError("extractor needs at least one conv stage")
        if any(c < 1 or s < 1 for c, s in self.stages):
            raise ConfigError(f"bad stage spec {self.stages}")
        h, w = self.height, self.width
        for _, stride in self.stages:
            h = (h + 2 * PADDING - KERNEL_SIZE) // stride + 1
            w = (w + 2 * PADDING - KERNEL_SIZE) // stride + 1
            if h < 1 or w < 1:
                raise ConfigError(
                    f"spatial extent collapses below 1x1 for input "
                    f"{self.height}x{self.width} with stages {self.stages}"
                )

    @property
    def feature_dim(self) -> int:
        return self.stages[-1][0]


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "identity"  # identity | attribute
    out_dim: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dropout: float = 0.5
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.kind not in ("identity", "attribute"):
            raise ConfigError(f"head kind must be identity or attribute, got {self.kind!r}")
        if self.out_dim < 1:
            raise ConfigError(f"head out_dim must be >= 1, got {self.out_dim}")


@dataclass(frozen=True)
class ModelConfig:
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    attr_dim: int = 1
    dropout: float = 0.5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    head_leaky_slope: float = 0.01


@dataclass
class ForwardOutput:
    feature_maps: Tensor          # [n, D, H', W'] last-stage maps
    pooled: FeatureBatch          # [n, D]
    id_logits: Tensor             # [n, K]
    attr_logits: list[Tensor]     # M tensors [n, attr_dim]
    pool_argmax: np.ndarray       # [n, D, 2] spatial argmax per channel


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvStage:
    def __init__(self, in_ch: int, out_ch: int, stride: int, rng, dtype, name: str):
        self.weight = Param(
            _uniform_init(rng, (out_ch, in_ch, KERNEL_SIZE, KERNEL_SIZE),
                          in_ch * KERNEL_SIZE * KERNEL_SIZE, dtype),
            name=f"{name}.weight", decay=True,
        )
        self.bias = Param(np.zeros(out_ch, dtype=dtype), name=f"{name}.bias", decay=False)
        self.stride = stride


class Head:
    """BN -> leaky ReLU -> dropout -> linear classifier head."""

    def __init__(self, in_dim: int, config: HeadConfig, rng, dtype, name: str):
        self.config = config
        self.bn = BNState(in_dim, config.bn_eps, config.bn_momentum, dtype, name=f"{name}.bn")
        self.weight = Param(_uniform_init(rng, (in_dim, config.out_dim), in_dim, dtype),
                            name=f"{name}.weight", decay=True)
        self.bias = Param(np.zeros(config.out_dim, dtype=dtype),
                          name=f"{name}.bias", decay=False)

    def forward(self, pooled, mode: str, rng=None, update_running: bool = True) -> Tensor:
        x = pooled.features if isinstance(pooled, FeatureBatch) else pooled
        if x.ndim != 2 or x.shape[1] != self.bn.dim:
            raise DimensionError(f"head expects [n,{self.bn.dim}] input, got {x.shape}")
        h = batch_norm(x, self.bn, mode, update_running=update_running)
        h = leaky_relu(h, self.config.leaky_slope)
        h = dropout(h, self.config.dropout, rng, mode)
        return add(matmul(h, self.weight.value), self.bias.value)

    def params(self) -> list[Param]:
        return [self.bn.gamma, self.bn.beta, self.weight, self.bias]


def head_forward(pooled, head: Head, mode: str, rng=None,
                 update_running: bool = True) -> Tensor:
    return head.forward(pooled, mode, rng, update_running)


class MMFAModel:
    """One parameter set, one identity head, M attribute heads."""

    def __init__(self, config: ModelConfig, num_ids: int, num_attrs: int,
                 rng: np.random.Generator, dtype=None):
        if num_ids < 1 or num_attrs < 1:
            raise ConfigError(f"need num_ids and num_attrs >= 1, got {num_ids}, {num_attrs}")
        dt = np.dtype(dtype).type if dtype is not None else get_default_dtype()
        self.config = config
        self.num_ids = num_ids
        self.num_attrs = num_attrs
        self.dtype = dt
        ext = config.extractor
        self.stages: list[ConvStage] = []
        in_ch = ext.channels
        for i, (out_ch, stride) in enumerate(ext.stages):
            self.stages.append(ConvStage(in_ch, out_ch, stride, rng, dt, f"extractor.stage{i}"))
            in_ch = out_ch
        head_kw = dict(bn_eps=config.bn_eps, bn_momentum=config.bn_momentum,
                       dropout=config.dropout, leaky_slope=config.head_leaky_slope)
        d = ext.feature_dim
        self.id_head = Head(d, HeadConfig(kind="identity", out_dim=num_ids, **head_kw),
                            rng, dt, "id_head")
        self.attr_heads = [
            Head(d, HeadConfig(kind="attribute", out_dim=config.attr_dim, **head_kw),
                 rng, dt, f"attr_head{m}")
            for m in range(num_attrs)
        ]

    @property
    def feature_dim(self) -> int:
        return self.config.extractor.feature_dim

    def parameters(self) -> list[Param]:
        out: list[Param] = []
        for st in self.stages:
            out += [st.weight, st.bias]
        out += self.id_head.params()
        for h in self.attr_heads:
            out += h.params()
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state (BN running statistics), by name."""
        out = {}
        for h in [self.id_head] + self.attr_heads:
            prefix = h.bn.gamma.name.rsplit(".", 1)[0]
            out[f"{prefix}.running_mean"] = h.bn.running_mean
            out[f"{prefix}.running_var"] = h.bn.running_var
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def extract(self, images: Tensor, mode: str = "eval") -> tuple[Tensor, FeatureBatch, np.ndarray]:
        """Conv trunk + GMP; returns (last feature maps, pooled batch, argmax positions)."""
        ext = self.config.extractor
        if images.ndim != 4 or images.shape[1:] != (ext.channels, ext.height, ext.width):
            raise DimensionError(
                f"expected images [n,{ext.channels},{ext.height},{ext.width}], got {images.shape}"
            )
        h = images
        last = len(self.stages) - 1
        for i, st in enumerate(self.stages):
            h = conv2d(h, st.weight.value, st.bias.value, stride=st.stride, padding=PADDING)
            if i < last:
                h = leaky_relu(h, ext.leaky_slope)
        pooled, argmax = global_max_pool_argmax(h)
        return h, FeatureBatch(pooled, "source"), argmax

    def forward(self, images: Tensor, mode: str, rng=None, domain: str = "source",
                update_running: bool = True) -> ForwardOutput:
        if images.shape[0] < 1:
            raise BatchSizeError("forward pass needs a nonempty batch")
        fmaps, pooled, argmax = self.extract(images, mode)
        pooled.domain = domain
        id_logits = self.id_head.forward(pooled.features, mode, rng, update_running)
        attr_logits = [h.forward(pooled.features, mode, rng, update_running)
                       for h in self.attr_heads]
        return ForwardOutput(fmaps, pooled, id_logits, attr_logits, argmax)


def extract(images: Tensor, model: MMFAModel, mode: str = "eval"):
    fmaps, pooled, _ = model.extract(images, mode)
    return fmaps, pooled


def forward_all(source_images: Tensor, target_images: Tensor, model: MMFAModel,
                mode: str = "train", source_rng=None, target_rng=None
                ) -> tuple[ForwardOutput, ForwardOutput]:
    """Two forward passes over shared weights; BN batch stats are per-domain.

    Only the source pass updates BN running statistics; target labels are never
    consumed anywhere in this path.
    """
    if source_images.shape[0] < 1 or target_images.shape[0] < 1:
        raise BatchSizeError("forward_all needs nonempty source and target batches")
    out_s = model.forward(source_images, mode, source_rng, "source", update_running=True)
    out_t = model.forward(target_images, mode, target_rng, "target", update_running=False)
    return out_s, out_t
