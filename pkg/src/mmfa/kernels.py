"""RBF mixture kernels and the biased (V-statistic) squared-MMD estimator.

The estimator keeps the self-pair terms, so it is a squared RKHS norm and never
goes meaningfully negative. Everything here is built from recorded tensor
primitives and is therefore differentiable with respect to both feature
batches. Bandwidths are applied to raw, unstandardized features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BatchSizeError, DimensionError, ParameterError
from .tensor import Tensor, add, exp, pairwise_sqdist, scale, tsum

DEFAULT_BANDWIDTHS = (1.0, 5.0, 10.0)


@dataclass(frozen=True)
class KernelSpec:
    """Mixture of RBF kernels, combined by unweighted arithmetic mean."""

    bandwidths: tuple[float, ...] = DEFAULT_BANDWIDTHS

    def __post_init__(self):
        bw = tuple(float(b) for b in self.bandwidths)
        if not bw:
            raise ParameterError("KernelSpec needs at least one bandwidth")
        if any(b <= 0 for b in bw):
            raise ParameterError(f"bandwidths must be positive, got {bw}")
        object.__setattr__(self, "bandwidths", bw)


@dataclass
class FeatureBatch:
    """Rows of pooled or head features for one domain."""

    features: Tensor
    domain: str = "source"

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.features = Tensor(self.features)
        if self.features.ndim != 2:
            raise DimensionError(f"FeatureBatch expects [n,d], got {self.features.shape}")
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise BatchSizeError(f"FeatureBatch must be nonempty, got {n}x{d}")
        if not self.features.is_finite():
            raise ParameterError("FeatureBatch contains non-finite values")
        if self.domain not in ("source", "target"):
            raise ParameterError(f"domain must be source or target, got {self.domain!r}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _feat(x) -> Tensor:
    return x.features if isinstance(x, FeatureBatch) else x


def rbf_kernel(x, y, alpha: float) -> float:
    """exp(-||x-y||^2 / (2 alpha)) for two plain vectors."""
    alpha = float(alpha)
    if alpha <= 0:
        raise ParameterError(f"bandwidth must be positive, got {alpha}")
    xv = np.asarray(x, dtype=np.float64).ravel()
    yv = np.asarray(y, dtype=np.float64).ravel()
    if xv.shape != yv.shape:
        raise DimensionError(f"rbf_kernel dims disagree: {xv.shape} vs {yv.shape}")
    d = xv - yv
    return math.exp(-float(d @ d) / (2.0 * alpha))


def mixture_kernel_value(x, y, spec: KernelSpec) -> float:
    """Arithmetic mean of the per-bandwidth RBF values for two plain vectors."""
    return sum(rbf_kernel(x, y, a) for a in spec.bandwidths) / len(spec.bandwidths)


def _mixture_of_sqdist(d2: Tensor, spec: KernelSpec) -> Tensor:
    acc = None
    for alpha in spec.bandwidths:
        term = exp(scale(d2, -1.0 / (2.0 * alpha)))
        acc = term if acc is None else add(acc, term)
    return scale(acc, 1.0 / len(spec.bandwidths))


def gram_matrix(x, y, spec: KernelSpec) -> Tensor:
    """Mixture-kernel Gram matrix between rows of x [n,d] and rows of y [m,d]."""
    xf, yf = _feat(x), _feat(y)
    if xf.shape[1] != yf.shape[1]:
        raise DimensionError(
            f"gram_matrix feature dims disagree: {xf.shape} vs {yf.shape}"
        )
    return _mixture_of_sqdist(pairwise_sqdist(xf, yf), spec)


def mmd2_biased(x, y, spec: KernelSpec) -> Tensor:
    """Biased squared MMD between the empirical measures of x and y.

    (1/n^2) sum k(x,x') + (1/m^2) sum k(y,y') - (2/nm) sum k(x,y), self-pairs
    included. Returns a scalar graph tensor differentiable w.r.t. both inputs.
    """
    xf, yf = _feat(x), _feat(y)
    if xf.shape[0] < 1 or yf.shape[0] < 1:
        raise BatchSizeError("mmd2_biased needs nonempty batches")
    if xf.shape[1] != yf.shape[1]:
        raise DimensionError(f"mmd2 feature dims disagree: {xf.shape} vs {yf.shape}")
    n, m = xf.shape[0], yf.shape[0]
    kxx = tsum(gram_matrix(xf, xf, spec))
    kyy = tsum(gram_matrix(yf, yf, spec))
    kxy = tsum(gram_matrix(xf, yf, spec))
    return add(
        add(scale(kxx, 1.0 / (n * n)), scale(kyy, 1.0 / (m * m))),
        scale(kxy, -2.0 / (n * m)),
    )
