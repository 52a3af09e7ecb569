"""The four training losses and their weighted combination.

Identity: mean softmax cross entropy over source labels. Attribute: mean
sigmoid cross entropy over all attribute heads. The two alignment losses are
biased squared-MMD estimates, per-attribute-averaged and on pooled features
respectively. Classification losses use the stable logit-space forms; the
textbook softmax/sigmoid expressions overflow for large logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LabelError, NumericError, ParameterError, SchemaError
from .kernels import FeatureBatch, KernelSpec, mmd2_biased
from .tensor import (
    Tensor,
    add,
    scale,
    sigmoid_cross_entropy,
    softmax_cross_entropy,
    tmean,
    tsum,
)


@dataclass(frozen=True)
class LossWeights:
    """Coefficients for the attribute, attribute-alignment, and feature-alignment terms."""

    attr: float = 0.1
    aal: float = 1.0
    mdal: float = 1.0

    def __post_init__(self):
        for name in ("attr", "aal", "mdal"):
            v = float(getattr(self, name))
            if v < 0:
                raise ParameterError(f"loss weight {name} must be >= 0, got {v}")
            object.__setattr__(self, name, v)


@dataclass
class LossReport:
    """Scalar loss components for one step; l_all is their weighted sum."""

    l_id: float
    l_attr: float
    l_aal: float
    l_mdal: float
    l_all: float

    def to_record(self, step: int) -> dict:
        return {
            "step": step,
            "l_id": self.l_id,
            "l_attr": self.l_attr,
            "l_aal": self.l_aal,
            "l_mdal": self.l_mdal,
            "l_all": self.l_all,
        }


def identity_loss(id_logits: Tensor, labels) -> Tensor:
    """Mean -log softmax probability of the true class."""
    return tmean(softmax_cross_entropy(id_logits, labels))


def attribute_loss(attr_logits: Sequence[Tensor], attrs) -> Tensor:
    """Mean sigmoid cross entropy across all attribute heads and samples.

    attrs is an [n, M] 0/1 array; head m is supervised by column m (broadcast
    over the head's output width when it is wider than one logit).
    """
    attrs = np.asarray(attrs)
    if attrs.ndim != 2:
        raise SchemaError(f"attrs must be [n,M], got shape {attrs.shape}")
    m = len(attr_logits)
    if attrs.shape[1] != m:
        raise SchemaError(f"{m} attribute heads but {attrs.shape[1]} attribute columns")
    if not np.isin(attrs, (0, 1)).all():
        raise LabelError("attribute values must be 0 or 1")
    total = None
    count = 0
    for col, logits in enumerate(attr_logits):
        targets = attrs[:, col][:, None]
        term = tsum(sigmoid_cross_entropy(logits, targets))
        total = term if total is None else add(total, term)
        count += logits.size
    return scale(total, 1.0 / count)


def attribute_alignment_loss(source_feats: Sequence[FeatureBatch],
                             target_feats: Sequence[FeatureBatch],
                             spec: KernelSpec) -> Tensor:
    """Mean over attributes of the biased squared MMD between the two domains."""
    if len(source_feats) != len(target_feats) or not source_feats:
        raise SchemaError(
            f"attribute count mismatch: {len(source_feats)} vs {len(target_feats)}"
        )
    total = None
    for fs, ft in zip(source_feats, target_feats):
        term = mmd2_biased(fs, ft, spec)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(source_feats))


def deep_feature_alignment_loss(source_pooled: FeatureBatch,
                                target_pooled: FeatureBatch,
                                spec: KernelSpec) -> Tensor:
    """Biased squared MMD between pooled source and target features."""
    return mmd2_biased(source_pooled, target_pooled, spec)


def total_loss(l_id: float, l_attr: float, l_aal: float, l_mdal: float,
               weights: LossWeights) -> float:
    """Weighted sum of the four components (the report-level scalar)."""
    parts = (l_id, l_attr, l_aal, l_mdal)
    if any(not math.isfinite(p) for p in parts):
        raise NumericError(f"non-finite loss component in {parts}")
    return l_id + weights.attr * l_attr + weights.aal * l_aal + weights.mdal * l_mdal


def weighted_total(l_id: Tensor, l_attr: Tensor | None, l_aal: Tensor | None,
                   l_mdal: Tensor | None, weights: LossWeights) -> Tensor:
    """Graph-level weighted sum; zero-weight or absent terms stay out of the graph.

    Leaving them out keeps the zero-weight ablation's gradients bitwise equal to
    a run that never computes the terms at all.
    """
    out = l_id
    for term, w in ((l_attr, weights.attr), (l_aal, weights.aal), (l_mdal, weights.mdal)):
        if term is not None and w != 0.0:
            out = add(out, scale(term, w))
    return out


def make_report(l_id: float, l_attr: float, l_aal: float, l_mdal: float,
                weights: LossWeights) -> LossReport:
    return LossReport(l_id, l_attr, l_aal, l_mdal,
                      total_loss(l_id, l_attr, l_aal, l_mdal, weights))
