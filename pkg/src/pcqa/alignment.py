"""Retrieval-style quality head: cosine similarity against K level features,
softmax into an opinion score distribution, expectation over score anchors.
Also holds the two-layer regression head used when the text branch is off."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor, ZeroVector

BT500_LEVELS = ("excellent", "good", "fair", "poor", "bad")


class LengthMismatch(ValueError):
    pass


@dataclass
class OpinionScoreDistribution:
    probs: np.ndarray
    anchors: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        if self.probs.shape != self.anchors.shape or self.probs.ndim != 1:
            raise LengthMismatch("probs and anchors must be equal-length vectors")
        if np.any(self.probs < 0):
            raise ValueError("negative probability")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {self.probs.sum()!r}")

    @property
    def mean(self) -> float:
        return float(self.probs @ self.anchors)


@dataclass(frozen=True)
class QualityLevels:
    descriptions: tuple[str, ...] = BT500_LEVELS
    q: tuple[float, ...] = (5.0, 4.0, 3.0, 2.0, 1.0)

    def __post_init__(self):
        if len(self.descriptions) != len(self.q):
            raise LengthMismatch("one anchor per description")
        d = np.diff(self.q)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("score anchors must be strictly monotone")

    @property
    def k(self) -> int:
        return len(self.q)

    @property
    def anchors(self) -> np.ndarray:
        return np.asarray(self.q, dtype=np.float64)


def similarities(f_i, f_t) -> Tensor:
    """Cosine similarity of each image feature (row of ``f_i``) against the K
    text features.  A single C-vector gives a K-vector."""
    f_i = dc.as_tensor(f_i)
    out = dc.cosine_sim(f_i, f_t)
    return dc.reshape(out, (out.shape[-1],)) if f_i.ndim == 1 else out


def osd_probs(pi, scale=1.0) -> Tensor:
    """Softmax of scaled similarities over the last axis.  ``scale`` may be a Tensor."""
    pi = dc.as_tensor(pi)
    logits = pi * scale if isinstance(scale, Tensor) else dc.scale(pi, float(scale))
    return dc.softmax_lastdim(logits)


def osd_from_similarities(pi, scale: float = 1.0, anchors: Sequence[float] | None = None) -> OpinionScoreDistribution:
    pi = np.asarray(pi, dtype=np.float64)
    if not np.all(np.isfinite(pi)):
        raise ValueError("similarities must be finite")
    probs = osd_probs(pi, scale).data
    if anchors is None:
        anchors = QualityLevels().anchors
    return OpinionScoreDistribution(probs, anchors)


def expected_score(probs, q) -> Tensor:
    """Σ_k p_k q_k along the last axis (differentiable)."""
    q = np.asarray(q, dtype=np.float64)
    probs = dc.as_tensor(probs)
    if probs.shape[-1] != len(q):
        raise LengthMismatch(f"{probs.shape[-1]} probabilities for {len(q)} anchors")
    return dc.reshape(probs @ q.reshape(-1, 1), probs.shape[:-1])


def score_from_osd(osd, levels: QualityLevels = QualityLevels()) -> float:
    probs = osd.probs if isinstance(osd, OpinionScoreDistribution) else np.asarray(osd, float)
    if len(probs) != levels.k:
        raise LengthMismatch(f"{len(probs)} probabilities for {levels.k} levels")
    return float(probs @ levels.anchors)


class RegressionHead:
    """Two-layer MLP C -> C/2 -> 1 with GELU in between."""

    def __init__(self, dim: int, rng: np.random.Generator):
        hidden = max(dim // 2, 1)
        self.w1 = Param(rng.normal(0, 1 / np.sqrt(dim), (dim, hidden)), name="head.w1")
        self.b1 = Param(np.zeros(hidden), name="head.b1")
        self.w2 = Param(rng.normal(0, 1 / np.sqrt(hidden), (hidden, 1)), name="head.w2")
        self.b2 = Param(np.zeros(1), name="head.b2")

    def params(self) -> dict[str, Param]:
        return {p.name: p for p in (self.w1, self.b1, self.w2, self.b2)}

    def __call__(self, f_i) -> Tensor:
        return regression_head(f_i, self)


def regression_head(f_i, head: RegressionHead) -> Tensor:
    f_i = dc.as_tensor(f_i)
    vec = f_i.ndim == 1
    x = dc.reshape(f_i, (1, -1)) if vec else f_i
    if x.shape[-1] != head.w1.shape[0]:
        raise dc.ShapeMismatch(f"head expects {head.w1.shape[0]} features, got {x.shape[-1]}")
    h = dc.gelu(x @ head.w1 + head.b1)
    out = dc.reshape(h @ head.w2 + head.b2, (x.shape[0],))
    return dc.reshape(out, ()) if vec else out


__all__ = [
    "BT500_LEVELS",
    "LengthMismatch",
    "OpinionScoreDistribution",
    "QualityLevels",
    "RegressionHead",
    "ZeroVector",
    "expected_score",
    "osd_from_similarities",
    "osd_probs",
    "regression_head",
    "score_from_osd",
    "similarities",
]
