"""Training losses: CDF earth mover's distance, interpolated-quantile loss,
cross-modal InfoNCE, and their weighted sum.

The ``*_t`` functions work on batched ``Tensor`` probabilities and are what the
trainer differentiates; the plain functions take ``OpinionScoreDistribution``
objects and return floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .alignment import OpinionScoreDistribution
from .diffcore import Tensor

DEFAULT_THETAS = (0.25, 0.50, 0.75)
ANCHOR_TOL = 1e-9


class AxisMismatch(ValueError):
    pass


class ThetaOutOfRange(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


@dataclass
class CdfCurve:
    scores: np.ndarray
    cumulative: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.cumulative = np.asarray(self.cumulative, dtype=np.float64)
        if np.any(np.diff(self.scores) <= 0):
            raise ValueError("knot scores must be strictly increasing")
        if abs(self.cumulative[-1] - 1.0) > 1e-12:
            raise ValueError("a CDF must end at 1")

    @property
    def knots(self) -> list[tuple[float, float]]:
        return list(zip(self.scores.tolist(), self.cumulative.tolist()))


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.08
    tau1: float = 0.07

    def __post_init__(self):
        if min(self.alpha, self.beta, self.tau1) < 0:
            raise ValueError("loss weights must be non-negative")


def cdf_from_osd(osd: OpinionScoreDistribution) -> CdfCurve:
    order = np.argsort(osd.anchors, kind="stable")
    return CdfCurve(osd.anchors[order], np.cumsum(osd.probs[order]))


def truth_cdf_matrix(truth_anchors, q) -> np.ndarray:
    """(L, K) indicator so that ``truth_probs @ M`` is CDF_truth at each sorted q_k."""
    truth_anchors = np.asarray(truth_anchors, dtype=np.float64)
    qs = np.sort(np.asarray(q, dtype=np.float64))
    if truth_anchors.max() > qs[-1] + ANCHOR_TOL:
        raise AxisMismatch("ground-truth options extend beyond the largest anchor")
    return (truth_anchors[:, None] <= qs[None, :] + ANCHOR_TOL).astype(np.float64)


def emd_loss_t(pred: Tensor, q, truth_probs, truth_anchors) -> Tensor:
    """Per-sample RMS difference of the two CDFs at the sorted anchors q_k.

    ``pred`` is (B, K) in the order of ``q``; ``truth_probs`` is (B, L).
    """
    order = np.argsort(np.asarray(q, dtype=np.float64), kind="stable")
    pred = dc.as_tensor(pred)
    cdf_pred = dc.cumsum_lastdim(pred[..., order])
    cdf_true = np.asarray(truth_probs, dtype=np.float64) @ truth_cdf_matrix(truth_anchors, q)
    diff = cdf_pred - cdf_true
    return dc.sqrt(dc.mean_over_axis(diff * diff, axis=-1))


def emd_loss(pred: OpinionScoreDistribution, truth: OpinionScoreDistribution) -> float:
    return float(emd_loss_t(pred.probs[None, :], pred.anchors, truth.probs[None, :], truth.anchors).data[0])


def _check_theta(thetas) -> np.ndarray:
    thetas = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
    if np.any(thetas <= 0.0) or np.any(thetas >= 1.0):
        raise ThetaOutOfRange("quantile levels must lie strictly inside (0, 1)")
    return thetas


def _knots(anchors: np.ndarray) -> np.ndarray:
    """Sorted anchors with the synthetic left knot prepended."""
    spacing = (anchors[-1] - anchors[0]) / (len(anchors) - 1) if len(anchors) > 1 else 1.0
    return np.concatenate([[anchors[0] - spacing], anchors])


def _quantile_core(cum: np.ndarray, anchors: np.ndarray, thetas: np.ndarray):
    """Leftmost score where the piecewise-linear CDF reaches each theta.

    ``cum`` is (B, K) cumulative mass at ascending ``anchors``.  Returns the
    quantiles (B, J) and, per entry, the segment index j (1..K) and the
    segment quantities needed for the derivative.
    """
    b = cum.shape[0]
    xs = _knots(anchors)
    c = np.concatenate([np.zeros((b, 1)), cum], axis=1)
    j = np.empty((b, len(thetas)), dtype=np.int64)
    for r in range(b):
        j[r] = np.searchsorted(c[r], thetas, side="left")
    j = np.clip(j, 1, len(anchors))
    rows = np.arange(b)[:, None]
    c_lo, c_hi = c[rows, j - 1], c[rows, j]
    width = xs[j] - xs[j - 1]
    t = thetas[None, :] - c_lo
    d = c_hi - c_lo
    # d == 0 only when rounding leaves the final cumulative just below theta
    d = np.where(d > 0, d, np.inf)
    s = np.where(np.isfinite(d), xs[j - 1] + t / d * width, xs[j])
    return s, j, t, d, width


def quantile(curve: CdfCurve, theta: float) -> float:
    thetas = _check_theta(theta)
    s, *_ = _quantile_core(curve.cumulative[None, :], curve.scores, thetas)
    return float(s[0, 0])


def quantiles_t(probs: Tensor, anchors, thetas=DEFAULT_THETAS) -> Tensor:
    """Differentiable quantiles (B, J) of distributions over ascending ``anchors``."""
    probs = dc.as_tensor(probs)
    anchors = np.asarray(anchors, dtype=np.float64)
    thetas = _check_theta(thetas)
    cum = np.cumsum(probs.data, axis=-1)
    s, j, t, d, width = _quantile_core(cum, anchors, thetas)

    def backward(g):
        bsz, k = cum.shape
        dcum = np.zeros((bsz, k + 1))
        rows = np.repeat(np.arange(bsz)[:, None], len(thetas), axis=1)
        np.add.at(dcum, (rows, j - 1), g * (-width * (d - t) / (d * d)))
        np.add.at(dcum, (rows, j), g * (-width * t / (d * d)))
        dcum = dcum[:, 1:]
        return (np.flip(np.cumsum(np.flip(dcum, -1), axis=-1), -1),)

    return dc.op(s, (probs,), backward)


def quantile_loss_t(pred: Tensor, q, truth_probs, truth_anchors, thetas=DEFAULT_THETAS) -> Tensor:
    """Per-sample mean absolute gap between predicted and true quantiles."""
    q = np.asarray(q, dtype=np.float64)
    order = np.argsort(q, kind="stable")
    pred = dc.as_tensor(pred)
    s_pred = quantiles_t(pred[..., order], q[order], thetas)
    ta = np.asarray(truth_anchors, dtype=np.float64)
    torder = np.argsort(ta, kind="stable")
    tp = np.atleast_2d(np.asarray(truth_probs, dtype=np.float64))[:, torder]
    s_true, *_ = _quantile_core(np.cumsum(tp, axis=-1), ta[torder], _check_theta(thetas))
    return dc.mean_over_axis(dc.absolute(s_pred - s_true), axis=-1)


def quantile_loss(pred: OpinionScoreDistribution, truth: OpinionScoreDistribution,
                  thetas: Sequence[float] = DEFAULT_THETAS) -> float:
    return float(quantile_loss_t(pred.probs[None, :], pred.anchors, truth.probs[None, :],
                                 truth.anchors, thetas).data[0])


def contrastive_loss(color_feats, depth_feats, tau1: float = 0.07, exclude_positive: bool = False) -> Tensor:
    """Symmetric cross-modal InfoNCE over view-level feature pairs.

    Inputs are (B, M, D) or already flattened (B*M, D).  Row i of one modality
    is positive with row i of the other; the softmax denominator runs over all
    B*M rows of the opposite modality (or all but the positive when
    ``exclude_positive``).
    """
    c, d = dc.as_tensor(color_feats), dc.as_tensor(depth_feats)
    if c.shape != d.shape:
        raise dc.ShapeMismatch(f"color {c.shape} vs depth {d.shape}")
    if c.ndim == 3:
        c = dc.reshape(c, (-1, c.shape[-1]))
        d = dc.reshape(d, (-1, d.shape[-1]))
    n = c.shape[0]
    if n < 2:
        raise DegenerateBatch("contrastive loss needs at least two view pairs")
    sim = dc.scale(dc.cosine_sim(c, d), 1.0 / tau1)
    eye = np.eye(n, dtype=bool)
    mask = ~eye if exclude_positive else None
    pos = dc.sum_over_axis(sim * eye.astype(np.float64))
    c2d = dc.sum_over_axis(dc.logsumexp_lastdim(sim, mask))
    d2c = dc.sum_over_axis(dc.logsumexp_lastdim(dc.transpose(sim, (1, 0)), mask))
    return dc.scale(c2d + d2c - dc.scale(pos, 2.0), 1.0 / (2 * n))


def total_loss(emd, quan, con, weights: LossWeights = LossWeights()):
    """emd + alpha*quan + beta*con; accepts floats or Tensors."""
    if weights.beta == 0.0:
        return emd + quan * weights.alpha
    return emd + quan * weights.alpha + con * weights.beta
