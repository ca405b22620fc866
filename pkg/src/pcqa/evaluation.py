"""Agreement metrics between predicted scores and MOS, the monotone
four-parameter logistic used to align their ranges, and a small PCA."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConstantInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NoConvergence(RuntimeWarning):
    pass


class RankDeficient(RuntimeWarning):
    pass


def _pair(x, y, minimum: int = 3):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} vs {len(y)} values")
    if len(x) < minimum:
        raise LengthMismatch(f"need at least {minimum} values")
    return x, y


def plcc(x, y) -> float:
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den == 0.0:
        raise ConstantInput("correlation of a constant sequence")
    return float(np.clip((xc * yc).sum() / den, -1.0, 1.0))


def rankdata(a) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    sorted_a = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(x, y) -> float:
    x, y = _pair(x, y)
    return plcc(rankdata(x), rankdata(y))


def rmse(x, y) -> float:
    x, y = _pair(x, y, minimum=1)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def _sigmoid(z):
    # tanh form: no overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic4(x, b1, b2, b3, b4):
    return b2 + (b1 - b2) * _sigmoid((np.asarray(x, dtype=np.float64) - b3) / abs(b4))


def _jacobian(x, beta):
    b1, b2, b3, b4 = beta
    s = abs(b4)
    sig = _sigmoid((x - b3) / s)
    dsig = sig * (1.0 - sig)  # d sigma / d argument
    j = np.empty((len(x), 4))
    j[:, 0] = sig
    j[:, 1] = 1.0 - sig
    j[:, 2] = (b1 - b2) * dsig * (-1.0 / s)
    j[:, 3] = (b1 - b2) * dsig * (-(x - b3) / (s * s)) * np.sign(b4 if b4 != 0 else 1.0)
    return j


@dataclass
class LogisticFit:
    beta: tuple[float, float, float, float]
    sse: float
    iterations: int
    converged: bool

    def __call__(self, x):
        return logistic4(x, *self.beta)


def fit_logistic4(pred, mos, max_iter: int = 500, tol: float = 1e-10) -> LogisticFit:
    """Least-squares monotone logistic from predictions to MOS.

    Levenberg-damped Gauss-Newton from beta = (max mos, min mos, median pred,
    std pred).  A step is accepted only if it lowers the SSE; iteration stops
    when the relative SSE improvement falls below ``tol``.
    """
    x, y = _pair(pred, mos, minimum=5)
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise ConstantInput("logistic fit needs non-constant inputs")
    beta = np.array([y.max(), y.min(), np.median(x), x.std()])
    sse = float(((logistic4(x, *beta) - y) ** 2).sum())
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = logistic4(x, *beta) - y
        j = _jacobian(x, beta)
        jtj = j.T @ j
        g = j.T @ r
        improved = False
        while lam < 1e12:
            a = jtj + lam * np.diag(np.diag(jtj) + 1e-12)
            try:
                delta = np.linalg.solve(a, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = beta + delta
            if cand[3] == 0.0 or not np.all(np.isfinite(cand)):
                lam *= 10.0
                continue
            new_sse = float(((logistic4(x, *cand) - y) ** 2).sum())
            if new_sse < sse:
                rel = (sse - new_sse) / max(sse, 1e-300)
                beta, sse = cand, new_sse
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved or rel < tol or sse == 0.0:
            converged = True
            break
    if not converged:
        warnings.warn("logistic fit hit the iteration limit", NoConvergence, stacklevel=2)
    return LogisticFit(tuple(float(b) for b in beta), sse, it, converged)


@dataclass
class EvalReport:
    plcc: float
    srcc: float
    rmse: float
    logistic_params: tuple[float, float, float, float]
    predicted: np.ndarray = field(repr=False)
    mapped: np.ndarray = field(repr=False)
    mos: np.ndarray = field(repr=False)
    sample_ids: np.ndarray | None = field(default=None, repr=False)

    def summary(self) -> str:
        return f"plcc={self.plcc:.6f},srcc={self.srcc:.6f},rmse={self.rmse:.6f}"

    def write(self, out_dir, stem: str = "eval") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table = out / f"{stem}.csv"
        ids = self.sample_ids if self.sample_ids is not None else np.arange(len(self.mos))
        with open(table, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "predicted", "mapped", "mos"])
            for i, p, m, q in zip(ids, self.predicted, self.mapped, self.mos):
                w.writerow([int(i), repr(float(p)), repr(float(m)), repr(float(q))])
        summary = out / f"{stem}_summary.txt"
        b = self.logistic_params
        summary.write_text(self.summary() + f",beta1={b[0]!r},beta2={b[1]!r},beta3={b[2]!r},beta4={b[3]!r}\n")
        return table, summary


def evaluate(pred, mos, sample_ids=None) -> EvalReport:
    """PLCC and RMSE after logistic mapping; SRCC on the raw predictions."""
    pred = np.asarray(pred, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoConvergence)
        fit = fit_logistic4(pred, mos)
    mapped = fit(pred)
    if np.ptp(mapped) == 0.0:
        mapped = pred
    return EvalReport(plcc(mapped, mos), srcc(pred, mos), rmse(mapped, mos), fit.beta,
                      pred, mapped, mos, None if sample_ids is None else np.asarray(sample_ids))


# -- PCA -----------------------------------------------------------------------


def _power_top(cov: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int):
    v = rng.normal(size=cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return float(v @ cov @ v), v


def pca2d(features, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> np.ndarray:
    """Project centred rows onto the top two covariance eigenvectors.

    Eigenvectors come from power iteration with deflation; each axis is signed
    so its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("pca2d needs an (S, C) matrix with S >= 3")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    rng = np.random.default_rng(seed)
    comps = []
    work = cov.copy()
    for _ in range(2):
        lam, v = _power_top(work, rng, tol, max_iter)
        if lam <= tol * max(1.0, np.trace(cov)):
            warnings.warn("features have rank below 2", RankDeficient, stacklevel=2)
            comps.append(np.zeros(cov.shape[0]))
            continue
        v = v * np.sign(v[np.argmax(np.abs(v))])
        comps.append(v)
        work = work - lam * np.outer(v, v)
    return xc @ np.stack(comps, axis=1)
