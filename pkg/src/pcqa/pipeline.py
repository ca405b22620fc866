"""Glue between corpus, views, training and evaluation, shared by the CLI and
the end-to-end tests."""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .evaluation import EvalReport, evaluate
from .model import QualityModel
from .pointcloud import CorpusSample, ScoreScale, read_manifest, read_ply, synthesize_corpus
from .projection import load_viewset, save_viewset
from .training import Checkpoint, TrainData, TrainResult, ViewBank, kfold_split, restore, train


def score_scale(cfg: RunConfig) -> ScoreScale:
    return ScoreScale(cfg["corpus.score_min"], cfg["corpus.score_max"], cfg["corpus.score_options"])


def synthesize(cfg: RunConfig) -> list[CorpusSample]:
    return synthesize_corpus(cfg["corpus.references"], cfg["corpus.points"], cfg["run.seed"],
                             score_scale(cfg), cfg["corpus.kinds"])


def load_corpus(corpus_dir, cfg: RunConfig, load_clouds: bool = False) -> list[CorpusSample]:
    return read_manifest(corpus_dir, score_scale(cfg).anchors, load_clouds)


def _backend(cfg: RunConfig):
    b = cfg["projection.backend"]
    return None if b == "auto" else b


def render_bank(cfg: RunConfig, samples: Sequence[CorpusSample]) -> ViewBank:
    size = cfg["projection.render_size"]
    return ViewBank.render([s.cloud for s in samples], [s.sample_id for s in samples], cfg["projection.views"],
                           size, cfg["projection.splat_radius"], _backend(cfg))


def save_bank(bank: ViewBank, root) -> None:
    from .projection import ViewImage, ViewSet

    for i, sid in enumerate(bank.sample_ids):
        views = [ViewImage(bank.colors[i, v], bank.depths[i, v], bank.depths[i, v] < 1.0, v)
                 for v in range(bank.depths.shape[1])]
        save_viewset(ViewSet(views), root, int(sid))


def load_bank(root, sample_ids: Sequence[int], m: int) -> ViewBank:
    sets = [load_viewset(root, int(sid), m) for sid in sample_ids]
    return ViewBank(np.stack([vs.colors() for vs in sets]), np.stack([vs.depths() for vs in sets]), sample_ids)


def corpus_bank(cfg: RunConfig, corpus_dir, samples: Sequence[CorpusSample], views_dir=None) -> ViewBank:
    """Stored views if ``views_dir`` (default ``<corpus>/views``) exists, else fresh renders."""
    root = Path(views_dir) if views_dir is not None else Path(corpus_dir) / "views"
    ids = [s.sample_id for s in samples]
    if root.is_dir():
        return load_bank(root, ids, cfg["projection.views"])
    for s in samples:
        if s.cloud is None:
            s.cloud = read_ply(Path(corpus_dir) / s.ply_path)
    return render_bank(cfg, samples)


def train_data(bank: ViewBank, samples: Sequence[CorpusSample]) -> TrainData:
    probs = np.stack([s.osd_label.probs for s in samples])
    anchors = samples[0].osd_label.anchors
    return TrainData(bank, probs, anchors, probs @ anchors)


def fold_rows(cfg: RunConfig, samples: Sequence[CorpusSample], fold: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (train, test) of ``fold`` in the content-grouped split."""
    refs = np.array([s.reference_id for s in samples])
    splits = kfold_split(sorted(set(refs.tolist())), cfg["train.folds"], cfg["run.seed"])
    if not 0 <= fold < len(splits):
        raise IndexError(f"fold {fold} out of range 0..{len(splits) - 1}")
    train_refs, test_refs = splits[fold]
    return np.flatnonzero(np.isin(refs, train_refs)), np.flatnonzero(np.isin(refs, test_refs))


def model_from_checkpoint(cfg: RunConfig, ckpt: Checkpoint) -> QualityModel:
    model = QualityModel(cfg)
    restore(model, ckpt)
    return model


def predict_rows(cfg: RunConfig, model: QualityModel, bank: ViewBank, rows):
    color, depth = bank.crops(rows, cfg["projection.crop_size"], "center")
    return model.predict(color, depth)


def evaluate_rows(cfg: RunConfig, model: QualityModel, data: TrainData, samples, rows) -> EvalReport:
    scores, _, _ = predict_rows(cfg, model, data.bank, rows)
    mos = np.array([samples[r].true_score for r in rows])
    return evaluate(scores, mos, [samples[r].sample_id for r in rows])


@dataclass
class FoldOutcome:
    fold: int
    report: EvalReport
    result: TrainResult


def run_fold(cfg: RunConfig, data: TrainData, samples, fold: int,
             on_epoch: Callable[[int, float], None] | None = None) -> FoldOutcome:
    """Train on the fold's training references, then score its held-out
    references with the epoch of lowest mean training loss."""
    train_rows, test_rows = fold_rows(cfg, samples, fold)
    result = train(cfg, data, train_rows, on_epoch=on_epoch)
    model = model_from_checkpoint(cfg, result.best)
    return FoldOutcome(fold, evaluate_rows(cfg, model, data, samples, test_rows), result)


_SHARED: tuple | None = None  # (cfg, data, samples) inherited by forked fold workers


def _fold_in_worker(fold: int) -> FoldOutcome:
    cfg, data, samples = _SHARED
    return run_fold(cfg, data, samples, fold)


def cross_validate(cfg: RunConfig, data: TrainData, samples, log: Callable[[str], None] | None = None,
                   workers: int | None = None) -> list[FoldOutcome]:
    """Every fold of the content-grouped split, in fold order.

    Folds are independent and individually seeded, so running them in
    ``workers`` forked processes (default: one per core, at most one per
    fold) gives the same outcomes as the serial loop.
    """
    folds = range(cfg["train.folds"])
    if workers is None:
        workers = os.cpu_count() or 1
    workers = min(workers, len(folds))
    if workers > 1 and "fork" in mp.get_all_start_methods():
        global _SHARED
        _SHARED = (cfg, data, samples)
        try:
            with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as pool:
                outcomes = list(pool.map(_fold_in_worker, folds))
        finally:
            _SHARED = None
    else:
        outcomes = [run_fold(cfg, data, samples, fold) for fold in folds]
    if log is not None:
        for out in outcomes:
            log(f"fold {out.fold}: {out.report.summary()} ({out.result.seconds:.0f}s)")
    return outcomes
