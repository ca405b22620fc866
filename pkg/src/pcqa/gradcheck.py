"""Finite-difference checks of every differentiable piece of the model."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import diffcore as dc
from .alignment import RegressionHead, osd_probs, similarities
from .config import RunConfig
from .diffcore import Param, Tensor, grad_check
from .encoders import MiniViT, MiniViTConfig, build_prompts, fuse_visual, text_forward
from .losses import contrastive_loss, emd_loss_t, quantile_loss_t
from .model import QualityModel

TOLERANCE = 1e-4
# Key biases have an exactly zero gradient (softmax ignores a per-row shift),
# so their numeric estimate is pure roundoff of size |loss| * eps / step.
# Probe losses are scaled down to keep that roundoff under the 1e-8 floor;
# relative errors of nonzero gradients do not depend on the scale.
PROBE_SCALE = 1e-3
VIT_PROBE_SCALE = 1e-5


def probe_config(cfg: RunConfig) -> RunConfig:
    """Same network widths as ``cfg`` on small crops and a two-sample batch."""
    return cfg.updated(projection__crop_size=2 * cfg["model.patch_size"], projection__views=2,
                       train__batch_size=2)


def _random_batch(cfg: RunConfig, rng: np.random.Generator):
    b, m, s = cfg["train.batch_size"], cfg["projection.views"], cfg["projection.crop_size"]
    color = rng.integers(0, 256, size=(b, m, s, s, 3)).astype(np.uint8)
    depth = rng.uniform(0.1, 0.9, size=(b, m, s, s)).astype(np.float32)
    n_opt = cfg["corpus.score_options"]
    truth = rng.dirichlet(np.ones(n_opt), size=b)
    anchors = np.linspace(cfg["corpus.score_min"], cfg["corpus.score_max"], n_opt)
    return color, depth, truth, anchors


def _inner_probs(rng, b, k):
    """Random distributions kept away from CDF kinks at the default thetas."""
    while True:
        p = rng.dirichlet(np.full(k, 2.0), size=b)
        c = np.cumsum(p, axis=1)
        if np.min(np.abs(c[:, :, None] - np.array([0.25, 0.5, 0.75]))) > 0.02:
            return p


def gradient_suite(cfg: RunConfig, seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per operation."""
    rng = np.random.default_rng(seed)
    pc = probe_config(cfg)
    dim = cfg["model.dim"]
    k = len(cfg["alignment.q"])
    q = np.asarray(cfg["alignment.q"], dtype=np.float64)
    results: dict[str, float] = {}

    def run(name: str, fn: Callable[[], Tensor], params):
        results[name] = grad_check(fn, params, seed=seed)

    # visual encoder on its own
    vcfg = MiniViTConfig(image_size=pc["projection.crop_size"], patch_size=cfg["model.patch_size"], dim=dim,
                         blocks=cfg["model.blocks"], heads=cfg["model.heads"], mlp_ratio=cfg["model.mlp_ratio"])
    vit = MiniViT(vcfg, np.random.default_rng([seed, 2]), "probe", std=0.2)
    imgs = rng.uniform(0, 1, (2, vcfg.image_size, vcfg.image_size, 3))
    w_out = VIT_PROBE_SCALE * rng.normal(size=(vcfg.n_patches, dim))
    run("vit_blocks", lambda: dc.sum_over_axis(vit(imgs) * w_out), vit.params().values())

    # fusion
    c_tok = Param(rng.normal(size=(2, 3, 4, dim)))
    d_tok = Param(rng.normal(size=(2, 3, 4, dim)))
    w_f = rng.normal(size=(2, dim))
    run("fuse_visual", lambda: dc.sum_over_axis(fuse_visual(c_tok, d_tok) * w_f), [c_tok, d_tok])

    # text path: gradients reach the context tokens only
    model = QualityModel(pc)
    if model.use_text:
        w_t = rng.normal(size=(k, dim))
        run("text_context",
            lambda: dc.sum_over_axis(text_forward(model.text, build_prompts(model.prompts)) * w_t),
            [model.prompts.context])

    # similarity + scaled softmax
    f_i = Param(rng.normal(size=(3, dim)))
    f_t = Param(rng.normal(size=(k, dim)))
    log_s = Param(np.array(np.log(5.0)))
    w_p = rng.normal(size=(3, k))
    run("osd_softmax", lambda: dc.sum_over_axis(osd_probs(similarities(f_i, f_t), dc.exp(log_s)) * w_p),
        [f_i, f_t, log_s])

    # distribution losses, differentiated through a softmax
    truth = rng.dirichlet(np.ones(cfg["corpus.score_options"]), size=3)
    anchors = np.linspace(cfg["corpus.score_min"], cfg["corpus.score_max"], cfg["corpus.score_options"])
    logits = Param(np.log(_inner_probs(rng, 3, k)))
    run("emd_loss", lambda: dc.sum_over_axis(emd_loss_t(dc.softmax_lastdim(logits), q, truth, anchors)), [logits])
    run("quantile_loss",
        lambda: dc.sum_over_axis(quantile_loss_t(dc.softmax_lastdim(logits), q, truth, anchors, cfg["loss.thetas"])),
        [logits])

    # contrastive
    fc = Param(rng.normal(size=(4, 3 * dim)))
    fd = Param(rng.normal(size=(4, 3 * dim)))
    run("contrastive_loss", lambda: contrastive_loss(fc, fd, cfg["loss.tau1"], cfg["loss.exclude_positive"]),
        [fc, fd])

    # regression head
    head = RegressionHead(dim, np.random.default_rng([seed, 4]))
    feats = rng.normal(size=(4, dim))
    target = rng.normal(size=4)
    run("regression_head",
        lambda: dc.mean_over_axis((head(feats) - target) ** 2), head.params().values())

    # whole model, total loss on a two-sample batch
    color, depth, truth_b, anchors_b = _random_batch(pc, rng)
    if model.use_text:
        # a sharper softmax makes the probe exercise every loss term
        model.log_scale.data[...] = np.log(20.0)

    def total():
        out = model.forward(color, depth)
        return model.loss(out, truth_b, anchors_b, truth_b @ anchors_b).total * PROBE_SCALE

    run("total_loss", total, model.trainable().values())
    return results


def run_suite(cfg: RunConfig, seed: int = 0) -> tuple[dict[str, float], float]:
    """Suite results and the CPU seconds spent, which is the single-core
    runtime regardless of what else shares the machine."""
    t0 = time.process_time()
    res = gradient_suite(cfg, seed)
    return res, time.process_time() - t0
