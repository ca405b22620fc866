"""The full quality model: two visual encoders, fusion, prompt features and
the retrieval head (or the regression head when the text branch is off)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .alignment import QualityLevels, RegressionHead, expected_score, similarities, osd_probs
from .config import RunConfig
from .diffcore import Param, Tensor
from .encoders import FrozenTextEncoder, MiniViT, MiniViTConfig, PromptSet, build_prompts, fuse_visual
from .losses import LossWeights, contrastive_loss, emd_loss_t, quantile_loss_t

# Depth maps live in [0, 1] with the background at 1; centring them keeps the
# depth patch embedding roughly zero-mean like the colour branch.
DEPTH_CENTER = 0.5


@dataclass
class ModelOutput:
    features: Tensor  # (B, C)
    score: Tensor  # (B,)
    probs: Tensor | None  # (B, K); None with the regression head
    color_flat: Tensor | None  # (B*M, N*C)
    depth_flat: Tensor | None


@dataclass
class LossParts:
    total: Tensor
    l_emd: float
    l_quan: float
    l_con: float


class QualityModel:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        seed = cfg["run.seed"]
        rng = np.random.default_rng([seed, 1])
        self.levels = QualityLevels(tuple(cfg["alignment.levels"]), tuple(cfg["alignment.q"]))
        dim = cfg["model.dim"]
        common = dict(image_size=cfg["projection.crop_size"], patch_size=cfg["model.patch_size"], dim=dim,
                      blocks=cfg["model.blocks"], heads=cfg["model.heads"], mlp_ratio=cfg["model.mlp_ratio"])
        self.color_vit = MiniViT(MiniViTConfig(channels=3, **common), rng, "color") if cfg["model.color"] else None
        self.depth_vit = MiniViT(MiniViTConfig(channels=1, **common), rng, "depth") if cfg["model.depth"] else None
        self.use_text = cfg["model.text"]
        if self.use_text:
            self.prompts = PromptSet(dim, cfg["model.context_tokens"], self.levels.descriptions,
                                     cfg["model.prompt_position"], seed)
            self.text = FrozenTextEncoder(dim, dim, cfg["model.text_blocks"], cfg["model.text_heads"], seed=seed)
            self.log_scale = Param(np.array(math.log(cfg["alignment.scale"])),
                                   trainable=cfg["alignment.scale_mode"] == "learnable",
                                   name="alignment.log_scale")
            self.head = None
        else:
            self.head = RegressionHead(dim, rng)
        self.weights = LossWeights(cfg.alpha, cfg["loss.beta"], cfg["loss.tau1"])

    # -- parameters ------------------------------------------------------------
    def params(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for vit in (self.color_vit, self.depth_vit):
            if vit is not None:
                out.update(vit.params())
        if self.use_text:
            out.update(self.prompts.params())
            out.update(self.text.params())
            out[self.log_scale.name] = self.log_scale
        else:
            out.update(self.head.params())
        return out

    def trainable(self) -> dict[str, Param]:
        return {k: p for k, p in self.params().items() if p.trainable}

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    # -- forward -----------------------------------------------------------------
    def text_features(self) -> Tensor:
        return self.text(build_prompts(self.prompts))

    def scale(self) -> Tensor:
        return dc.exp(self.log_scale)

    def forward(self, color: np.ndarray, depth: np.ndarray) -> ModelOutput:
        """``color`` (B, M, h, w, 3) uint8 and ``depth`` (B, M, h, w) in [0, 1]."""
        b, m = depth.shape[:2]
        c_tok = d_tok = c_flat = d_flat = None
        if self.color_vit is not None:
            c = np.asarray(color, dtype=np.float64).reshape((b * m,) + color.shape[2:]) / 255.0
            c_tok = self.color_vit(c)
            n, dim = c_tok.shape[1:]
            c_flat = dc.reshape(c_tok, (b * m, n * dim))
            c_tok = dc.reshape(c_tok, (b, m, n, dim))
        if self.depth_vit is not None:
            d = np.asarray(depth, dtype=np.float64).reshape((b * m,) + depth.shape[2:])
            d = d - DEPTH_CENTER
            d_tok = self.depth_vit(d)
            n, dim = d_tok.shape[1:]
            d_flat = dc.reshape(d_tok, (b * m, n * dim))
            d_tok = dc.reshape(d_tok, (b, m, n, dim))
        if c_tok is not None and d_tok is not None:
            feats = fuse_visual(c_tok, d_tok)
        else:
            feats = fuse_visual(c_tok if c_tok is not None else d_tok)
        if self.use_text:
            pi = similarities(feats, self.text_features())
            probs = osd_probs(pi, self.scale())
            score = expected_score(probs, self.levels.anchors)
        else:
            probs = None
            score = self.head(feats)
        return ModelOutput(feats, score, probs, c_flat, d_flat)

    def loss(self, out: ModelOutput, truth_probs, truth_anchors, target_score=None) -> LossParts:
        """Weighted training loss.  With the regression head the first term is
        the MSE against ``target_score`` and the quantile term is dropped."""
        cfg = self.cfg
        zero = Tensor(0.0)
        if self.use_text:
            emd = dc.mean_over_axis(emd_loss_t(out.probs, self.levels.anchors, truth_probs, truth_anchors)) \
                if cfg["loss.emd"] else zero
            quan = dc.mean_over_axis(quantile_loss_t(out.probs, self.levels.anchors, truth_probs, truth_anchors,
                                                     cfg["loss.thetas"])) if cfg["loss.quan"] else zero
        else:
            diff = out.score - np.asarray(target_score, dtype=np.float64)
            emd = dc.mean_over_axis(diff * diff)
            quan = zero
        con = zero
        if (cfg["loss.con"] and self.weights.beta > 0 and out.color_flat is not None
                and out.depth_flat is not None and out.color_flat.shape[0] >= 2):
            con = contrastive_loss(out.color_flat, out.depth_flat, self.weights.tau1, cfg["loss.exclude_positive"])
        total = emd + quan * self.weights.alpha + con * self.weights.beta
        return LossParts(total, emd.item(), quan.item(), con.item())

    def predict(self, color: np.ndarray, depth: np.ndarray, chunk: int = 16):
        """Scores (B,), OSDs (B, K) or None, fused features (B, C) without recording gradients."""
        scores, probs, feats = [], [], []
        with dc.no_grad():
            for i in range(0, len(depth), chunk):
                out = self.forward(color[i:i + chunk], depth[i:i + chunk])
                scores.append(out.score.data)
                feats.append(out.features.data)
                if out.probs is not None:
                    probs.append(out.probs.data)
        return (np.concatenate(scores), np.concatenate(probs) if probs else None, np.concatenate(feats))
