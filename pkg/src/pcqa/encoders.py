"""Miniature vision transformers for color and depth views, view/patch fusion,
learnable quality prompts and the frozen text transformer."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .alignment import BT500_LEVELS
from .diffcore import Param, ShapeMismatch, Tensor


class OddContextLength(ValueError):
    pass


@dataclass(frozen=True)
class MiniViTConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 32
    blocks: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))


# -- transformer pieces ------------------------------------------------------


def _block_params(prefix: str, dim: int, hidden: int, rng, trainable: bool,
                  std: float | None) -> dict[str, Param]:
    """Weights for one pre-norm block; ``std=None`` scales each matrix by 1/sqrt(fan_in)."""
    def p(name, value):
        return Param(value, trainable=trainable, name=f"{prefix}.{name}")

    def w(fan_in, fan_out):
        return rng.normal(0, std if std is not None else 1 / math.sqrt(fan_in), (fan_in, fan_out))

    return {
        "ln1.g": p("ln1.g", np.ones(dim)),
        "ln1.b": p("ln1.b", np.zeros(dim)),
        "qkv.w": p("qkv.w", w(dim, 3 * dim)),
        "qkv.b": p("qkv.b", np.zeros(3 * dim)),
        "proj.w": p("proj.w", w(dim, dim)),
        "proj.b": p("proj.b", np.zeros(dim)),
        "ln2.g": p("ln2.g", np.ones(dim)),
        "ln2.b": p("ln2.b", np.zeros(dim)),
        "fc1.w": p("fc1.w", w(dim, hidden)),
        "fc1.b": p("fc1.b", np.zeros(hidden)),
        "fc2.w": p("fc2.w", w(hidden, dim)),
        "fc2.b": p("fc2.b", np.zeros(dim)),
    }


def self_attention(x: Tensor, blk: dict[str, Param], heads: int) -> Tensor:
    s, t, c = x.shape
    d = c // heads
    qkv = dc.reshape(x @ blk["qkv.w"] + blk["qkv.b"], (s, t, 3, heads, d))
    qkv = dc.transpose(qkv, (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = dc.softmax_lastdim(dc.scale(q @ dc.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(d)))
    out = dc.reshape(dc.transpose(att @ v, (0, 2, 1, 3)), (s, t, c))
    return out @ blk["proj.w"] + blk["proj.b"]


def transformer_block(x: Tensor, blk: dict[str, Param], heads: int) -> Tensor:
    """Pre-norm residual block: attention then GELU MLP."""
    x = x + self_attention(dc.layer_norm(x, blk["ln1.g"], blk["ln1.b"]), blk, heads)
    h = dc.gelu(dc.layer_norm(x, blk["ln2.g"], blk["ln2.b"]) @ blk["fc1.w"] + blk["fc1.b"])
    return x + (h @ blk["fc2.w"] + blk["fc2.b"])


# -- visual encoder ----------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(S, H, W, ch) -> (S, N, patch*patch*ch), patches in row-major order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    s, h, w, ch = images.shape
    x = images.reshape(s, h // patch, patch, w // patch, patch, ch)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(s, (h // patch) * (w // patch), patch * patch * ch)


class MiniViT:
    """Patch embedding, class token, learned positions and pre-norm blocks."""

    def __init__(self, config: MiniViTConfig, rng: np.random.Generator, prefix: str = "vit",
                 std: float | None = None, embed_std: float = 0.02):
        self.config = config
        self.prefix = prefix
        cfg = config
        fan_in = cfg.patch_size ** 2 * cfg.channels
        self.patch_w = Param(rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, cfg.dim)), name=f"{prefix}.patch.w")
        self.patch_b = Param(np.zeros(cfg.dim), name=f"{prefix}.patch.b")
        self.cls = Param(rng.normal(0, embed_std, cfg.dim), name=f"{prefix}.cls")
        self.pos = Param(rng.normal(0, embed_std, (cfg.n_patches + 1, cfg.dim)), name=f"{prefix}.pos")
        self.blocks = [
            _block_params(f"{prefix}.block{i}", cfg.dim, cfg.hidden, rng, True, std)
            for i in range(cfg.blocks)
        ]

    def params(self) -> dict[str, Param]:
        out = {p.name: p for p in (self.patch_w, self.patch_b, self.cls, self.pos)}
        for blk in self.blocks:
            out.update({p.name: p for p in blk.values()})
        return out

    def __call__(self, images) -> Tensor:
        return vit_forward(self, images)


def vit_forward(vit: MiniViT, images) -> Tensor:
    """Last-layer patch tokens (S, N, C); the class token is dropped.

    ``images`` is a batch (S, H, W, ch) -- or (S, H, W) for one channel -- or
    a single image (H, W, 3) / (H, W), with values already scaled to [0, 1].
    A single image gives (N, C).
    """
    cfg = vit.config
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 2 or (arr.ndim == 3 and cfg.channels > 1)
    if single:
        arr = arr[None]
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeMismatch(f"expected images of {(cfg.image_size, cfg.image_size, cfg.channels)}, got {arr.shape[1:]}")
    s = arr.shape[0]
    tokens = Tensor(patchify(arr, cfg.patch_size)) @ vit.patch_w + vit.patch_b
    cls = dc.add(np.zeros((s, 1, cfg.dim)), vit.cls)
    z = dc.concat([cls, tokens], axis=1) + vit.pos
    for blk in vit.blocks:
        z = transformer_block(z, blk, cfg.heads)
    out = z[:, 1:, :]
    return dc.reshape(out, out.shape[1:]) if single else out


def fuse_visual(color_tokens, depth_tokens=None) -> Tensor:
    """Mean over modalities, views and patches.

    Inputs are (..., M, N, C); leading axes are kept, so a batch (B, M, N, C)
    gives (B, C).  Passing a single modality averages that modality alone.
    """
    c = dc.as_tensor(color_tokens)
    if depth_tokens is None:
        return dc.mean_over_axis(c, axis=(-3, -2))
    d = dc.as_tensor(depth_tokens)
    if c.shape != d.shape:
        raise ShapeMismatch(f"color {c.shape} vs depth {d.shape}")
    return dc.scale(dc.mean_over_axis(c, axis=(-3, -2)) + dc.mean_over_axis(d, axis=(-3, -2)), 0.5)


# -- text side -----------------------------------------------------------------


def adjective_table(words, dim: int, seed: int = 0, std: float = 1.0) -> np.ndarray:
    """Fixed pseudo word embeddings, one seeded row per word."""
    rows = []
    for w in words:
        digest = hashlib.sha256(f"{seed}:{w}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        rows.append(rng.normal(0, std, dim))
    return np.stack(rows)


class PromptSet:
    """W learnable context tokens around K frozen quality-adjective embeddings."""

    POSITIONS = ("begin", "middle", "end")

    def __init__(self, dim: int, context_tokens: int = 16, levels=BT500_LEVELS,
                 insert_position: str = "middle", seed: int = 0, context_std: float = 0.02):
        if insert_position not in self.POSITIONS:
            raise ValueError(f"insert_position must be one of {self.POSITIONS}")
        rng = np.random.default_rng([seed, 7])
        self.context = Param(rng.normal(0, context_std, (context_tokens, dim)), name="prompt.context")
        self.adjectives = Param(adjective_table(levels, dim, seed), trainable=False, name="prompt.adjectives")
        self.insert_position = insert_position
        self.levels = tuple(levels)

    @property
    def w(self) -> int:
        return self.context.shape[0]

    @property
    def k(self) -> int:
        return self.adjectives.shape[0]

    def params(self) -> dict[str, Param]:
        return {self.context.name: self.context, self.adjectives.name: self.adjectives}


def build_prompts(prompt_set: PromptSet) -> Tensor:
    """(K, W+1, C_t) token sequences, one per quality level."""
    w, k = prompt_set.w, prompt_set.k
    dim = prompt_set.context.shape[1]
    ctx, adj = prompt_set.context, prompt_set.adjectives

    def tile(rows: Tensor) -> Tensor:
        return dc.add(np.zeros((k, rows.shape[0], dim)), rows)

    adj_col = dc.reshape(adj, (k, 1, dim))
    pos = prompt_set.insert_position
    if pos == "middle":
        if w % 2:
            raise OddContextLength("middle insertion needs an even number of context tokens")
        half = w // 2
        parts = [tile(ctx[:half]), adj_col, tile(ctx[half:])]
    elif pos == "begin":
        parts = [adj_col, tile(ctx)]
    else:
        parts = [tile(ctx), adj_col]
    parts = [p for p in parts if p.shape[1] > 0]
    return dc.concat(parts, axis=1)


class FrozenTextEncoder:
    """Seeded transformer whose weights never change; mean-pooled output is
    projected to the visual feature width."""

    def __init__(self, dim: int, out_dim: int, blocks: int = 2, heads: int = 4,
                 max_len: int = 77, seed: int = 0, std: float = 0.1):
        rng = np.random.default_rng([seed, 11])
        self.heads = heads
        self.pos = Param(rng.normal(0, std, (max_len, dim)), trainable=False, name="text.pos")
        self.blocks = [
            _block_params(f"text.block{i}", dim, 4 * dim, rng, False, std) for i in range(blocks)
        ]
        self.ln_g = Param(np.ones(dim), trainable=False, name="text.ln.g")
        self.ln_b = Param(np.zeros(dim), trainable=False, name="text.ln.b")
        self.proj = Param(rng.normal(0, 1 / math.sqrt(dim), (dim, out_dim)), trainable=False, name="text.proj")

    def params(self) -> dict[str, Param]:
        out = {p.name: p for p in (self.pos, self.ln_g, self.ln_b, self.proj)}
        for blk in self.blocks:
            out.update({p.name: p for p in blk.values()})
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.params().items()):
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def __call__(self, prompts) -> Tensor:
        return text_forward(self, prompts)


def text_forward(enc: FrozenTextEncoder, prompt) -> Tensor:
    """Text feature(s): a (T, C_t) prompt gives (C,), a (K, T, C_t) stack gives (K, C)."""
    x = dc.as_tensor(prompt)
    single = x.ndim == 2
    if single:
        x = dc.reshape(x, (1,) + x.shape)
    t, dim = x.shape[1], x.shape[2]
    if dim != enc.pos.shape[1] or t > enc.pos.shape[0]:
        raise ShapeMismatch(f"prompt of shape {x.shape[1:]} does not fit the text encoder")
    x = x + enc.pos[:t]
    for blk in enc.blocks:
        x = transformer_block(x, blk, enc.heads)
    x = dc.layer_norm(x, enc.ln_g, enc.ln_b)
    out = dc.mean_over_axis(x, axis=1) @ enc.proj
    return dc.reshape(out, (out.shape[-1],)) if single else out
