"""Deterministic mini-batch training, content-grouped k-fold splits, Adam with
decoupled weight decay, and the PCQC checkpoint format."""

from __future__ import annotations

import csv
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .diffcore import Param, ShapeMismatch
from .model import QualityModel
from .projection import crop_window, render_views
from .tensorio import BadMagic

CKPT_MAGIC = b"PCQC"
CKPT_VERSION = 1
TRACE_HEADER = ["epoch", "step", "l_emd", "l_quan", "l_con", "total"]


class TooFewReferences(ValueError):
    pass


class HashMismatch(ValueError):
    pass


# -- folds -------------------------------------------------------------------


def kfold_split(reference_ids: Sequence[int], k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split sample indices into k (train, test) pairs grouped by reference.

    References are shuffled with ``seed`` and dealt round-robin onto folds, so
    fold sizes differ by at most one reference.
    """
    refs = np.asarray(reference_ids)
    unique = np.unique(refs)
    if k < 2 or k > len(unique):
        raise TooFewReferences(f"{len(unique)} references cannot form {k} folds")
    order = np.random.default_rng([seed, 3]).permutation(unique)
    fold_of = {int(r): i % k for i, r in enumerate(order)}
    assignment = np.array([fold_of[int(r)] for r in refs])
    idx = np.arange(len(refs))
    return [(idx[assignment != f], idx[assignment == f]) for f in range(k)]


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Param], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              wd: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with decoupled weight decay; frozen params are skipped."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        if not p.trainable:
            continue
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if wd:
            update = update + wd * p.data
        p.data -= lr * update


# -- views -------------------------------------------------------------------


class ViewBank:
    """Full-size renders of every sample, cropped on demand."""

    def __init__(self, colors: np.ndarray, depths: np.ndarray, sample_ids: Sequence[int]):
        self.colors = colors  # (S, M, H, W, 3) uint8
        self.depths = depths  # (S, M, H, W) float32
        self.sample_ids = np.asarray(sample_ids)

    @classmethod
    def render(cls, clouds, sample_ids, m: int, size: int, radius="auto", backend=None) -> "ViewBank":
        colors = np.empty((len(clouds), m, size, size, 3), np.uint8)
        depths = np.empty((len(clouds), m, size, size), np.float32)
        for i, cloud in enumerate(clouds):
            vs = render_views(cloud, m, size, size, radius, backend)
            colors[i] = vs.colors()
            depths[i] = vs.depths()
        return cls(colors, depths, sample_ids)

    def crops(self, rows: Sequence[int], size: int, mode: str = "center", seed: int = 0, epoch: int = 0):
        """Paired color/depth crops; random windows come from (seed, sample_id, epoch)."""
        rows = list(rows)
        m, h, w = self.depths.shape[1:4]
        colors = np.empty((len(rows), m, size, size, 3), np.uint8)
        depths = np.empty((len(rows), m, size, size), np.float32)
        for i, r in enumerate(rows):
            rng = np.random.default_rng([seed, int(self.sample_ids[r]), epoch]) if mode == "random" else None
            for v in range(m):
                if mode == "random":
                    top = int(rng.integers(0, h - size + 1))
                    left = int(rng.integers(0, w - size + 1))
                else:
                    top, left = crop_window(h, w, size, "center")
                colors[i, v] = self.colors[r, v, top:top + size, left:left + size]
                depths[i, v] = self.depths[r, v, top:top + size, left:left + size]
        return colors, depths


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    frozen: set[str]
    adam: AdamState
    epoch: int
    config_hash: bytes
    seed: int

    def blocks(self):
        for name in sorted(self.params):
            yield f"param/{name}", self.params[name], name in self.frozen
        for name in sorted(self.adam.m):
            yield f"adam.m/{name}", self.adam.m[name], False
            yield f"adam.v/{name}", self.adam.v[name], False
        yield "meta/epoch", np.array(float(self.epoch)), False
        yield "meta/step", np.array(float(self.adam.t)), False
        yield "meta/seed", np.array(float(self.seed)), False


def snapshot(model: QualityModel, adam: AdamState, epoch: int, cfg: RunConfig) -> Checkpoint:
    params = model.params()
    return Checkpoint(
        params={k: p.data.copy() for k, p in params.items()},
        frozen={k for k, p in params.items() if not p.trainable},
        adam=AdamState({k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()}, adam.t),
        epoch=epoch,
        config_hash=cfg.hash(),
        seed=cfg["run.seed"],
    )


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blocks = list(ckpt.blocks())
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), ckpt.config_hash, struct.pack("<I", len(blocks))]
    for name, arr, frozen in blocks:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")  # keeps 0-d shapes; tobytes() writes C order
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", 1 if frozen else 0, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def parse_checkpoint(data: bytes, expected_hash: bytes | None = None) -> Checkpoint:
    if data[:4] != CKPT_MAGIC:
        raise BadMagic("not a PCQC checkpoint")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CKPT_VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}")
    config_hash = data[6:14]
    if expected_hash is not None and config_hash != expected_hash:
        raise HashMismatch("checkpoint was written under a different configuration")
    (count,) = struct.unpack_from("<I", data, 14)
    pos = 18
    params, frozen, m, v, meta = {}, set(), {}, {}, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        flags, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, "<f8", size, pos).reshape(dims).astype(np.float64)
        pos += 8 * size
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = arr
            if flags & 1:
                frozen.add(key)
        elif kind == "adam.m":
            m[key] = arr
        elif kind == "adam.v":
            v[key] = arr
        elif kind == "meta":
            meta[key] = float(arr.item())
    if pos != len(data):
        raise BadMagic("trailing bytes after checkpoint blocks")
    return Checkpoint(params, frozen, AdamState(m, v, int(meta.get("step", 0))),
                      int(meta.get("epoch", 0)), config_hash, int(meta.get("seed", 0)))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path, expected_hash: bytes | None = None) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), expected_hash)


def restore(model: QualityModel, ckpt: Checkpoint) -> None:
    params = model.params()
    missing = set(params) ^ set(ckpt.params)
    if missing:
        raise BadMagic(f"checkpoint and model disagree on parameters: {sorted(missing)[:5]}")
    for k, p in params.items():
        if p.data.shape != ckpt.params[k].shape:
            raise ShapeMismatch(f"{k}: checkpoint {ckpt.params[k].shape} vs model {p.data.shape}")
        p.data[...] = ckpt.params[k]


# -- training loop -----------------------------------------------------------


@dataclass
class TrainData:
    """What the trainer needs per sample, indexed like the view bank."""

    bank: ViewBank
    truth_probs: np.ndarray  # (S, L)
    truth_anchors: np.ndarray  # (L,)
    target: np.ndarray  # (S,) regression target (mean opinion score)


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # state after the last epoch
    best: Checkpoint  # state at the epoch with the lowest mean training loss
    trace: list[tuple]  # (epoch, step, l_emd, l_quan, l_con, total)
    epoch_loss: list[float]
    seconds: float


def epoch_batches(train_rows: Sequence[int], batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 5]).permutation(np.asarray(train_rows))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train(cfg: RunConfig, data: TrainData, train_rows: Sequence[int], model: QualityModel | None = None,
          resume: Checkpoint | None = None, epochs: int | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run ``epochs`` epochs (default from config), optionally resuming."""
    t0 = time.perf_counter()
    model = model or QualityModel(cfg)
    adam = AdamState()
    start = 0
    if resume is not None:
        restore(model, resume)
        adam = AdamState({k: v.copy() for k, v in resume.adam.m.items()},
                         {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.t)
        start = resume.epoch
    total_epochs = cfg["train.epochs"] if epochs is None else epochs
    seed, crop = cfg["run.seed"], cfg["projection.crop_size"]
    lr, wd = cfg["train.lr"], cfg["train.weight_decay"]
    trainable = model.trainable()
    all_params = model.params()
    trace, epoch_loss = [], []
    best = None
    best_loss = np.inf
    step = adam.t
    for epoch in range(start, total_epochs):
        losses = []
        for rows in epoch_batches(train_rows, cfg["train.batch_size"], seed, epoch):
            color, depth = data.bank.crops(rows, crop, "random", seed, epoch)
            model.zero_grad()
            out = model.forward(color, depth)
            parts = model.loss(out, data.truth_probs[rows], data.truth_anchors, data.target[rows])
            parts.total.backward()
            adam_step(all_params, {k: p.grad for k, p in trainable.items()}, adam, lr, wd)
            step += 1
            total = parts.total.item()
            trace.append((epoch + 1, step, parts.l_emd, parts.l_quan, parts.l_con, total))
            losses.append(total)
        mean_loss = float(np.mean(losses))
        epoch_loss.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss)
        if mean_loss < best_loss:
            best_loss = mean_loss
            best = snapshot(model, adam, epoch + 1, cfg)
    final = snapshot(model, adam, total_epochs, cfg)
    return TrainResult(final, best or final, trace, epoch_loss, time.perf_counter() - t0)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in trace:
            w.writerow([row[0], row[1]] + [repr(float(x)) for x in row[2:]])
