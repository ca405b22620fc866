"""``pcqa`` command line: synth, project, train, eval, predict, gradcheck, pca.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 check failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import ConfigError, RunConfig, default_config
from .gradcheck import TOLERANCE, run_suite
from .pointcloud import PlyError, normalize_to_unit_cube, read_ply, write_corpus
from .projection import EmptyCloud, crop_patch, render_views
from .tensorio import BadMagic
from .training import HashMismatch, TooFewReferences, load_checkpoint, save_checkpoint, write_trace
from .evaluation import pca2d

EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 2, 3, 4


class CheckFailed(Exception):
    pass


DATA_ERRORS = (OSError, PlyError, EmptyCloud, BadMagic, HashMismatch, TooFewReferences, IndexError,
               KeyError, ValueError)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.updated(run__seed=args.seed)
        cfg.validate()
    return cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_metadata(cfg: RunConfig, out: Path, name: str = "metadata.txt") -> None:
    (out / name).write_text(cfg.metadata())


def _checkpoint(cfg: RunConfig, args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return load_checkpoint(args.checkpoint, cfg.hash())


# -- commands ------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> None:
    out = _out(args, "corpus")
    samples = pl.synthesize(cfg)
    write_corpus(samples, out, cfg["corpus.ply_format"])
    _write_metadata(cfg, out)
    print(f"wrote {len(samples)} samples to {out}")


def cmd_project(cfg: RunConfig, args) -> None:
    corpus = Path(args.corpus)
    out = _out(args, str(corpus / "views"))
    samples = pl.load_corpus(corpus, cfg, load_clouds=True)
    pl.save_bank(pl.render_bank(cfg, samples), out)
    print(f"rendered {len(samples)} x {cfg['projection.views']} views to {out}")


def cmd_train(cfg: RunConfig, args) -> None:
    corpus = Path(args.corpus)
    out = _out(args, f"runs/fold{args.fold}")
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "model.pcqc"
    samples = pl.load_corpus(corpus, cfg)
    data = pl.train_data(pl.corpus_bank(cfg, corpus, samples, args.views), samples)
    train_rows, _ = pl.fold_rows(cfg, samples, args.fold)
    from .training import train

    result = train(cfg, data, train_rows, on_epoch=lambda e, l: print(f"epoch {e}: loss={l:.6f}", flush=True))
    save_checkpoint(result.best, ckpt_path)
    save_checkpoint(result.checkpoint, ckpt_path.with_name(ckpt_path.stem + "_last" + ckpt_path.suffix))
    write_trace(result.trace, out / "trace.csv")
    _write_metadata(cfg, out)
    print(f"checkpoint {ckpt_path}")


def cmd_eval(cfg: RunConfig, args) -> None:
    corpus = Path(args.corpus)
    out = _out(args, f"runs/fold{args.fold}")
    model = pl.model_from_checkpoint(cfg, _checkpoint(cfg, args))
    samples = pl.load_corpus(corpus, cfg)
    data = pl.train_data(pl.corpus_bank(cfg, corpus, samples, args.views), samples)
    _, test_rows = pl.fold_rows(cfg, samples, args.fold)
    report = pl.evaluate_rows(cfg, model, data, samples, test_rows)
    report.write(out, f"eval_fold{args.fold}")
    _write_metadata(cfg, out)
    print(report.summary())


def cmd_predict(cfg: RunConfig, args) -> None:
    model = pl.model_from_checkpoint(cfg, _checkpoint(cfg, args))
    cloud = normalize_to_unit_cube(read_ply(args.ply))
    size = cfg["projection.render_size"]
    views = render_views(cloud, cfg["projection.views"], size, size, cfg["projection.splat_radius"],
                         None if cfg["projection.backend"] == "auto" else cfg["projection.backend"])
    crops = [crop_patch(v, cfg["projection.crop_size"], "center") for v in views.views]
    color = np.stack([c.color for c in crops])[None]
    depth = np.stack([c.depth for c in crops])[None]
    scores, probs, _ = model.predict(color, depth)
    w = csv.writer(sys.stdout, lineterminator="\n")
    if probs is None:
        w.writerow(["score"])
        w.writerow([repr(float(scores[0]))])
        return
    w.writerow([f"p_{d}" for d in model.levels.descriptions] + ["score"])
    w.writerow([repr(float(p)) for p in probs[0]] + [repr(float(scores[0]))])


def cmd_gradcheck(cfg: RunConfig, args) -> None:
    results, seconds = run_suite(cfg, cfg["run.seed"])
    for name, err in results.items():
        print(f"{name}: {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    print(f"max={max(results.values()):.3e} cpu_seconds={seconds:.1f}")
    if max(results.values()) >= TOLERANCE:
        raise CheckFailed("gradient check above tolerance")


def cmd_pca(cfg: RunConfig, args) -> None:
    corpus = Path(args.corpus)
    out = _out(args, "runs/pca")
    model = pl.model_from_checkpoint(cfg, _checkpoint(cfg, args))
    samples = pl.load_corpus(corpus, cfg)
    bank = pl.corpus_bank(cfg, corpus, samples, args.views)
    scores, probs, feats = pl.predict_rows(cfg, model, bank, range(len(samples)))
    xy = pca2d(feats, seed=cfg["run.seed"])
    if probs is not None:
        levels = [model.levels.descriptions[i] for i in np.argmax(probs, axis=1)]
    else:
        # nearest anchor to the regressed score
        q = np.asarray(model.levels.q)
        levels = [model.levels.descriptions[int(np.argmin(np.abs(q - s)))] for s in scores]
    path = out / "pca.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "pc1", "pc2", "level"])
        for s, (a, b), lev in zip(samples, xy, levels):
            w.writerow([s.sample_id, repr(float(a)), repr(float(b)), lev])
    _write_metadata(cfg, out)
    print(f"wrote {path}")


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic corpus (PLYs and manifest)"),
    "project": (cmd_project, "render and store the views of every corpus sample"),
    "train": (cmd_train, "train on the training references of one fold"),
    "eval": (cmd_eval, "evaluate a checkpoint on the held-out references of one fold"),
    "predict": (cmd_predict, "print the OSD and score of one PLY file"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every differentiable operation"),
    "pca": (cmd_pca, "2-D PCA of fused visual features with predicted quality levels"),
}
NEEDS_CORPUS = {"project", "train", "eval", "pca"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if name in NEEDS_CORPUS:
            p.add_argument("corpus", help="corpus directory written by synth")
        if name == "predict":
            p.add_argument("ply", help="point cloud to score")
        p.add_argument("--config", help="config file of 'section.key = value' lines")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        if name in ("train", "eval"):
            p.add_argument("--fold", type=int, default=0)
        if name in ("train", "eval", "predict", "pca"):
            p.add_argument("--checkpoint", help="checkpoint path")
        if name in ("train", "eval", "pca"):
            p.add_argument("--views", help="stored views (default <corpus>/views, rendered if missing)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
