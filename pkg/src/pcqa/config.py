"""Flat ``section.key = value`` run configuration.

Every knob has a typed default below; unknown keys are rejected.  The
canonical form (sorted ``key = value`` lines) is hashed into checkpoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


# key -> (type tag, default).  Type tags: int, float, bool, str, floats, strs,
# and "int|auto" / "float|auto" for values that may be the literal ``auto``.
SCHEMA: dict[str, tuple[str, Any]] = {
    "run.seed": ("int", 0),
    "corpus.references": ("int", 8),
    "corpus.points": ("int", 12000),
    "corpus.kinds": ("strs", ("geom_noise", "color_noise", "downsample", "quantize")),
    "corpus.score_min": ("float", 1.0),
    "corpus.score_max": ("float", 5.0),
    "corpus.score_options": ("int", 5),
    "corpus.ply_format": ("str", "binary_le"),
    "projection.views": ("int", 6),
    "projection.render_size": ("int", 256),
    "projection.splat_radius": ("int|auto", "auto"),
    "projection.crop_size": ("int", 64),
    "projection.backend": ("str", "auto"),
    "model.patch_size": ("int", 8),
    "model.dim": ("int", 32),
    "model.blocks": ("int", 2),
    "model.heads": ("int", 4),
    "model.mlp_ratio": ("float", 4.0),
    "model.text_blocks": ("int", 2),
    "model.text_heads": ("int", 4),
    "model.context_tokens": ("int", 16),
    "model.prompt_position": ("str", "middle"),
    "model.color": ("bool", True),
    "model.depth": ("bool", True),
    "model.text": ("bool", True),
    "alignment.levels": ("strs", ("excellent", "good", "fair", "poor", "bad")),
    "alignment.q": ("floats", (5.0, 4.0, 3.0, 2.0, 1.0)),
    "alignment.scale": ("float", 10.0),
    "alignment.scale_mode": ("str", "learnable"),
    "loss.alpha": ("float|auto", "auto"),
    "loss.beta": ("float", 0.08),
    "loss.tau1": ("float", 0.07),
    "loss.thetas": ("floats", (0.25, 0.5, 0.75)),
    "loss.exclude_positive": ("bool", False),
    "loss.emd": ("bool", True),
    "loss.quan": ("bool", True),
    "loss.con": ("bool", True),
    "train.batch_size": ("int", 8),
    "train.epochs": ("int", 30),
    "train.lr": ("float", 3e-4),
    "train.weight_decay": ("float", 1e-4),
    "train.folds": ("int", 5),
}

CHOICES = {
    "corpus.ply_format": ("ascii", "binary_le"),
    "projection.backend": ("auto", "cython", "numpy"),
    "model.prompt_position": ("begin", "middle", "end"),
    "alignment.scale_mode": ("fixed", "learnable"),
}

# Settings the method was published with; anything else is listed as a deviation.
PUBLISHED_SETTINGS = {
    "alignment.scale": 1.0,
    "alignment.scale_mode": "fixed",
    "train.lr": 4e-6,
    "train.batch_size": 16,
    "train.epochs": 50,
    "projection.crop_size": 224,
    "model.patch_size": 16,
    "model.dim": 768,
    "model.blocks": 12,
    "model.heads": 12,
}
UNSTATED = {
    "loss.tau1": "contrastive temperature is not published; 0.07 is the usual choice",
    "text_pooling": "text features are mean-pooled and projected instead of end-token pooled",
    "depth_normalisation": "depth is the global unit-cube axis distance, not per-view normalised",
}


def _parse(tag: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if tag.endswith("|auto") and raw == "auto":
            return "auto"
        base = tag.split("|")[0]
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base == "bool":
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if base == "str":
            return raw
        if base == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if base == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unknown type for {key}")


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v for k, (_, v) in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def set(self, key: str, raw) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        tag = SCHEMA[key][0]
        value = _parse(tag, raw, key) if isinstance(raw, str) else raw
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
        if isinstance(value, list):
            value = tuple(value)
        self.values[key] = value

    def updated(self, **overrides) -> "RunConfig":
        """Copy with overrides given as ``section__key=value``."""
        out = RunConfig(dict(self.values))
        for k, v in overrides.items():
            out.set(k.replace("__", "."), v)
        return out

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'section.key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            cfg.set(key, raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def validate(self) -> None:
        v = self.values
        if len(v["alignment.q"]) != len(v["alignment.levels"]):
            raise ConfigError("alignment.q and alignment.levels differ in length")
        if v["loss.con"] and v["loss.beta"] > 0 and v["model.color"] and v["model.depth"]:
            if v["train.batch_size"] * v["projection.views"] < 2:
                raise ConfigError("contrastive term needs batch_size * views >= 2")
        if v["model.prompt_position"] == "middle" and v["model.context_tokens"] % 2:
            raise ConfigError("middle prompt insertion needs an even context length")
        if not (v["model.color"] or v["model.depth"]):
            raise ConfigError("at least one visual modality must be enabled")
        if v["projection.crop_size"] > v["projection.render_size"]:
            raise ConfigError("crop_size exceeds render_size")
        if v["projection.crop_size"] % v["model.patch_size"]:
            raise ConfigError("crop_size must be divisible by patch_size")

    def canonical(self) -> str:
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in sorted(self.values))

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical().encode()).digest()[:8]

    @property
    def alpha(self) -> float:
        a = self.values["loss.alpha"]
        return 1.0 / len(self.values["alignment.q"]) if a == "auto" else float(a)

    def deviations(self) -> dict[str, str]:
        out = {}
        for key, published in PUBLISHED_SETTINGS.items():
            if self.values[key] != published:
                out[key] = f"{_render(self.values[key])} (published: {_render(published)})"
        for key, why in UNSTATED.items():
            out[key] = f"{_render(self.values[key]) + ': ' if key in self.values else ''}{why}"
        return out

    def metadata(self) -> str:
        """Run metadata: every config value plus a ``deviations`` section."""
        lines = ["[config]"] + self.canonical().splitlines() + ["", "[deviations]"]
        lines += [f"{k} = {v}" for k, v in sorted(self.deviations().items())]
        return "\n".join(lines) + "\n"


def default_config() -> RunConfig:
    cfg = RunConfig()
    cfg.validate()
    return cfg
