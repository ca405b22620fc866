"""Colored point clouds: PLY I/O, unit-cube normalisation, synthetic distortions
and a Gaussian oracle rater used to label the synthetic corpus."""

from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alignment import OpinionScoreDistribution


class PlyError(ValueError):
    pass


class MalformedHeader(PlyError):
    pass


class UnsupportedFormat(PlyError):
    pass


class CountMismatch(PlyError):
    pass


class BadProperty(PlyError):
    pass


class EmptyResult(ValueError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray  # (n, 3) float64
    colors: np.ndarray  # (n, 3) uint8

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        colors = np.asarray(self.colors)
        if colors.dtype != np.uint8:
            if np.any(colors < 0) or np.any(colors > 255):
                raise ValueError("colors must lie in [0, 255]")
            colors = colors.astype(np.uint8)
        self.colors = np.ascontiguousarray(colors).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise ValueError("positions and colors differ in length")
        if len(self.positions) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite coordinate")

    def __len__(self) -> int:
        return len(self.positions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.positions, other.positions) and np.array_equal(
            self.colors, other.colors
        )


# -- PLY ---------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    # (name, dtype) for scalars, (name, count_dtype, item_dtype) for lists
    props: list = field(default_factory=list)

    @property
    def has_lists(self) -> bool:
        return any(len(p) == 3 for p in self.props)


def _parse_header(data: bytes) -> tuple[str, list[_Element], int]:
    if not data.startswith(b"ply"):
        raise MalformedHeader("missing 'ply' magic")
    end = data.find(b"end_header")
    if end < 0:
        raise MalformedHeader("missing 'end_header'")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements: list[_Element] = []
    for raw in data[:end].decode("ascii", errors="replace").splitlines()[1:]:
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 3:
                raise MalformedHeader(f"bad format line: {raw!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise MalformedHeader(f"bad element line: {raw!r}")
            elements.append(_Element(parts[1], int(parts[2])))
        elif parts[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            try:
                if parts[1] == "list":
                    elements[-1].props.append(
                        (parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])
                    )
                else:
                    elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            except (KeyError, IndexError) as exc:
                raise MalformedHeader(f"bad property line: {raw!r}") from exc
        else:
            raise MalformedHeader(f"unknown header keyword: {parts[0]!r}")
    if fmt is None:
        raise MalformedHeader("missing format line")
    if fmt == "binary_big_endian":
        raise UnsupportedFormat("big-endian PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormat(f"unknown PLY format {fmt!r}")
    return fmt, elements, body_start


def _vertex_arrays(element: _Element, columns: dict[str, np.ndarray]) -> PointCloud:
    names = [p[0] for p in element.props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise BadProperty(f"vertex element lacks {axis!r}")
    for ch in ("red", "green", "blue"):
        if ch not in names:
            raise BadProperty(f"vertex element lacks {ch!r}")
    kinds = dict((p[0], p[1]) for p in element.props if len(p) == 2)
    for axis in ("x", "y", "z"):
        if kinds.get(axis) not in ("f4", "f8"):
            raise BadProperty(f"{axis!r} must be float or double")
    for ch in ("red", "green", "blue"):
        if kinds.get(ch) != "u1":
            raise BadProperty(f"{ch!r} must be uchar")
    pos = np.stack([columns[a].astype(np.float64) for a in ("x", "y", "z")], axis=1)
    col = np.stack([columns[c].astype(np.uint8) for c in ("red", "green", "blue")], axis=1)
    return PointCloud(pos, col)


def _read_ascii(body: bytes, elements: list[_Element]) -> PointCloud:
    lines = body.decode("ascii", errors="replace").splitlines()
    lines = [ln for ln in lines if ln.strip()]
    cursor = 0
    cloud = None
    for el in elements:
        rows = lines[cursor:cursor + el.count]
        if len(rows) < el.count:
            raise CountMismatch(f"element {el.name!r} declares {el.count} records, found {len(rows)}")
        cursor += el.count
        if el.name != "vertex":
            continue
        if not el.has_lists:
            try:
                table = np.array([r.split() for r in rows], dtype=np.float64)
            except ValueError as exc:
                raise CountMismatch("ragged vertex records") from exc
            table = table.reshape(el.count, len(el.props))
            columns = {p[0]: table[:, i] for i, p in enumerate(el.props)}
        else:
            columns = {p[0]: np.empty(el.count) for p in el.props if len(p) == 2}
            for r, row in enumerate(rows):
                tokens = row.split()
                t = 0
                for p in el.props:
                    if len(p) == 3:
                        t += 1 + int(tokens[t])
                    else:
                        columns[p[0]][r] = float(tokens[t])
                        t += 1
        cloud = _vertex_arrays(el, columns)
    if cloud is None:
        raise BadProperty("no vertex element")
    return cloud


def _read_binary(body: bytes, elements: list[_Element]) -> PointCloud:
    offset = 0
    cloud = None
    for el in elements:
        if not el.has_lists:
            dtype = np.dtype([(p[0], "<" + p[1]) for p in el.props])
            need = dtype.itemsize * el.count
            if offset + need > len(body):
                raise CountMismatch(f"element {el.name!r} is truncated")
            if el.name == "vertex":
                table = np.frombuffer(body, dtype=dtype, count=el.count, offset=offset)
                cloud = _vertex_arrays(el, {p[0]: table[p[0]] for p in el.props})
            offset += need
            continue
        columns = {p[0]: np.empty(el.count) for p in el.props if len(p) == 2}
        for r in range(el.count):
            for p in el.props:
                if len(p) == 3:
                    cnt_t = np.dtype("<" + p[1])
                    if offset + cnt_t.itemsize > len(body):
                        raise CountMismatch(f"element {el.name!r} is truncated")
                    n = int(np.frombuffer(body, cnt_t, 1, offset)[0])
                    offset += cnt_t.itemsize + n * np.dtype(p[2]).itemsize
                else:
                    t = np.dtype("<" + p[1])
                    if offset + t.itemsize > len(body):
                        raise CountMismatch(f"element {el.name!r} is truncated")
                    columns[p[0]][r] = np.frombuffer(body, t, 1, offset)[0]
                    offset += t.itemsize
        if offset > len(body):
            raise CountMismatch(f"element {el.name!r} is truncated")
        if el.name == "vertex":
            cloud = _vertex_arrays(el, columns)
    if cloud is None:
        raise BadProperty("no vertex element")
    return cloud


def parse_ply(data: bytes) -> PointCloud:
    """Parse an ascii or binary little-endian PLY document.

    Only the vertex element's x/y/z and red/green/blue are kept; every other
    element and property is skipped.
    """
    fmt, elements, start = _parse_header(data)
    body = data[start:]
    if fmt == "ascii":
        return _read_ascii(body, elements)
    return _read_binary(body, elements)


def read_ply(path) -> PointCloud:
    return parse_ply(Path(path).read_bytes())


def write_ply(cloud: PointCloud, format: str = "binary_le") -> bytes:
    """Serialise with double coordinates and uchar colors."""
    if format not in ("ascii", "binary_le"):
        raise UnsupportedFormat(f"unknown PLY format {format!r}")
    n = len(cloud)
    fmt_name = "ascii" if format == "ascii" else "binary_little_endian"
    header = (
        f"ply\nformat {fmt_name} 1.0\nelement vertex {n}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    ).encode("ascii")
    if format == "ascii":
        buf = io.StringIO()
        for p, c in zip(cloud.positions.tolist(), cloud.colors.tolist()):
            buf.write(f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]}\n")
        return header + buf.getvalue().encode("ascii")
    dtype = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    table = np.empty(n, dtype=dtype)
    for i, a in enumerate("xyz"):
        table[a] = cloud.positions[:, i]
    for i, ch in enumerate(("red", "green", "blue")):
        table[ch] = cloud.colors[:, i]
    return header + table.tobytes()


def save_ply(cloud: PointCloud, path, format: str = "binary_le") -> None:
    Path(path).write_bytes(write_ply(cloud, format))


# -- geometry ----------------------------------------------------------------


def normalize_to_unit_cube(cloud: PointCloud) -> PointCloud:
    """Map the bounding box into [0,1]^3, longest side to 1, aspect kept.

    Axes narrower than the longest side are centred at 0.5; a cloud whose
    points all coincide collapses to the cube centre.
    """
    pos = cloud.positions
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    extent = hi - lo
    longest = extent.max()
    if longest == 0.0:
        return PointCloud(np.full_like(pos, 0.5), cloud.colors.copy())
    out = (pos - lo) / longest + (1.0 - extent / longest) / 2.0
    # the longest axis must land exactly on [0, 1]
    k = int(np.argmax(extent))
    out[:, k] = (pos[:, k] - lo[k]) / longest
    return PointCloud(out, cloud.colors.copy())


class Distortion(str, enum.Enum):
    GEOM_NOISE = "geom_noise"
    COLOR_NOISE = "color_noise"
    DOWNSAMPLE = "downsample"
    QUANTIZE = "quantize"


KIND_OFFSETS = {
    Distortion.GEOM_NOISE: -0.3,
    Distortion.COLOR_NOISE: 0.0,
    Distortion.DOWNSAMPLE: 0.3,
    Distortion.QUANTIZE: -0.15,
}

MIN_POINTS = 8
LEVELS = range(1, 7)


def _check_level(level: int) -> None:
    if level not in LEVELS:
        raise ValueError(f"distortion level must be in 1..6, got {level}")


def apply_distortion(cloud: PointCloud, kind, level: int, seed: int) -> PointCloud:
    """Degrade a normalised cloud; output is a pure function of (kind, level, seed)."""
    kind = Distortion(kind)
    _check_level(level)
    rng = np.random.default_rng(seed)
    pos, col = cloud.positions, cloud.colors
    if kind is Distortion.GEOM_NOISE:
        pos = pos + rng.normal(0.0, 0.002 * level, size=pos.shape)
        return PointCloud(pos, col.copy())
    if kind is Distortion.COLOR_NOISE:
        noisy = col.astype(np.float64) + rng.normal(0.0, 8.0 * level, size=col.shape)
        return PointCloud(pos.copy(), np.clip(np.rint(noisy), 0, 255).astype(np.uint8))
    if kind is Distortion.DOWNSAMPLE:
        keep = int(np.floor(len(cloud) * (1.0 - 0.13 * level) + 1e-9))
        if keep < MIN_POINTS:
            raise EmptyResult(f"downsampling leaves {keep} points")
        idx = np.sort(rng.choice(len(cloud), size=keep, replace=False))
        return PointCloud(pos[idx], col[idx])
    step = 0.004 * level
    return PointCloud(np.round(pos / step) * step, col.copy())


@dataclass(frozen=True)
class ScoreScale:
    """Raw rating scale: L equally spaced options from q_min to q_max."""

    q_min: float = 1.0
    q_max: float = 5.0
    options: int = 5

    @property
    def anchors(self) -> np.ndarray:
        return np.linspace(self.q_min, self.q_max, self.options)


ORACLE_SIGMA = 0.7


def oracle_osd(kind, level: int, score_scale: ScoreScale = ScoreScale()) -> tuple[float, OpinionScoreDistribution]:
    """Synthetic rater: the true score falls linearly with level, and the
    opinion distribution is a discretised Gaussian around it."""
    kind = Distortion(kind)
    _check_level(level)
    s = score_scale
    true_score = s.q_max - (s.q_max - s.q_min) * (level - 1) / 5.0 + KIND_OFFSETS[kind]
    opts = s.anchors
    w = np.exp(-0.5 * ((opts - true_score) / ORACLE_SIGMA) ** 2)
    return true_score, OpinionScoreDistribution(w / w.sum(), opts)


# -- synthetic references ----------------------------------------------------

def _directions(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _radius(shape: int, d: np.ndarray) -> np.ndarray:
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    theta = np.arctan2(y, x)
    kind = shape % 8
    if kind == 0:
        return np.ones(len(d))
    if kind == 1:  # ellipsoid
        return 1.0 / np.sqrt((x / 1.0) ** 2 + (y / 0.75) ** 2 + (z / 0.6) ** 2)
    if kind == 2:  # rounded cube
        return (np.abs(x) ** 4 + np.abs(y) ** 4 + np.abs(z) ** 4) ** -0.25
    if kind == 3:  # lobed
        return 1.0 + 0.25 * np.cos(4 * theta) * (1 - z * z)
    if kind == 4:  # peanut
        return 0.7 + 0.35 * x * x + 0.1 * z
    if kind == 5:  # wavy
        return 1.0 + 0.12 * np.sin(6 * z) + 0.08 * np.cos(5 * theta)
    if kind == 6:  # squashed cylinder-ish
        return (np.abs(z) ** 6 * 1.6 + (x * x + y * y) ** 3) ** (-1.0 / 6.0)
    return 1.0 + 0.3 * z * z - 0.15 * np.sin(3 * theta) * x  # egg


def _texture(pattern: int, p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(60, 200, size=(3,))
    alt = rng.uniform(40, 220, size=(3,))
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    kind = pattern % 4
    if kind == 0:  # stripes
        t = 0.5 + 0.5 * np.sin(14 * z + 3 * x)
    elif kind == 1:  # checker
        t = ((np.floor(x * 6) + np.floor(y * 6) + np.floor(z * 6)) % 2).astype(float)
    elif kind == 2:  # smooth gradient
        t = np.clip(0.5 * (x + y), 0, 1)
    else:  # blotches
        t = 0.5 + 0.5 * np.sin(9 * x) * np.cos(8 * y) * np.sin(7 * z + 1)
    col = base[None, :] * (1 - t[:, None]) + alt[None, :] * t[:, None]
    return np.clip(np.rint(col), 0, 255).astype(np.uint8)


def make_reference(reference_id: int, n_points: int, seed: int) -> PointCloud:
    """A textured closed surface, normalised to the unit cube."""
    rng = np.random.default_rng([seed, reference_id])
    d = _directions(n_points, rng)
    r = _radius(reference_id, d)
    pos = d * r[:, None]
    cloud = normalize_to_unit_cube(PointCloud(pos, np.zeros((n_points, 3), np.uint8)))
    col = _texture(reference_id + reference_id // 8, cloud.positions, rng)
    return PointCloud(cloud.positions, col)


@dataclass
class CorpusSample:
    sample_id: int
    reference_id: int
    distortion_kind: Distortion
    level: int
    osd_label: OpinionScoreDistribution
    true_score: float
    cloud: PointCloud | None = None
    ply_path: str = ""


def sample_seed(seed: int, sample_index: int) -> int:
    return seed ^ sample_index


def synthesize_corpus(
    n_references: int = 8,
    points_per_reference: int = 4000,
    seed: int = 0,
    score_scale: ScoreScale = ScoreScale(),
    kinds: Sequence = tuple(Distortion),
    levels: Iterable[int] = LEVELS,
) -> list[CorpusSample]:
    """Every reference crossed with every distortion kind and level."""
    levels = list(levels)
    out = []
    idx = 0
    for ref in range(n_references):
        base = make_reference(ref, points_per_reference, seed)
        for kind in kinds:
            for level in levels:
                cloud = apply_distortion(base, kind, level, sample_seed(seed, idx))
                score, osd = oracle_osd(kind, level, score_scale)
                out.append(CorpusSample(idx, ref, Distortion(kind), level, osd, score, cloud))
                idx += 1
    return out


MANIFEST = "manifest.csv"


def write_corpus(samples: Sequence[CorpusSample], out_dir, format: str = "binary_le") -> Path:
    """Write one PLY per sample plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "ply").mkdir(parents=True, exist_ok=True)
    n_opts = len(samples[0].osd_label.probs)
    manifest = out / MANIFEST
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "reference_id", "kind", "level", "true_score"]
                   + [f"p{i + 1}" for i in range(n_opts)] + ["ply_path"])
        for s in samples:
            rel = f"ply/{s.sample_id:05d}.ply"
            save_ply(s.cloud, out / rel, format)
            s.ply_path = rel
            w.writerow([s.sample_id, s.reference_id, s.distortion_kind.value, s.level,
                        repr(float(s.true_score))]
                       + [repr(float(p)) for p in s.osd_label.probs] + [rel])
    return manifest


def read_manifest(corpus_dir, anchors: np.ndarray | None = None, load_clouds: bool = False) -> list[CorpusSample]:
    """Load a corpus manifest.  ``anchors`` defaults to options 1..L."""
    root = Path(corpus_dir)
    samples = []
    with open(root / MANIFEST, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader)
        n_opts = sum(1 for h in head if h.startswith("p") and h[1:].isdigit())
        opts = np.arange(1, n_opts + 1, dtype=float) if anchors is None else np.asarray(anchors, float)
        for row in reader:
            if not row:
                continue
            probs = np.array([float(v) for v in row[5:5 + n_opts]])
            s = CorpusSample(
                sample_id=int(row[0]),
                reference_id=int(row[1]),
                distortion_kind=Distortion(row[2]),
                level=int(row[3]),
                osd_label=OpinionScoreDistribution(probs, opts),
                true_score=float(row[4]),
                ply_path=row[5 + n_opts],
            )
            if load_clouds:
                s.cloud = read_ply(root / s.ply_path)
            samples.append(s)
    return samples


def ply_path(corpus_dir, sample: CorpusSample) -> str:
    return os.path.join(str(corpus_dir), sample.ply_path)
