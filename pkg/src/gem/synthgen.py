"""Synthetic corpus of small grayscale scenes with known, correlated factors.

Each sample is a 16x16 image rendered from n factors in [0, 1].  With the
default six factors, factor k controls exactly one visual property:

  0  background intensity (whole canvas)
  1  centered square size
  2  centered square shade
  3  bottom bar height
  4  bottom bar horizontal position
  5  corner dot radius

Elements are drawn with box-filter anti-aliasing and blended strictly above
the background (screen blend), so at quantization bucket centers every factor
is recoverable from pixels alone and distinct quantized factor vectors give
distinct images.  Correlations between factors are injected by additive
shift rules applied in list order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import relranker
from .errors import ConfigError, DataError
from .numcore import Rng

IMAGE_SIDE = 16
N_SCORE_LEVELS = 6  # ordinal scores 0..5

DEFAULT_NAMES = ("background", "square_size", "square_shade",
                 "bar_height", "bar_shift", "dot_radius")

_MAGIC = b"GEMC"
_FORMAT_VERSION = 1

# pixel-center coordinate grids, shared by every render call
_C = np.arange(IMAGE_SIDE) + 0.5
_ROW = _C[:, None]
_COL = _C[None, :]
_SQUARE_DIST = np.maximum(np.abs(_ROW - 8.0), np.abs(_COL - 8.0))
_BAR_DIST_UP = IMAGE_SIDE - _ROW                      # distance above the bottom edge
_DOT_DIST = np.hypot(_ROW - 2.0, _COL - 13.0)

_SQUARE_HALF_MAX = 3.0     # max half-side -> rows/cols 5..10
_BAR_ROWS_MAX = 4.0        # rows 12..15
_BAR_WIDTH = 8.0
_DOT_RADIUS_MAX = 2.8      # rows 0..4, cols 10..15
_BAR_STRENGTH = 0.9
_DOT_STRENGTH = 0.75


@dataclass(frozen=True)
class FactorSpec:
    """Ground-truth factor layout: count, names, correlation rules, seed."""

    n_attributes: int = 6
    names: tuple[str, ...] = DEFAULT_NAMES
    rules: tuple[tuple[int, int, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.n_attributes < 2:
            raise ConfigError("need at least 2 attributes")
        if len(self.names) != self.n_attributes:
            raise ConfigError(f"expected {self.n_attributes} names, got {len(self.names)}")
        for src, tgt, strength in self.rules:
            if src == tgt:
                raise ConfigError(f"self-rule on attribute {src}")
            if not (0 <= src < self.n_attributes and 0 <= tgt < self.n_attributes):
                raise ConfigError(f"rule ({src}, {tgt}) out of range")
            if not -1.0 <= strength <= 1.0:
                raise ConfigError(f"rule strength {strength} outside [-1, 1]")


@dataclass
class SceneSample:
    id: int
    factors: np.ndarray
    image: np.ndarray


@dataclass
class Corpus:
    spec: FactorSpec
    samples: list[SceneSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def factor_matrix(self) -> np.ndarray:
        return np.array([s.factors for s in self.samples])

    def image_matrix(self) -> np.ndarray:
        """N x side^2 matrix of flattened images."""
        return np.array([s.image.ravel() for s in self.samples])


def sample_factors(spec: FactorSpec, rng: Rng) -> np.ndarray:
    """Draw base Uniform[0,1] factors, then apply correlation rules in order."""
    f = rng.uniform(1, spec.n_attributes)[0].copy()
    for src, tgt, strength in spec.rules:
        f[tgt] = min(1.0, max(0.0, f[tgt] + strength * (f[src] - 0.5)))
    return f


def _coverage(extent: float, dist: np.ndarray) -> np.ndarray:
    # box-filter coverage; min(extent, .) keeps a zero extent fully invisible
    return np.clip(np.minimum(extent, extent - dist + 0.5), 0.0, 1.0)


def render(factors) -> np.ndarray:
    """Deterministic 16x16 grayscale render of a factor vector in [0,1]^n."""
    f = np.asarray(factors, dtype=np.float64).ravel()
    if f.size < 6:
        f = np.concatenate([f, np.zeros(6 - f.size)])
    if np.any(f < 0.0) or np.any(f > 1.0):
        raise DataError("factors must lie in [0, 1]")
    bg = f[0]
    img = np.full((IMAGE_SIDE, IMAGE_SIDE), bg)

    # steeper edge ramp than the box filter: the innermost ring saturates at
    # every nonzero size bucket, so size and shade stay separately readable
    half = _SQUARE_HALF_MAX * f[1]
    cov = np.clip(2.0 * (half - _SQUARE_DIST) + 1.0, 0.0, 1.0)
    paint = bg + f[2] * (1.0 - bg)
    img = img * (1.0 - cov) + cov * paint

    rows = _coverage(_BAR_ROWS_MAX * f[3], _BAR_DIST_UP)
    x0 = _BAR_WIDTH * f[4]
    cols = np.clip(np.minimum(x0 + _BAR_WIDTH, np.arange(IMAGE_SIDE) + 1.0)
                   - np.maximum(x0, np.arange(IMAGE_SIDE)), 0.0, 1.0)
    cov = rows * cols[None, :]
    paint = bg + _BAR_STRENGTH * (1.0 - bg)
    img = img * (1.0 - cov) + cov * paint

    cov = _coverage(_DOT_RADIUS_MAX * f[5], _DOT_DIST)
    paint = bg + _DOT_STRENGTH * (1.0 - bg)
    img = img * (1.0 - cov) + cov * paint

    return np.clip(img, 0.0, 1.0)


def factor_region(k: int) -> np.ndarray:
    """Boolean mask of pixels a factor can influence (background: everything)."""
    if k == 0:
        return np.ones((IMAGE_SIDE, IMAGE_SIDE), dtype=bool)
    if k in (1, 2):
        return _coverage(_SQUARE_HALF_MAX, _SQUARE_DIST) > 0.0
    if k in (3, 4):
        return (_coverage(_BAR_ROWS_MAX, _BAR_DIST_UP) > 0.0) & np.ones(IMAGE_SIDE, bool)[None, :]
    if k == 5:
        return _coverage(_DOT_RADIUS_MAX, _DOT_DIST) > 0.0
    raise DataError(f"no region defined for factor {k}")


def quantize_scores(factors) -> np.ndarray:
    """Map factors in [0,1] to ordinal scores 0..5 (floor of 6 bins, clamped)."""
    f = np.asarray(factors, dtype=np.float64)
    return np.minimum((f * N_SCORE_LEVELS).astype(np.int64), N_SCORE_LEVELS - 1)


def bucket_center(level: int) -> float:
    """Canonical factor value representing a quantized score level."""
    return (level + 0.5) / N_SCORE_LEVELS


def generate_corpus(spec: FactorSpec, n_samples: int) -> Corpus:
    """Render n_samples scenes; sample k uses the derived stream seed XOR k."""
    base = Rng(spec.seed)
    samples = []
    for i in range(n_samples):
        rng = base.derive(i)
        f = sample_factors(spec, rng)
        samples.append(SceneSample(id=i, factors=f, image=render(f)))
    return Corpus(spec=spec, samples=samples)


def ground_truth_relations(corpus: Corpus, convention: str = "paper") -> np.ndarray:
    """Oracle relation weights: |Somers' D| of quantized true factors, n x n."""
    if len(corpus) == 0:
        raise DataError("cannot derive relations from an empty corpus")
    n = corpus.spec.n_attributes
    if len(corpus) < 2:
        return np.zeros((n, n))
    scores = np.array([quantize_scores(s.factors) for s in corpus.samples])
    signed = relranker.relation_matrix_from_columns(scores, convention=convention)
    return np.abs(signed)


# ---------------------------------------------------------------------------
# container file: "GEMC" header + fixed-size records, little-endian


def write_corpus(corpus: Corpus, path: str) -> None:
    spec = corpus.spec
    side = IMAGE_SIDE
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", _FORMAT_VERSION, len(corpus),
                             spec.n_attributes, side))
        for s in corpus.samples:
            fh.write(struct.pack("<I", s.id))
            fh.write(np.ascontiguousarray(s.factors, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
    write_spec_sidecar(spec, len(corpus), path + ".meta")


def write_spec_sidecar(spec: FactorSpec, n_samples: int, path: str) -> None:
    lines = [
        f"format_version = {_FORMAT_VERSION}",
        f"n_attributes = {spec.n_attributes}",
        f"names = {','.join(spec.names)}",
        f"seed = {spec.seed}",
        f"n_samples = {n_samples}",
        f"image_side = {IMAGE_SIDE}",
        f"n_rules = {len(spec.rules)}",
    ]
    for k, (src, tgt, strength) in enumerate(spec.rules):
        lines.append(f"rule.{k} = {src} {tgt} {strength!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_spec_sidecar(path: str) -> FactorSpec:
    kv: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    n = int(kv["n_attributes"])
    names = tuple(kv["names"].split(","))
    rules = []
    for k in range(int(kv.get("n_rules", "0"))):
        src, tgt, strength = kv[f"rule.{k}"].split()
        rules.append((int(src), int(tgt), float(strength)))
    return FactorSpec(n_attributes=n, names=names, rules=tuple(rules),
                      seed=int(kv.get("seed", "0")))


def read_corpus(path: str) -> Corpus:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise DataError(f"not a corpus container: bad magic {magic!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise DataError("corpus header truncated")
        version, n_samples, n_attr, side = struct.unpack("<IIII", header)
        if version != _FORMAT_VERSION:
            raise DataError(f"unsupported corpus format version {version}")
        if side != IMAGE_SIDE:
            raise DataError(f"unsupported image side {side}")
        record = 4 + 8 * n_attr + 8 * side * side
        samples = []
        for _ in range(n_samples):
            raw = fh.read(record)
            if len(raw) != record:
                raise DataError("corpus record truncated")
            (sid,) = struct.unpack_from("<I", raw, 0)
            factors = np.frombuffer(raw, dtype="<f8", count=n_attr, offset=4).copy()
            image = np.frombuffer(raw, dtype="<f8", count=side * side,
                                  offset=4 + 8 * n_attr).reshape(side, side).copy()
            samples.append(SceneSample(id=sid, factors=factors, image=image))
    try:
        spec = read_spec_sidecar(path + ".meta")
    except FileNotFoundError:
        spec = FactorSpec(n_attributes=n_attr,
                          names=tuple(f"attr_{i}" for i in range(n_attr)))
    if spec.n_attributes != n_attr:
        raise DataError("sidecar and container disagree on attribute count")
    ids = [s.id for s in samples]
    if ids != list(range(len(samples))):
        raise DataError("sample ids are not dense 0..N-1")
    return Corpus(spec=spec, samples=samples)
