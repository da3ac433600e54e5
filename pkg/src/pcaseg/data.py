"""Synthetic nested-structure dataset, transforms, splits and on-disk layout.

Each sample mimics a short-axis cardiac slice: a disk (class 1, "LV") inside
an annulus (class 2, "Myo"), with a crescent (class 3, "RV") hugging the
annulus from a random direction. Classes are rendered as intensity bands plus
Gaussian pixel noise and an optional smooth intensity bias.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError
from .numcore import RngStream

BACKGROUND, LV, MYO, RV = 0, 1, 2, 3
CLASS_NAMES = ("background", "LV", "Myo", "RV")


@dataclass
class Sample:
    image: np.ndarray  # [1, H, W]
    mask: Optional[np.ndarray]  # [C, H, W] one-hot, or None
    id: str

    @property
    def labels(self) -> np.ndarray:
        if self.mask is None:
            raise ValueError(f"sample {self.id} has no mask")
        return self.mask.argmax(axis=0)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    return (np.arange(num_classes)[:, None, None] == labels[None]).astype(np.float64)


@dataclass(frozen=True)
class SynthConfig:
    count: int = 280
    hw: int = 32
    classes: int = 4
    noise_sigma: float = 0.1
    center_jitter: float = 2.0
    lv_radius: Tuple[float, float] = (2.5, 4.5)
    myo_thickness: Tuple[float, float] = (1.5, 2.5)
    rv_radius: Tuple[float, float] = (3.0, 5.0)
    rv_offset: Tuple[float, float] = (0.0, 1.5)
    rotation: Tuple[float, float] = (0.0, 2 * math.pi)
    bands: Tuple[float, float, float, float] = (0.15, 0.85, 0.40, 0.65)
    bias_amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lv_radius", "myo_thickness", "rv_radius", "rv_offset", "rotation", "bands"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def max_extent(self) -> float:
        """Largest distance from the canvas centre any structure can reach."""
        r2 = self.lv_radius[1] + self.myo_thickness[1]
        return self.center_jitter + max(r2, r2 + self.rv_offset[1] + self.rv_radius[1])

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigurationError("count must be >= 1")
        if self.hw < 4 or self.hw & (self.hw - 1):
            raise ConfigurationError(f"hw must be a power of two >= 4, got {self.hw}")
        if self.classes != 4:
            raise ConfigurationError("the synthetic generator renders exactly 4 classes")
        if self.noise_sigma < 0 or self.bias_amplitude < 0:
            raise ConfigurationError("noise_sigma and bias_amplitude must be >= 0")
        for name in ("lv_radius", "myo_thickness", "rv_radius", "rv_offset", "rotation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name} range is reversed")
        if self.lv_radius[0] <= 0 or self.myo_thickness[0] <= 0 or self.rv_radius[0] <= 0:
            raise ConfigurationError("radii and thickness must be positive")
        if self.max_extent() > self.hw / 2:
            raise ConfigurationError(
                f"structures can reach {self.max_extent():.2f} px from centre, canvas half-size is {self.hw / 2}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)


def render_labels(hw: int, center, r_lv: float, r_myo: float, rv_center, r_rv: float) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw] + 0.5
    d = np.hypot(yy - center[0], xx - center[1])
    d_rv = np.hypot(yy - rv_center[0], xx - rv_center[1])
    labels = np.zeros((hw, hw), dtype=np.int64)
    labels[(d_rv < r_rv) & (d >= r_myo)] = RV
    labels[(d >= r_lv) & (d < r_myo)] = MYO
    labels[d < r_lv] = LV
    return labels


def _smooth_bias(rng: RngStream, hw: int, amplitude: float) -> np.ndarray:
    yy, xx = (np.mgrid[0:hw, 0:hw] + 0.5) / hw
    a, b, phase = rng.uniform(-1, 1, 2).tolist() + [rng.uniform(0, 2 * math.pi)]
    return amplitude * (a * (yy - 0.5) + b * (xx - 0.5) + 0.5 * np.sin(2 * math.pi * (yy + xx) + phase))


def generate_one(cfg: SynthConfig, rng: RngStream, sample_id: str) -> Sample:
    c0 = cfg.hw / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    c1 = cfg.hw / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    r_lv = rng.uniform(*cfg.lv_radius)
    r_myo = r_lv + rng.uniform(*cfg.myo_thickness)
    r_rv = rng.uniform(*cfg.rv_radius)
    dist = r_myo + rng.uniform(*cfg.rv_offset)
    theta = rng.uniform(*cfg.rotation)
    rv_center = (c0 + dist * math.sin(theta), c1 + dist * math.cos(theta))
    labels = render_labels(cfg.hw, (c0, c1), r_lv, r_myo, rv_center, r_rv)
    image = np.asarray(cfg.bands)[labels]
    if cfg.bias_amplitude > 0:
        image = image + _smooth_bias(rng, cfg.hw, cfg.bias_amplitude)
    if cfg.noise_sigma > 0:
        image = image + cfg.noise_sigma * rng.normal((cfg.hw, cfg.hw))
    return Sample(image[None], one_hot(labels, cfg.classes), sample_id)


def generate_synthetic(cfg: SynthConfig) -> List[Sample]:
    """Samples are a pure function of ``cfg``; each gets its own split stream."""
    cfg.validate()
    width = len(str(cfg.count - 1))
    streams = RngStream(cfg.seed).split(cfg.count)
    return [generate_one(cfg, s, f"s{i:0{width}d}") for i, s in enumerate(streams)]


def normalize(sample: Sample, mode: str = "unit_range") -> Sample:
    img = sample.image.astype(np.float64)
    if mode == "unit_range":
        lo, hi = img.min(), img.max()
        out = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    elif mode == "zscore":
        std = img.std()
        if std == 0:
            warnings.warn(f"sample {sample.id} is constant; z-score left as zeros", RuntimeWarning)
            out = np.zeros_like(img)
        else:
            out = (img - img.mean()) / std
    else:
        raise ConfigurationError(f"unknown normalization mode {mode!r}")
    return replace(sample, image=out)


# rigid augmentation: k quarter turns, then optional flips

Transform = Tuple[int, bool, bool]


def draw_transform(rng: RngStream) -> Transform:
    k = int(rng.integers(0, 4))
    flips = rng.integers(0, 2, size=2)
    return k, bool(flips[0]), bool(flips[1])


def apply_transform(arr: np.ndarray, t: Transform) -> np.ndarray:
    k, flip_h, flip_v = t
    out = np.rot90(arr, k, axes=(-2, -1))
    if flip_h:
        out = out[..., :, ::-1]
    if flip_v:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def invert_transform(arr: np.ndarray, t: Transform) -> np.ndarray:
    k, flip_h, flip_v = t
    out = arr
    if flip_v:
        out = out[..., ::-1, :]
    if flip_h:
        out = out[..., :, ::-1]
    return np.ascontiguousarray(np.rot90(out, -k, axes=(-2, -1)))


def augment(sample: Sample, rng: RngStream) -> Sample:
    if sample.image.shape[-1] != sample.image.shape[-2]:
        raise ConfigurationError("augment needs square images")
    t = draw_transform(rng)
    mask = None if sample.mask is None else apply_transform(sample.mask, t)
    return Sample(apply_transform(sample.image, t), mask, sample.id)


@dataclass
class DatasetSplit:
    labeled: List[Sample] = field(default_factory=list)
    unlabeled: List[Sample] = field(default_factory=list)
    val: List[Sample] = field(default_factory=list)
    test: List[Sample] = field(default_factory=list)

    @property
    def train(self) -> List[Sample]:
        return self.labeled + self.unlabeled

    def ids(self) -> Dict[str, List[str]]:
        return {k: [s.id for s in getattr(self, k)] for k in ("labeled", "unlabeled", "val", "test")}

    def by_name(self, name: str) -> List[Sample]:
        if name == "train":
            return self.train
        if name not in ("labeled", "unlabeled", "val", "test"):
            raise ConfigurationError(f"unknown split {name!r}")
        return getattr(self, name)


def split(data: Sequence[Sample], labeled_fraction: float, seed: int,
          n_val: int = 30, n_test: int = 50) -> DatasetSplit:
    """Deterministic shuffle into test/val/train; the first ``round(f * n_train)`` train samples are labeled.

    The val and test partitions depend only on ``seed`` and the data, never on
    ``labeled_fraction``.
    """
    if not 0 < labeled_fraction <= 1:
        raise ConfigurationError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    if n_val < 0 or n_test < 0 or n_val + n_test >= len(data):
        raise ConfigurationError(f"cannot carve {n_val} val + {n_test} test from {len(data)} samples")
    order = RngStream(seed).permutation(len(data))
    test = [data[i] for i in order[:n_test]]
    val = [data[i] for i in order[n_test:n_test + n_val]]
    train = [data[i] for i in order[n_test + n_val:]]
    n_lab = int(round(labeled_fraction * len(train)))
    if n_lab == 0:
        raise ConfigurationError(f"labeled_fraction {labeled_fraction} leaves no labeled samples")
    return DatasetSplit(train[:n_lab], train[n_lab:], val, test)


# binary PGM

def write_pgm(path, grid: np.ndarray, maxval: int = 65535) -> None:
    g = np.asarray(grid)
    if g.ndim != 2:
        raise ValueError(f"PGM grids are 2-D, got shape {g.shape}")
    if not 0 < maxval <= 65535:
        raise ValueError("maxval must be in 1..65535")
    if g.min(initial=0) < 0 or g.max(initial=0) > maxval:
        raise ValueError(f"grid values outside 0..{maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + g.astype(dtype).tobytes())


def _header_tokens(buf: bytes, n: int):
    tokens, pos = [], 0
    while len(tokens) < n:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path) -> Tuple[np.ndarray, int]:
    """Returns ``(grid, maxval)`` with integer grid values."""
    buf = Path(path).read_bytes()
    tokens, offset = _header_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval <= 65535:
        raise ValueError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = buf[offset:offset + need]
    if len(raster) < need:
        raise ValueError(f"{path}: truncated PGM payload ({len(raster)} of {need} bytes)")
    return np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(np.int64), maxval


def quantize(image: np.ndarray, maxval: int = 65535) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * maxval).astype(np.int64)


def dequantize(grid: np.ndarray, maxval: int = 65535) -> np.ndarray:
    return np.asarray(grid, dtype=np.float64) / maxval


# dataset directory: images/<id>.pgm, masks/<id>.pgm, manifest.json

MANIFEST = "manifest.json"


def save_dataset(directory, data: DatasetSplit, num_classes: int = 4, meta: Optional[dict] = None) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for name in ("labeled", "unlabeled", "val", "test"):
        for s in getattr(data, name):
            write_pgm(root / "images" / f"{s.id}.pgm", quantize(s.image[0]))
            if s.mask is not None:
                write_pgm(root / "masks" / f"{s.id}.pgm", s.labels, maxval=255)
    manifest = {"version": 1, "num_classes": num_classes, "split": data.ids(), "meta": meta or {}}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(directory) -> DatasetSplit:
    root = Path(directory)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"{root}: no {MANIFEST}") from None
    C = int(manifest["num_classes"])
    out = DatasetSplit()
    for name, ids in manifest["split"].items():
        samples = []
        for sid in ids:
            grid, maxval = read_pgm(root / "images" / f"{sid}.pgm")
            mask_path = root / "masks" / f"{sid}.pgm"
            mask = one_hot(read_pgm(mask_path)[0], C) if mask_path.exists() else None
            samples.append(Sample(dequantize(grid, maxval)[None], mask, sid))
        setattr(out, name, samples)
    return out


def build_synthetic_split(cfg: SynthConfig, labeled_fraction: float, split_seed: int,
                          n_val: int = 30, n_test: int = 50) -> DatasetSplit:
    """Generate, normalise to unit range, and split."""
    samples = [normalize(s, "unit_range") for s in generate_synthetic(cfg)]
    return split(samples, labeled_fraction, split_seed, n_val, n_test)


def with_labeled_fraction(data: DatasetSplit, labeled_fraction: float) -> DatasetSplit:
    """Re-partition the training pool of an existing split, keeping val and test.

    The pool keeps its stored order, so the labeled sets nest as the fraction
    grows, exactly as :func:`split` does for a fresh shuffle.
    """
    if not 0 < labeled_fraction <= 1:
        raise ConfigurationError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    pool = data.train
    n_lab = int(round(labeled_fraction * len(pool)))
    if n_lab == 0:
        raise ConfigurationError(f"labeled_fraction {labeled_fraction} leaves no labeled samples")
    if any(s.mask is None for s in pool[:n_lab]):
        raise ConfigurationError("training pool has samples without masks")
    return DatasetSplit(pool[:n_lab], pool[n_lab:], data.val, data.test)
