"""Seeded randomness, speckle phantoms, netpbm I/O and dataset handling."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, UsageError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

TRAIN = "train"
TEST = "test"
MANIFEST_NAME = "manifest.csv"


class Rng:
    """splitmix64 generator.

    The stream is counter based (output k mixes ``seed + k * golden``), which
    lets :meth:`u64_array` produce a block of outputs without a Python loop
    while staying identical to repeated :meth:`next_u64` calls.
    """

    def __init__(self, seed=0):
        self.state = int(seed) & _MASK64

    def next_u64(self):
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def u64_array(self, n):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return z ^ (z >> np.uint64(31))

    def uniform(self):
        """Double in [0, 1) built from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform_array(self, n):
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal_array(self, n):
        """Standard normals via Box-Muller; each pair consumes two uniforms."""
        pairs = (n + 1) // 2
        u = self.uniform_array(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def normal(self):
        return float(self.normal_array(1)[0])

    def randbelow(self, n):
        return min(int(self.uniform() * n), n - 1)

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


# --------------------------------------------------------------------------
# samples and phantoms
# --------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise DataError(
                f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} must be equal 2D shapes")
        if not ((self.mask == 0) | (self.mask == 1)).all():
            raise DataError(f"sample {self.id}: mask is not binary")


def ellipse_mask(size, cy, cx, a, b, theta):
    """Indicator of the rotated ellipse, evaluated at pixel centres."""
    y = np.arange(size)[:, None] + 0.5 - cy
    x = np.arange(size)[None, :] + 0.5 - cx
    ct, st = math.cos(theta), math.sin(theta)
    u = (x * ct + y * st) / a
    v = (-x * st + y * ct) / b
    return (u * u + v * v <= 1.0).astype(np.uint8)


def _mean3x3(img):
    padded = np.pad(img, 1, mode="edge")
    h, w = img.shape
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + h, dx:dx + w]
    return acc / 9.0


def gen_phantom(size, rng, sample_id="0"):
    """Ultrasound-like phantom: speckled bright ellipse with optional shadow.

    Draw order is fixed: centre row, centre column, both semi-axes, rotation,
    shadow coin and (if shadowed) its half-angle and heading, then one
    Box-Muller pair per pixel for the speckle in row-major order.
    """
    if size < 16:
        raise UsageError(f"phantom size must be at least 16, got {size}")
    cy = (0.35 + 0.30 * rng.uniform()) * size
    cx = (0.35 + 0.30 * rng.uniform()) * size
    a = (0.15 + 0.20 * rng.uniform()) * size
    b = (0.15 + 0.20 * rng.uniform()) * size
    theta = math.pi * rng.uniform()
    shadow = None
    if rng.uniform() < 0.5:
        half_angle = math.radians(5.0 + 10.0 * rng.uniform())
        heading = math.radians(-30.0 + 60.0 * rng.uniform())
        shadow = (half_angle, heading)

    mask = ellipse_mask(size, cy, cx, a, b, theta)
    g = rng.normal_array(2 * size * size).reshape(size, size, 2)
    speckle = (g[..., 0] ** 2 + g[..., 1] ** 2) / 2.0
    image = np.where(mask == 1, 0.55, 0.35) * speckle

    if shadow is not None:
        half_angle, heading = shadow
        dy = np.arange(size)[:, None] + 0.5
        dx = np.arange(size)[None, :] + 0.5 - size / 2.0
        bearing = np.arctan2(dx, dy)
        image = np.where(np.abs(bearing - heading) <= half_angle, image * 0.4, image)

    image = np.clip(_mean3x3(image), 0.0, 1.0)
    return Sample(image=image, mask=mask, id=str(sample_id))


def generate_samples(count, size, seed):
    """``count`` phantoms, sample ``i`` drawn from its own ``Rng(seed + i)``."""
    return [gen_phantom(size, Rng(seed + i), sample_id=f"{i:05d}") for i in range(count)]


# --------------------------------------------------------------------------
# netpbm
# --------------------------------------------------------------------------

def quantize(image):
    """Map [0, 1] values to bytes with round-half-up."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.size and (not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0):
        raise DataError("image values must lie in [0, 1]")
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def _netpbm_header(magic, width, height):
    return f"{magic}\n{width} {height}\n255\n".encode("ascii")


def write_pgm(image, path):
    """Write a 2D array in [0, 1] (or a binary mask) as binary P5."""
    data = quantize(image)
    if data.ndim != 2:
        raise DataError(f"PGM data must be 2D, got shape {data.shape}")
    h, w = data.shape
    Path(path).write_bytes(_netpbm_header("P5", w, h) + data.tobytes())


def write_ppm(rgb, path):
    data = np.asarray(rgb)
    if data.dtype != np.uint8 or data.ndim != 3 or data.shape[2] != 3:
        raise DataError("PPM data must be a (H, W, 3) uint8 array")
    h, w, _ = data.shape
    Path(path).write_bytes(_netpbm_header("P6", w, h) + data.tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*")


def _parse_netpbm(blob, magic, channels):
    if blob[:2] != magic:
        raise FormatError(f"expected magic {magic.decode()}, found {blob[:2]!r}", offset=0)
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        m = _TOKEN.match(blob, pos)
        pos = m.end()
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError(f"missing or malformed {label}", offset=start)
        fields.append(int(blob[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}", offset=start)
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", offset=pos)
    pos += 1
    need = width * height * channels
    if len(blob) - pos < need:
        raise FormatError(
            f"truncated payload: expected {need} bytes, found {len(blob) - pos}", offset=len(blob))
    payload = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return payload.reshape(shape).copy()


def read_pgm_bytes(path):
    """Raw P5 payload as a (H, W) uint8 array."""
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1)


def read_pgm(path):
    """P5 image as float64 values in [0, 1]."""
    return read_pgm_bytes(path).astype(np.float64) / 255.0


def read_mask(path):
    raw = read_pgm_bytes(path)
    if not ((raw == 0) | (raw == 255)).all():
        raise DataError(f"{path}: mask pixels must be 0 or 255")
    return (raw == 255).astype(np.uint8)


def read_ppm(path):
    return _parse_netpbm(Path(path).read_bytes(), b"P6", 3)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list
    root: Path | None = None
    split: dict | None = field(default=None)

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self):
        return [s.id for s in self.samples]

    @property
    def image_shape(self):
        return self.samples[0].image.shape if self.samples else None

    def with_split(self, split):
        return Dataset(samples=self.samples, root=self.root, split=dict(split))

    def subset(self, which):
        if self.split is None:
            raise UsageError("dataset has no split assignment")
        return [s for s in self.samples if self.split[s.id] == which]


def train_count(total):
    """round(0.9 * total), halves rounded up, in exact integer arithmetic."""
    return (9 * total + 5) // 10


def split_dataset(dataset, rng):
    """Shuffle ids with ``rng``; the first 90% train, the rest test."""
    if len(dataset) < 10:
        raise UsageError(f"need at least 10 samples to split, got {len(dataset)}")
    order = rng.shuffle(list(dataset.ids))
    cut = train_count(len(order))
    assignment = {sid: TRAIN for sid in order[:cut]}
    assignment.update({sid: TEST for sid in order[cut:]})
    return {sid: assignment[sid] for sid in dataset.ids}


def write_manifest(path, split):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "split"])
        for sid in sorted(split):
            writer.writerow([sid, split[sid]])


def read_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "split"]:
            raise FormatError(f"{path}: manifest header must be 'id,split', got {header}")
        split = {}
        for row in reader:
            if len(row) != 2 or row[1] not in (TRAIN, TEST):
                raise FormatError(f"{path}: bad manifest row {row}")
            split[row[0]] = row[1]
    return split


_PAIR_NAME = re.compile(r"^(img|msk)_(.+)\.pgm$")


def load_dataset(directory):
    """Load ``img_{id}.pgm`` / ``msk_{id}.pgm`` pairs sorted by id.

    A ``manifest.csv`` in the directory, if present, supplies the split.
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    images, masks = {}, {}
    for entry in root.iterdir():
        m = _PAIR_NAME.match(entry.name)
        if m:
            (images if m.group(1) == "img" else masks)[m.group(2)] = entry
    for sid in sorted(set(images) ^ set(masks)):
        kind = "msk" if sid in images else "img"
        raise DataError(f"sample {sid}: missing {kind}_{sid}.pgm counterpart")

    samples = []
    for sid in sorted(images):
        image = read_pgm(images[sid])
        mask = read_mask(masks[sid])
        if image.shape != mask.shape:
            raise DataError(f"sample {sid}: image {image.shape} and mask {mask.shape} differ")
        samples.append(Sample(image=image, mask=mask, id=sid))

    split = None
    manifest = root / MANIFEST_NAME
    if manifest.exists():
        split = read_manifest(manifest)
        if set(split) != set(images):
            raise DataError(f"{manifest}: ids do not match the image pairs in {root}")
    return Dataset(samples=samples, root=root, split=split)


def save_dataset(directory, dataset):
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        write_pgm(s.image, root / f"img_{s.id}.pgm")
        write_pgm(s.mask, root / f"msk_{s.id}.pgm")
    if dataset.split is not None:
        write_manifest(root / MANIFEST_NAME, dataset.split)
    return root
