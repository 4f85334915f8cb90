"""Synthetic multi-domain shape datasets, procedural corruptions, and container I/O.

Seven geometric shape classes are rendered with per-sample position, scale,
and rotation jitter; a domain is a style (background hue, contrast, stroke
emphasis, texture noise, optional inversion) applied on top. Corruptions are
five image distortions with fixed five-level severity tables. The container
format is a bit-exact little-endian binary layout shared by datasets and
checkpoints.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng

# ---------------------------------------------------------------------------
# domains

SHAPE_NAMES = ("circle", "square", "triangle", "cross", "star", "ring", "diamond")


@dataclass(frozen=True)
class DomainSpec:
    """Rendering style for one synthetic domain."""

    name: str
    hue: float = 0.58          # background hue in [0, 1)
    contrast: float = 0.6      # foreground/background value separation in [0, 1]
    stroke: float = 0.0        # outline emphasis width in pixels (0 disables)
    noise: float = 0.02        # additive Gaussian texture amplitude
    invert: bool = False       # global color inversion

    def __post_init__(self):
        if not 0.0 <= self.hue < 1.0:
            raise ValueError(f"hue must be in [0, 1), got {self.hue}")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError(f"contrast must be in (0, 1], got {self.contrast}")
        if self.stroke < 0 or self.noise < 0:
            raise ValueError("stroke and noise must be non-negative")


DOMAINS: dict[str, DomainSpec] = {
    "plain": DomainSpec("plain"),
    "inverted": DomainSpec("inverted", invert=True),
    "textured": DomainSpec("textured", noise=0.22),
    "pastel": DomainSpec("pastel", hue=0.12, contrast=0.3, noise=0.04),
    "outlined": DomainSpec("outlined", hue=0.83, stroke=2.0, noise=0.05),
    "night": DomainSpec("night", hue=0.33, contrast=0.95, noise=0.08, invert=True),
}


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float32)


def _shape_sdf(kind: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Approximate signed distance to the shape boundary in unit coordinates."""
    r = np.sqrt(x * x + y * y)
    if kind == "circle":
        return r - 1.0
    if kind == "square":
        return np.maximum(np.abs(x), np.abs(y)) - 1.0
    if kind == "diamond":
        return (np.abs(x) + np.abs(y)) - 1.0
    if kind == "triangle":
        # equilateral, circumradius 1, apex up: max over the three edge half-planes
        d = None
        for ang in (np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3, np.pi / 2):
            nx, ny = -np.cos(ang), -np.sin(ang)
            e = nx * x + ny * y - 0.5
            d = e if d is None else np.maximum(d, e)
        return d
    if kind == "cross":
        bar_h = np.maximum(np.abs(x) - 1.0, np.abs(y) - 0.35)
        bar_v = np.maximum(np.abs(y) - 1.0, np.abs(x) - 0.35)
        return np.minimum(bar_h, bar_v)
    if kind == "star":
        phi = np.arctan2(y, x)
        return r - (0.62 + 0.38 * np.cos(5.0 * phi))
    if kind == "ring":
        return np.maximum(r - 1.0, 0.55 - r)
    raise ValueError(f"unknown shape {kind!r}")


def render_shape(kind: str, size: int, spec: DomainSpec, rng: Rng) -> np.ndarray:
    """One 3 x size x size image of a jittered shape in the domain's style.

    Draw order per sample: center dx, center dy, scale, rotation (uniform),
    then one Gaussian block when the domain has texture noise.
    """
    dx = float(rng.uniform(-0.15, 0.15))
    dy = float(rng.uniform(-0.15, 0.15))
    scale = float(rng.uniform(0.45, 0.7))
    theta = float(rng.uniform(0.0, 2.0 * np.pi))

    coords = (np.arange(size, dtype=np.float32) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    xs, ys = (xx - dx) / scale, (yy - dy) / scale
    c, s = np.cos(-theta), np.sin(-theta)
    xr, yr = c * xs - s * ys, s * xs + c * ys
    sdf = _shape_sdf(kind, xr, yr) * scale  # back to image-space units

    aa = 1.5 * (2.0 / size)
    fill = np.clip(0.5 - sdf / aa, 0.0, 1.0)[:, :, None]

    bg = _hsv(spec.hue, 0.4, 0.5 - spec.contrast * 0.35)
    fg = _hsv(spec.hue + 0.5, 0.55, 0.5 + spec.contrast * 0.45)
    img = bg[None, None, :] + fill * (fg - bg)[None, None, :]

    if spec.stroke > 0:
        band = spec.stroke * (2.0 / size)
        rim = np.clip(1.0 - np.abs(sdf) / band, 0.0, 1.0)[:, :, None]
        img = img + rim * ((1.0 - bg)[None, None, :] - img)

    if spec.noise > 0:
        img = img + spec.noise * rng.normal(img.shape, dtype=np.float32)
    if spec.invert:
        img = 1.0 - img
    return np.clip(img, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1)


@dataclass
class DatasetContainer:
    """Images (N x 3 x S x S float32), integer labels, and generator metadata."""

    images: np.ndarray
    labels: np.ndarray
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be N x 3 x S x S, got {self.images.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise ValueError(f"labels shape {self.labels.shape} does not match "
                             f"{len(self.images)} images")
        if len(self.labels) and (self.labels.min() < 0):
            raise ValueError("labels must be non-negative")

    @property
    def classes(self) -> int:
        return int(self.metadata.get("classes", int(self.labels.max()) + 1 if len(self.labels) else 0))

    @property
    def size(self) -> int:
        return self.images.shape[2]


def gen_domain_dataset(spec: DomainSpec, n_per_class: int, classes: int, size: int,
                       rng: Rng) -> DatasetContainer:
    """Balanced shape dataset in one domain's style; deterministic per seed stream."""
    if not 2 <= classes <= len(SHAPE_NAMES):
        raise ValueError(f"classes must be in [2, {len(SHAPE_NAMES)}], got {classes}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    images = np.empty((classes * n_per_class, 3, size, size), dtype=np.float32)
    labels = np.empty(classes * n_per_class, dtype=np.int64)
    i = 0
    for cls in range(classes):
        for _ in range(n_per_class):
            images[i] = render_shape(SHAPE_NAMES[cls], size, spec, rng)
            labels[i] = cls
            i += 1
    return DatasetContainer(images=images, labels=labels,
                            metadata={"domain": spec.name, "classes": str(classes),
                                      "size": str(size)})


# ---------------------------------------------------------------------------
# corruptions

CORRUPTION_KINDS = ("gaussian_noise", "gaussian_blur", "contrast", "brightness", "pixelate")

# One distortion parameter per severity level 1..5; fixed so evaluation is
# reproducible bit-for-bit.
SEVERITY_TABLES: dict[str, tuple] = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.16, 0.20),   # additive std
    "gaussian_blur": (0.4, 0.6, 0.8, 1.0, 1.2),         # kernel sigma, px
    "contrast": (0.75, 0.6, 0.5, 0.4, 0.3),             # blend factor toward the mean
    "brightness": (0.08, 0.16, 0.24, 0.32, 0.40),       # additive shift
    "pixelate": (2, 3, 4, 6, 8),                        # block size, px
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}; choose from {CORRUPTION_KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def param(self):
        return SEVERITY_TABLES[self.kind][self.severity - 1]


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float32)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    out = img
    for axis in (0, 1):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0) for a in range(3)],
                        mode="reflect")
        acc = np.zeros_like(out)
        for k, w in enumerate(kernel):
            sl = [slice(None)] * 3
            sl[axis] = slice(k, k + out.shape[axis])
            acc += w * padded[tuple(sl)]
        out = acc
    return out


def _pixelate(img: np.ndarray, block: int) -> np.ndarray:
    h, w = img.shape[:2]
    edges_h = np.arange(0, h, block)
    edges_w = np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(img, edges_h, axis=0), edges_w, axis=1)
    len_h = np.diff(np.append(edges_h, h))
    len_w = np.diff(np.append(edges_w, w))
    means = sums / (len_h[:, None, None] * len_w[None, :, None])
    return np.repeat(np.repeat(means, len_h, axis=0), len_w, axis=1).astype(img.dtype)


def apply_corruption(img: np.ndarray, spec: CorruptionSpec, rng: Rng) -> np.ndarray:
    """Distort an H x W x 3 image at the given severity; output clamped to [0, 1]."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    p = spec.param
    if spec.kind == "gaussian_noise":
        out = img + p * rng.normal(img.shape, dtype=np.float32)
    elif spec.kind == "gaussian_blur":
        out = _gaussian_blur(img, p)
    elif spec.kind == "contrast":
        m = np.float32(img.mean())
        out = m + np.float32(p) * (img - m)
    elif spec.kind == "brightness":
        out = img + np.float32(p)
    else:  # pixelate
        out = _pixelate(img, int(p))
    return np.clip(out, 0.0, 1.0)


def corrupt_batch(images: np.ndarray, spec: CorruptionSpec, rng: Rng) -> np.ndarray:
    """Apply one corruption to every image of an N x 3 x H x W batch."""
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        out[i] = apply_corruption(images[i].transpose(1, 2, 0), spec, rng).transpose(2, 0, 1)
    return out


# ---------------------------------------------------------------------------
# container format

MAGIC = b"CPTN"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("<f8")}
DTYPE_BY_NAME = {"float32": 0, "int64": 1, "float64": 2}
MAX_ELEMENTS = 1 << 40


class ContainerError(Exception):
    """Base error for the binary container format."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DimensionError(ContainerError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file truncated: wanted {n} bytes at offset {self.pos}, "
                                 f"have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _write_tensor_record(parts: list[bytes], arr: np.ndarray) -> None:
    code = DTYPE_BY_NAME.get(arr.dtype.name)
    if code is None:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    parts.append(struct.pack("<BB", code, arr.ndim))
    for dim in arr.shape:
        parts.append(struct.pack("<Q", dim))
    parts.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_tensor_record(r: _Reader) -> np.ndarray:
    code = r.u8()
    if code not in DTYPE_CODES:
        raise ContainerError(f"unknown dtype code {code}")
    rank = r.u8()
    if rank > 4:
        raise DimensionError(f"rank {rank} exceeds the supported maximum of 4")
    dims = []
    total = 1
    for _ in range(rank):
        d = r.u64()
        total *= max(d, 1)
        if d > MAX_ELEMENTS or total > MAX_ELEMENTS:
            raise DimensionError(f"dimensions {dims + [d]} overflow the element limit")
        dims.append(d)
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = r.take(count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def _write_metadata(parts: list[bytes], metadata: dict[str, str]) -> None:
    for key, value in metadata.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ContainerError(f"metadata key/value may not contain '=' in key or newlines: {key!r}")
    blob = "\n".join(f"{k}={v}" for k, v in sorted(metadata.items())).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)


def _read_metadata(r: _Reader) -> dict[str, str]:
    length = r.u32()
    blob = r.take(length).decode("utf-8")
    meta = {}
    for line in blob.splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def _check_header(r: _Reader) -> None:
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}")


def save_container(path, container: DatasetContainer) -> None:
    """Write a dataset: magic, version, images record, labels record, metadata."""
    if len(container.images) == 0:
        raise ContainerError("refusing to save an empty dataset")
    parts: list[bytes] = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    _write_tensor_record(parts, container.images.astype(np.float32))
    _write_tensor_record(parts, container.labels.astype(np.int64))
    _write_metadata(parts, container.metadata)
    Path(path).write_bytes(b"".join(parts))


def load_container(path) -> DatasetContainer:
    r = _Reader(Path(path).read_bytes())
    _check_header(r)
    images = _read_tensor_record(r)
    labels = _read_tensor_record(r)
    if images.dtype != np.float32 or images.ndim != 4:
        raise ContainerError(f"images record must be rank-4 float32, got {images.dtype} rank {images.ndim}")
    if labels.dtype != np.int64 or labels.ndim != 1:
        raise ContainerError(f"labels record must be rank-1 int64, got {labels.dtype} rank {labels.ndim}")
    meta = _read_metadata(r)
    return DatasetContainer(images=images, labels=labels, metadata=meta)


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict[str, str]) -> None:
    """Write named tensors in the container record format (count-prefixed)."""
    if not arrays:
        raise ContainerError("refusing to save an empty checkpoint")
    parts: list[bytes] = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        _write_tensor_record(parts, np.asarray(arr))
    _write_metadata(parts, metadata)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(Path(path).read_bytes())
    _check_header(r)
    count = r.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        arrays[name] = _read_tensor_record(r)
    return arrays, _read_metadata(r)
