"""Digit dataset ingestion (IDX format) and the four simulated domains.

Domains are applied on the fly with a fresh per-example draw: 0 horizontal
flip, 1 color flip, 2 gaussian blur, 3 rotation by 30-60 degrees with random
sign. All transforms map [0, 1] images to [0, 1] images.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import ValidationError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DOMAIN_KINDS = ("hflip", "colorflip", "blur", "rotate")
ROTATE_MIN_DEG = 30.0
ROTATE_MAX_DEG = 60.0
BLUR_SIGMA = 1.0


class IdxLoadError(ValueError):
    """Base error for malformed IDX files."""


class IdxMagicError(IdxLoadError):
    pass


class IdxTruncatedError(IdxLoadError):
    pass


class IdxCountMismatchError(IdxLoadError):
    pass


@dataclass
class ImageDataset:
    """Images (M, 1, H, W) in [0, 1] with integer class labels (M,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValidationError(f"images must be (M, 1, H, W), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValidationError(f"{self.images.shape[0]} images but {self.labels.shape} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, index) -> "ImageDataset":
        return ImageDataset(self.images[index], self.labels[index])


@dataclass
class DomainSpec:
    """One simulated domain; ids are a fixed bijection onto kinds."""

    id: int
    kind: str


DOMAINS = tuple(DomainSpec(i, kind) for i, kind in enumerate(DOMAIN_KINDS))


@dataclass
class Minibatch:
    x: np.ndarray        # (B, 1, 28, 28)
    labels: np.ndarray   # (B,) class labels
    domains: np.ndarray  # (B,) domain ids in [0, 4)


# ---------------------------------------------------------------------------
# IDX ingestion


def _read_header(raw: bytes, path, expected_magic: int, count_words: int):
    words = 1 + count_words
    if len(raw) < 4 * words:
        raise IdxTruncatedError(f"{path}: file too short for the IDX header")
    fields = struct.unpack(f">{words}I", raw[:4 * words])
    if fields[0] != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}")
    return fields[1:]


def load_idx(images_path, labels_path) -> ImageDataset:
    """Parse big-endian IDX image/label files into a [0, 1]-scaled dataset."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw = images_path.read_bytes()
    count, rows, cols = _read_header(raw, images_path, IMAGE_MAGIC, 3)
    payload = raw[16:]
    if len(payload) < count * rows * cols:
        raise IdxTruncatedError(f"{images_path}: header promises {count} images of "
                                f"{rows}x{cols}, payload holds {len(payload)} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=count * rows * cols)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0

    raw = labels_path.read_bytes()
    (label_count,) = _read_header(raw, labels_path, LABEL_MAGIC, 1)
    if label_count != count:
        raise IdxCountMismatchError(f"{images_path} holds {count} images but "
                                    f"{labels_path} holds {label_count} labels")
    body = raw[8:]
    if len(body) < label_count:
        raise IdxTruncatedError(f"{labels_path}: header promises {label_count} labels, "
                                f"payload holds {len(body)} bytes")
    labels = np.frombuffer(body, dtype=np.uint8, count=label_count).astype(np.int64)
    return ImageDataset(images, labels)


def write_idx(ds: ImageDataset, images_path, labels_path) -> None:
    """Quantize to unsigned bytes and write the standard IDX pair."""
    m, _, rows, cols = ds.images.shape
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGE_MAGIC, m, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", LABEL_MAGIC, m))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_mnist_dir(data_dir) -> tuple[ImageDataset, ImageDataset]:
    """Load the conventional (train, test) IDX file pairs from one directory."""
    data_dir = Path(data_dir)
    train = load_idx(data_dir / "train-images-idx3-ubyte", data_dir / "train-labels-idx1-ubyte")
    test = load_idx(data_dir / "t10k-images-idx3-ubyte", data_dir / "t10k-labels-idx1-ubyte")
    return train, test


# ---------------------------------------------------------------------------
# domain transforms (pure functions on the trailing two image axes)


def transform_hflip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1])


def transform_colorflip(x: np.ndarray) -> np.ndarray:
    return 1.0 - x


def gaussian_kernel(size: int = 5, sigma: float = BLUR_SIGMA) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


_BLUR_KERNEL = gaussian_kernel()


def transform_blur(x: np.ndarray) -> np.ndarray:
    """Normalized 5x5 gaussian, zero padding, output clamped to [0, 1]."""
    out = np.empty_like(x)
    flat_in = x.reshape(-1, *x.shape[-2:])
    flat_out = out.reshape(-1, *x.shape[-2:])
    for i in range(flat_in.shape[0]):
        flat_out[i] = ndimage.convolve(flat_in[i], _BLUR_KERNEL, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def transform_rotate(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image center, bilinear, out-of-bounds reads as 0."""
    if abs(angle) > 90.0:
        raise ValidationError(f"rotation angle must satisfy |angle| <= 90, got {angle}")
    h, w = x.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(angle)
    cos, sin = np.cos(th), np.sin(th)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: sample the source at the output grid rotated by -angle
    sr = cos * (rr - cy) + sin * (cc - cx) + cy
    sc = -sin * (rr - cy) + cos * (cc - cx) + cx

    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr, fc = sr - r0, sc - c0
    flat = x.reshape(-1, h, w)
    out = np.zeros_like(flat)
    for dr in (0, 1):
        for dc in (0, 1):
            rr_n, cc_n = r0 + dr, c0 + dc
            weight = (fr if dr else 1.0 - fr) * (fc if dc else 1.0 - fc)
            valid = (rr_n >= 0) & (rr_n < h) & (cc_n >= 0) & (cc_n < w)
            rv, cv = rr_n[valid], cc_n[valid]
            out[:, valid] += weight[valid] * flat[:, rv, cv]
    return np.clip(out.reshape(x.shape), 0.0, 1.0)


def draw_rotation_angle(rng: np.random.Generator) -> float:
    magnitude = rng.uniform(ROTATE_MIN_DEG, ROTATE_MAX_DEG)
    return magnitude if rng.random() < 0.5 else -magnitude


def apply_domain(x: np.ndarray, domain_id: int, rng: np.random.Generator) -> np.ndarray:
    """Apply one domain's transform to a single image (or image stack)."""
    kind = DOMAINS[domain_id].kind
    if kind == "hflip":
        return transform_hflip(x)
    if kind == "colorflip":
        return transform_colorflip(x)
    if kind == "blur":
        return transform_blur(x)
    return transform_rotate(x, draw_rotation_angle(rng))


def transform_batch(images: np.ndarray, domain_ids: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Per-example transforms; rotation angles are drawn in example order."""
    out = np.empty_like(images)
    for kind_id in (0, 1, 2):
        mask = domain_ids == kind_id
        if mask.any():
            out[mask] = apply_domain(images[mask], kind_id, rng)
    for i in np.flatnonzero(domain_ids == 3):
        out[i] = transform_rotate(images[i], draw_rotation_angle(rng))
    return out


# ---------------------------------------------------------------------------
# minibatch sampling


class MinibatchSampler:
    """Epoch-shuffled sampler; each example gets a fresh uniform domain draw."""

    def __init__(self, ds: ImageDataset, batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if batch_size > len(ds):
            raise ValidationError(f"batch_size {batch_size} exceeds dataset size {len(ds)}")
        self.ds = ds
        self.batch_size = batch_size
        self.rng = rng

    def epoch(self):
        """Yield minibatches covering every index exactly once."""
        order = self.rng.permutation(len(self.ds))
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            domain_ids = self.rng.integers(0, len(DOMAINS), size=idx.size)
            x = transform_batch(self.ds.images[idx], domain_ids, self.rng)
            yield Minibatch(x, self.ds.labels[idx], domain_ids)


def sample_minibatch(ds: ImageDataset, batch_size: int, rng: np.random.Generator) -> Minibatch:
    """One batch drawn without replacement from a fresh epoch shuffle."""
    return next(MinibatchSampler(ds, batch_size, rng).epoch())


def split_dataset(ds: ImageDataset, holdout_fraction: float) -> tuple[ImageDataset, ImageDataset]:
    """Deterministic (head, tail) split; the tail is the held-out part."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValidationError(f"holdout fraction must be in (0, 1), got {holdout_fraction}")
    cut = len(ds) - max(1, int(round(len(ds) * holdout_fraction)))
    if cut < 1:
        raise ValidationError("holdout fraction leaves no training data")
    return ds.subset(slice(None, cut)), ds.subset(slice(cut, None))


# ---------------------------------------------------------------------------
# synthetic rendered-digit corpus (offline stand-in for a real IDX dataset)

_FONT_FILES = (
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSans-Bold.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSerif.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSerif-Bold.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSansMono-Bold.ttf",
)


def _font_paths():
    paths = [p for p in _FONT_FILES if Path(p).exists()]
    if not paths:  # fall back to the copies matplotlib ships
        import matplotlib
        ttf = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
        paths = sorted(str(p) for p in ttf.glob("DejaVu*.ttf"))
    if not paths:
        raise FileNotFoundError("no DejaVu fonts found for synthetic digit rendering")
    return paths


def synthetic_digits(n: int, seed: int = 0) -> ImageDataset:
    """Render n jittered digit glyphs as a 28x28 [0, 1] dataset.

    Deterministic for a fixed seed and font build; images are quantized to
    the 255-level grid so an IDX round trip reproduces them exactly.
    """
    from PIL import Image, ImageDraw, ImageFont

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D1617]))
    fonts = []
    for path in _font_paths():
        for size in (26, 30, 34):
            fonts.append(ImageFont.truetype(path, size))

    images = np.empty((n, 1, 28, 28))
    labels = rng.integers(0, 10, size=n)
    for i in range(n):
        font = fonts[rng.integers(len(fonts))]
        canvas = Image.new("L", (56, 56), 0)
        draw = ImageDraw.Draw(canvas)
        left, top, right, bottom = draw.textbbox((0, 0), str(labels[i]), font=font)
        pos = (28 - (right + left) / 2.0, 28 - (bottom + top) / 2.0)
        draw.text(pos, str(labels[i]), fill=255, font=font)
        canvas = canvas.rotate(rng.uniform(-9.0, 9.0), resample=Image.BILINEAR)
        # a consistent handwriting-like slant keeps glyphs left-right asymmetric
        shear = rng.uniform(0.15, 0.35)
        dx, dy = rng.integers(-2, 3, size=2)
        canvas = canvas.transform((56, 56), Image.AFFINE,
                                  (1, shear, dx - shear * 28, 0, 1, dy),
                                  resample=Image.BILINEAR)
        small = canvas.resize((28, 28), resample=Image.BILINEAR)
        img = np.asarray(small, dtype=np.float64) / 255.0
        img += rng.uniform(0.0, 0.05) * rng.random((28, 28))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    images = np.rint(images * 255.0) / 255.0
    return ImageDataset(images, labels)
