"""Images, augmentation, part crops, one-shot batches and the synthetic corpus.

Pixels are float64 arrays in channel-major ``[3, H, W]`` layout with values
in [-1, 1]. 8-bit files map linearly: 0 -> -1, 255 -> 1.

The synthetic corpus has an exact ground-truth translation. Source images
are warm-coloured shapes on a grey texture; the oracle rotates hue by 180
degrees (per pixel ``c -> max + min - c``, which leaves grey untouched) and
paints a one-pixel black outline on the shape boundary. The one target
image is the oracle applied to a held-out source image.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor

SIZES = (32, 64, 128)
SOURCE, TARGET = "source", "target"
MASK_THRESHOLD = 0.4  # channel spread, in [-1, 1] units
STROKE = (-1.0, -1.0, -1.0)
HUE_RANGE = (-30.0, 60.0)  # degrees; warm colours only
SHAPE_COUNT = (3, 5)  # shapes per image, inclusive
SHAPE_RADIUS = (0.10, 0.18)  # fraction of image size
BACKGROUND_NOISE = 0.015  # per-pixel grey noise, [0, 1] units
MAX_ROTATION = 10.0
CENTER_CROP = 7 / 8


class ImageFormatError(ValueError):
    pass


class TruncatedFileError(ImageFormatError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray
    domain: str = SOURCE
    id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"pixels must be [3,H,W], got {self.pixels.shape}")
        if self.pixels.shape[1] != self.pixels.shape[2]:
            raise ValueError(f"image must be square, got {self.pixels.shape[1:]}")
        if self.pixels.size and (self.pixels.min() < -1.0 or self.pixels.max() > 1.0):
            raise ValueError(f"pixel values must lie in [-1, 1], got [{self.pixels.min()}, {self.pixels.max()}]")

    @property
    def size(self) -> int:
        return self.pixels.shape[1]


@dataclass
class CropSpec:
    part_size: int
    rng: np.random.Generator


@dataclass(frozen=True)
class AugmentFlags:
    flip: bool = True
    rotate: bool = True
    center_crop: bool = True

    @classmethod
    def none(cls) -> "AugmentFlags":
        return cls(False, False, False)


@dataclass
class OneShotDataset:
    source_images: list[ImageSample]
    target_image: ImageSample
    augmentation: AugmentFlags = AugmentFlags()
    # epoch bookkeeping for sampling without replacement
    order: list[int] = field(default_factory=list)
    cursor: int = 0

    def __post_init__(self):
        if not self.source_images:
            raise ValueError("need at least one source image")
        if isinstance(self.target_image, (list, tuple)):
            if len(self.target_image) != 1:
                raise ValueError(f"one-shot dataset takes exactly one target image, got {len(self.target_image)}")
            self.target_image = self.target_image[0]

    @property
    def image_size(self) -> int:
        return self.target_image.size

    def sampler_state(self) -> dict:
        return {"order": list(self.order), "cursor": self.cursor}

    def set_sampler_state(self, state: dict) -> None:
        self.order = [int(i) for i in state["order"]]
        self.cursor = int(state["cursor"])


# ---------------------------------------------------------------- crops

def random_part_crop(img: Tensor, spec: CropSpec) -> tuple[Tensor, list[tuple[int, int]]]:
    """One uniformly placed ``part_size`` window per sample, gradient-preserving."""
    n, _, h, w = img.shape
    p = spec.part_size
    if not 0 < p <= min(h, w):
        raise T.ShapeError(f"part size {p} exceeds image {h}x{w}")
    rows = spec.rng.integers(0, h - p + 1, size=n)
    cols = spec.rng.integers(0, w - p + 1, size=n)
    offsets = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return T.crop2d(img, offsets, p), offsets


# ---------------------------------------------------------------- augmentation

def hflip(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels[:, :, ::-1])


def rotate(pixels: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the centre, border pixels replicated."""
    out = ndimage.rotate(pixels, degrees, axes=(2, 1), reshape=False, order=1, mode="nearest")
    return np.clip(out, -1.0, 1.0)


def center_crop_resize(pixels: np.ndarray, fraction: float = CENTER_CROP) -> np.ndarray:
    size = pixels.shape[1]
    c = int(round(size * fraction))
    o = (size - c) // 2
    crop = pixels[:, o:o + c, o:o + c]
    out = ndimage.zoom(crop, (1, size / c, size / c), order=1, mode="nearest", grid_mode=True)
    return np.clip(out, -1.0, 1.0)


def augment(img: ImageSample, flags: AugmentFlags, rng: np.random.Generator) -> ImageSample:
    """Random flip (p=0.5), rotation in [-10, 10] degrees, 7/8 centre crop."""
    px = img.pixels
    if flags.flip and rng.random() < 0.5:
        px = hflip(px)
    if flags.rotate:
        px = rotate(px, rng.uniform(-MAX_ROTATION, MAX_ROTATION))
    if flags.center_crop:
        px = center_crop_resize(px)
    return ImageSample(px, img.domain, img.id)


# ---------------------------------------------------------------- batches

def one_shot_batch(ds: OneShotDataset, batch_size: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Next source batch (without replacement per epoch) and augmented target copies.

    Returns ``(source [B,3,H,W], target [B,3,H,W], source ids)``. A batch
    that runs past the end of an epoch continues in a freshly shuffled one.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    picked = []
    while len(picked) < batch_size:
        if ds.cursor >= len(ds.order):
            ds.order = [int(i) for i in rng.permutation(len(ds.source_images))]
            ds.cursor = 0
        take = min(batch_size - len(picked), len(ds.order) - ds.cursor)
        picked += ds.order[ds.cursor:ds.cursor + take]
        ds.cursor += take
    src = np.stack([ds.source_images[i].pixels for i in picked])
    tgt = np.stack([augment(ds.target_image, ds.augmentation, rng).pixels for _ in range(batch_size)])
    return src, tgt, [ds.source_images[i].id for i in picked]


# ---------------------------------------------------------------- synthetic corpus

def hue_rotate_180(pixels: np.ndarray) -> np.ndarray:
    """Exact 180-degree HSV hue rotation; an involution."""
    hi = pixels.max(axis=0, keepdims=True)
    lo = pixels.min(axis=0, keepdims=True)
    return hi + lo - pixels


def shape_mask(pixels: np.ndarray) -> np.ndarray:
    return (pixels.max(axis=0) - pixels.min(axis=0)) > MASK_THRESHOLD


def oracle(pixels: np.ndarray) -> np.ndarray:
    """Ground-truth source -> target translation."""
    out = hue_rotate_180(pixels)
    mask = shape_mask(pixels)
    edge = mask & ~ndimage.binary_erosion(mask, border_value=0)
    out[:, edge] = np.asarray(STROKE)[:, None]
    return out


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.2, 0.6, size=(5, 5))
    smooth = ndimage.zoom(coarse, size / 5, order=1, mode="nearest", grid_mode=True)
    grey = np.clip(smooth + rng.normal(0.0, BACKGROUND_NOISE, size=(size, size)), 0.0, 1.0)
    return np.repeat(grey[None], 3, axis=0)


def _shape_mask(rng: np.random.Generator, size: int, kind: str) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = rng.uniform(*SHAPE_RADIUS) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    if kind == "ellipse":
        a, b = r, r * rng.uniform(0.6, 1.0)
        if rng.random() < 0.5:
            a, b = b, a
        return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    if kind == "rectangle":
        hw, hh = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        return (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
    angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.0, 4.0]) * np.pi / 3
    px, py = cx + r * np.cos(angles), cy + r * np.sin(angles)
    d = [(xx - px[i]) * (py[(i + 1) % 3] - py[i]) - (yy - py[i]) * (px[(i + 1) % 3] - px[i])
         for i in range(3)]
    return ((d[0] >= 0) & (d[1] >= 0) & (d[2] >= 0)) | ((d[0] <= 0) & (d[1] <= 0) & (d[2] <= 0))


def render_source(rng: np.random.Generator, size: int) -> np.ndarray:
    """One source-domain image: several warm-hued shapes on grey texture, in [-1, 1]."""
    img = _background(rng, size)
    for _ in range(rng.integers(SHAPE_COUNT[0], SHAPE_COUNT[1] + 1)):
        kind = ("ellipse", "rectangle", "triangle")[rng.integers(3)]
        mask = _shape_mask(rng, size, kind)
        hue = (rng.uniform(*HUE_RANGE) % 360.0) / 360.0
        rgb = colorsys.hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.8, 1.0))
        img[:, mask] = np.asarray(rgb)[:, None]
    return img * 2.0 - 1.0


def synth_sources(n: int, size: int, seed: int, stream: int = 0, prefix: str = "src") -> list[ImageSample]:
    """Independently seeded source images; image ``i`` depends only on (seed, stream, i)."""
    if size not in SIZES:
        raise ValueError(f"image size must be one of {SIZES}, got {size}")
    return [ImageSample(render_source(np.random.default_rng([seed, stream, i]), size), SOURCE,
                        f"{prefix}{i:05d}") for i in range(n)]


def synth_corpus(n_source: int, image_size: int = 32, seed: int = 0,
                 augmentation: AugmentFlags = AugmentFlags()):
    """Return ``(dataset, oracle)`` for a seeded one-shot task."""
    if n_source < 2:
        raise ValueError("need >= 2 source images")
    sources = synth_sources(n_source, image_size, seed, stream=0)
    held_out = render_source(np.random.default_rng([seed, 1, 0]), image_size)
    target = ImageSample(oracle(held_out), TARGET, "target")
    return OneShotDataset(sources, target, augmentation), oracle


def synth_test_set(n: int, image_size: int = 32, seed: int = 0) -> tuple[list[ImageSample], list[ImageSample]]:
    """Held-out sources and their oracle translations."""
    xs = synth_sources(n, image_size, seed, stream=2, prefix="test")
    ys = [ImageSample(oracle(x.pixels), TARGET, x.id) for x in xs]
    return xs, ys


def target_orbit(ds: OneShotDataset, n: int, seed: int) -> list[ImageSample]:
    rng = np.random.default_rng([seed, 3])
    return [augment(ds.target_image, AugmentFlags(), rng) for _ in range(n)]


# ---------------------------------------------------------------- image files

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round((np.clip(pixels, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) * 2.0 / 255.0 - 1.0


def _write_ppm(path: Path, hwc: np.ndarray) -> None:
    h, w, _ = hwc.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(hwc.tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if not raw:
        raise TruncatedFileError(f"{path}: empty file")
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    body = raw[pos:pos + w * h * 3]
    if len(body) < w * h * 3:
        raise TruncatedFileError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def save_image(img: ImageSample | np.ndarray, path) -> None:
    path = Path(path)
    px = img.pixels if isinstance(img, ImageSample) else np.asarray(img)
    hwc = to_uint8(px).transpose(1, 2, 0)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        _write_ppm(path, np.ascontiguousarray(hwc))
    elif suffix == ".png":
        from PIL import Image
        Image.fromarray(hwc, "RGB").save(path)
    else:
        raise ImageFormatError(f"{path}: unsupported format {suffix!r} (use .ppm or .png)")


def load_image(path, domain: str = SOURCE, crop_to_square: bool = False) -> ImageSample:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        hwc = _read_ppm(path)
    elif suffix == ".png":
        if path.stat().st_size == 0:
            raise TruncatedFileError(f"{path}: empty file")
        from PIL import Image
        try:
            with Image.open(path) as im:
                hwc = np.asarray(im.convert("RGB"))
        except OSError as e:
            raise TruncatedFileError(f"{path}: {e}") from e
    else:
        raise ImageFormatError(f"{path}: unsupported format {suffix!r}")
    h, w, _ = hwc.shape
    if h != w:
        if not crop_to_square:
            raise ImageFormatError(f"{path}: image is {w}x{h}, not square")
        s = min(h, w)
        hwc = hwc[(h - s) // 2:(h - s) // 2 + s, (w - s) // 2:(w - s) // 2 + s]
    return ImageSample(from_uint8(hwc.transpose(2, 0, 1)), domain, path.stem)


# ---------------------------------------------------------------- corpus on disk

MANIFEST = "manifest.json"
ORACLE_PARAMS = {
    "kind": "hue_rotate_180+stroke",
    "mask_threshold": MASK_THRESHOLD,
    "stroke_rgb": list(STROKE),
    "source_hue_range_deg": list(HUE_RANGE),
}


def write_corpus(out_dir, n_source: int, image_size: int, seed: int, n_test: int = 256) -> dict:
    """Write PPM images plus ``manifest.json``; identical bytes for identical arguments."""
    out = Path(out_dir)
    ds, _ = synth_corpus(n_source, image_size, seed)
    test_x, test_y = synth_test_set(n_test, image_size, seed)
    for sub in ("source", "target", "test"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for img in ds.source_images:
        rel = f"source/{img.id}.ppm"
        save_image(img, out / rel)
        entries.append({"id": img.id, "path": rel, "domain": SOURCE})
    save_image(ds.target_image, out / "target/target.ppm")
    entries.append({"id": "target", "path": "target/target.ppm", "domain": TARGET})
    test = []
    for x, y in zip(test_x, test_y):
        save_image(x, out / f"test/{x.id}.ppm")
        save_image(y, out / f"test/{x.id}_oracle.ppm")
        test.append({"id": x.id, "path": f"test/{x.id}.ppm", "oracle_path": f"test/{x.id}_oracle.ppm"})
    manifest = {"version": 1, "image_size": image_size, "seed": seed, "oracle": ORACLE_PARAMS,
                "entries": entries, "test": test}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_corpus(corpus_dir, augmentation: AugmentFlags = AugmentFlags()):
    """Load a corpus directory: ``(dataset, test_sources, test_oracles)``."""
    root = Path(corpus_dir)
    manifest = json.loads((root / MANIFEST).read_text())
    sources, targets = [], []
    for e in manifest["entries"]:
        img = load_image(root / e["path"], e["domain"])
        img.id = e["id"]
        (targets if e["domain"] == TARGET else sources).append(img)
    if len(targets) != 1:
        raise ValueError(f"{root}: manifest must list exactly one target image, found {len(targets)}")
    test_x = [load_image(root / t["path"], SOURCE) for t in manifest.get("test", [])]
    test_y = [load_image(root / t["oracle_path"], TARGET) for t in manifest.get("test", [])]
    return OneShotDataset(sources, targets[0], augmentation), test_x, test_y
