"""Annotated images: parsing, image IO, a synthetic corpus, augmentation and batching.

Pretraining only ever sees ``(image, polygons)``; the ``clean`` target is
loaded only when a caller explicitly asks for it.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .masks import PoolEntry, TextPolygon, rasterize, sample_rand_mask

IGNORE_TEXT = "###"


class DataError(ValueError):
    """Malformed annotation, unreadable image or inconsistent sample."""


@dataclass
class AnnotatedImage:
    image: np.ndarray                      # (3, H, W) in [0, 1]
    polygons: list[TextPolygon]
    clean: np.ndarray | None = None        # (3, H, W), synthetic / STR data only
    name: str = ""

    def __post_init__(self):
        if self.clean is not None and self.clean.shape != self.image.shape:
            raise DataError(f"clean shape {self.clean.shape} != image shape {self.image.shape}")

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass
class Batch:
    images: np.ndarray                     # (N, 3, H, W)
    text_masks: np.ndarray                 # (N, 1, H, W), {0, 1}
    rand_masks: np.ndarray                 # (N, 1, H, W), {0, 1}
    cleans: np.ndarray | None = None       # (N, 3, H, W)

    def __len__(self):
        return len(self.images)


# -- annotation files ----------------------------------------------------------
def parse_detection_file(text: str, image_w: int | None = None, image_h: int | None = None) -> list[TextPolygon]:
    """Parse ICDAR-style ``x1,y1,...,x4,y4,transcription`` lines.

    A transcription of exactly ``###`` sets the ignore flag. Coordinates
    outside the image are kept as-is (rasterization clips them); the image
    size arguments are accepted for interface symmetry with callers that
    know it.
    """
    text = text.lstrip("﻿")
    polys = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = next(csv.reader([line.strip()], skipinitialspace=True))
        if len(fields) < 9:
            raise DataError(f"line {lineno}: expected 8 coordinates and a transcription, got {len(fields)} fields")
        try:
            coords = [float(f) for f in fields[:8]]
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric coordinate in {fields[:8]}") from None
        if not all(math.isfinite(c) for c in coords):
            raise DataError(f"line {lineno}: non-finite coordinate")
        transcription = ",".join(fields[8:])
        polys.append(TextPolygon(np.array(coords).reshape(4, 2), ignore=transcription == IGNORE_TEXT))
    return polys


def format_detection_file(polys: Sequence[TextPolygon], text: str = "text") -> str:
    lines = []
    for p in polys:
        coords = ",".join(_fmt_coord(c) for c in p.vertices.reshape(-1))
        lines.append(f"{coords},{IGNORE_TEXT if p.ignore else text}")
    return "".join(line + "\n" for line in lines)


def _fmt_coord(c: float) -> str:
    return str(int(c)) if float(c).is_integer() else repr(float(c))


# -- images ----------------------------------------------------------------------
def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG or binary PPM (P6) as a (3, H, W) float64 array in [0, 1]."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if not (raw.startswith(b"\x89PNG\r\n\x1a\n") or raw.startswith(b"P6")):
        raise DataError(f"{path}: unsupported image format (need PNG or P6 PPM)")
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from None
    if img.mode != "RGB":
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: np.ndarray):
    """Write a (3, H, W) array in [0, 1] as PNG or PPM (by suffix)."""
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise DataError(f"{path}: output must be .png or .ppm")
    Image.fromarray(to_uint8(image).transpose(1, 2, 0), mode="RGB").save(path, format=fmt)


def resize_nearest(image: np.ndarray, height: int, width: int) -> np.ndarray:
    _, h, w = image.shape
    rows = np.minimum((np.arange(height) + 0.5) * h / height, h - 1).astype(int)
    cols = np.minimum((np.arange(width) + 0.5) * w / width, w - 1).astype(int)
    return image[:, rows][:, :, cols]


def resize_sample(sample: AnnotatedImage, size: int) -> AnnotatedImage:
    if sample.height == size and sample.width == size:
        return sample
    sx, sy = size / sample.width, size / sample.height
    return AnnotatedImage(
        resize_nearest(sample.image, size, size),
        [p.scaled(sx, sy) for p in sample.polygons],
        None if sample.clean is None else resize_nearest(sample.clean, size, size),
        sample.name,
    )


# -- synthetic corpus ------------------------------------------------------------------
@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    boxes: tuple[int, int] = (1, 3)
    box_w: tuple[int, int] = (16, 30)
    box_h: tuple[int, int] = (8, 14)
    shapes: tuple[int, int] = (0, 3)
    chars: tuple[int, int] = (2, 4)
    stroke: tuple[int, int] = (1, 2)

    @classmethod
    def for_size(cls, size: int) -> "SynthConfig":
        """Square canvas with box extents scaled from the 64px defaults."""
        if size == 64:
            return cls()
        f = size / 64
        scale = lambda r: (max(3, round(r[0] * f)), max(3, round(r[1] * f)))
        boxes = (1, 3) if size >= 48 else (1, 2)
        return cls(height=size, width=size, boxes=boxes, box_w=scale((16, 30)), box_h=scale((8, 14)))


def _glyph_strokes(bh: int, bw: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Random bars and arcs inside a (bh, bw) box, leaving a 1px margin."""
    out = np.zeros((bh, bw), dtype=bool)
    ih, iw = bh - 2, bw - 2
    if ih < 1 or iw < 1:
        return out
    n_chars = int(rng.integers(cfg.chars[0], cfg.chars[1] + 1))
    n_chars = max(1, min(n_chars, iw // 3))
    edges = np.linspace(0, iw, n_chars + 1).round().astype(int)
    yy, xx = np.mgrid[0:ih, 0:iw] + 0.5
    inner = out[1:-1, 1:-1]
    for c0, c1 in zip(edges[:-1], edges[1:]):
        cw = c1 - c0
        t = int(rng.integers(cfg.stroke[0], cfg.stroke[1] + 1))
        kinds = rng.choice(4, size=int(rng.integers(1, 4)), replace=True)
        for kind in kinds:
            if kind == 0:    # vertical bar
                x = c0 + int(rng.integers(0, max(cw - t, 0) + 1))
                inner[:, x:min(x + t, c1)] = True
            elif kind == 1:  # horizontal bar
                y = int(rng.integers(0, max(ih - t, 0) + 1))
                inner[y:y + t, c0:c1] = True
            elif kind == 2:  # arc
                cx, cy = (c0 + c1) / 2, ih / 2
                r = max(min(cw, ih) / 2 - t / 2, 0.75)
                start = rng.uniform(0, 2 * np.pi)
                span = rng.uniform(np.pi, 2 * np.pi)
                ang = np.mod(np.arctan2(yy - cy, xx - cx) - start, 2 * np.pi)
                ring = np.abs(np.hypot(yy - cy, xx - cx) - r) < t / 2 + 0.25
                sel = ring & (ang <= span) & (xx >= c0) & (xx < c1)
                inner[sel] = True
            else:            # diagonal
                x0 = c0 + 0.5
                slope = (cw - 1) / max(ih - 1, 1) * rng.choice([-1, 1])
                xs = (x0 if slope > 0 else c1 - 0.5) + slope * (yy - 0.5)
                inner[(np.abs(xx - xs) < t / 2 + 0.25) & (xx >= c0) & (xx < c1)] = True
    if not out.any():
        inner[:, iw // 2] = True
    return out


def synth_generate(cfg: SynthConfig, rng: np.random.Generator) -> AnnotatedImage:
    """One synthetic text image with its clean background and box polygons."""
    h, w = cfg.height, cfg.width
    max_h, max_w = cfg.box_h[1], cfg.box_w[1]
    rows, cols = h // max_h, w // max_w
    if cfg.boxes[1] > rows * cols:
        raise DataError(f"{cfg.boxes[1]} boxes of up to {max_w}x{max_h} do not fit a {w}x{h} image")

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yn, xn = (yy + 0.5) / h - 0.5, (xx + 0.5) / w - 0.5
    base = rng.uniform(0.15, 0.85, 3)
    gx, gy = rng.uniform(-0.35, 0.35, (2, 3))
    clean = base[:, None, None] + gx[:, None, None] * xn + gy[:, None, None] * yn
    for _ in range(int(rng.integers(cfg.shapes[0], cfg.shapes[1] + 1))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(h / 10, h / 4)
        amp = rng.uniform(-0.3, 0.3, 3)
        clean = clean + amp[:, None, None] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    clean = np.clip(clean, 0.0, 1.0)

    image = clean.copy()
    polys = []
    n_boxes = int(rng.integers(cfg.boxes[0], cfg.boxes[1] + 1))
    if n_boxes:
        oy = int(rng.integers(0, h - rows * max_h + 1))
        ox = int(rng.integers(0, w - cols * max_w + 1))
        cells = rng.choice(rows * cols, size=n_boxes, replace=False)
        for cell in cells:
            r, c = divmod(int(cell), cols)
            bw = int(rng.integers(cfg.box_w[0], cfg.box_w[1] + 1))
            bh = int(rng.integers(cfg.box_h[0], cfg.box_h[1] + 1))
            x0 = ox + c * max_w + int(rng.integers(0, max_w - bw + 1))
            y0 = oy + r * max_h + int(rng.integers(0, max_h - bh + 1))
            region = clean[:, y0:y0 + bh, x0:x0 + bw]
            lum = float(np.mean(0.299 * region[0] + 0.587 * region[1] + 0.114 * region[2]))
            color = rng.uniform(0.0, 0.2, 3) if lum > 0.5 else rng.uniform(0.8, 1.0, 3)
            strokes = _glyph_strokes(bh, bw, cfg, rng)
            patch = image[:, y0:y0 + bh, x0:x0 + bw]
            patch[:, strokes] = color[:, None]
            polys.append(TextPolygon([(x0, y0), (x0 + bw, y0), (x0 + bw, y0 + bh), (x0, y0 + bh)]))
    return AnnotatedImage(image, polys, clean)


# -- augmentation ------------------------------------------------------------------
@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    brightness: tuple[float, float] = (0.8, 1.2)
    color: tuple[float, float] = (0.9, 1.1)


def augment(sample: AnnotatedImage, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
            flip: bool | None = None, brightness: float | None = None, color=None) -> AnnotatedImage:
    """Random horizontal flip plus brightness and per-channel colour jitter.

    The random draws always happen in the same order, so forcing one factor
    does not shift the stream for the others.
    """
    u = rng.random()
    b = rng.uniform(*cfg.brightness)
    c = rng.uniform(*cfg.color, 3)
    flip = u < cfg.flip_prob if flip is None else flip
    b = b if brightness is None else brightness
    c = c if color is None else np.broadcast_to(np.asarray(color, dtype=np.float64), (3,))
    factor = (b * c)[:, None, None]

    def tf(x):
        if x is None:
            return None
        if flip:
            x = x[:, :, ::-1]
        return np.clip(x * factor, 0.0, 1.0)

    polys = [p.flipped(sample.width) for p in sample.polygons] if flip else list(sample.polygons)
    return replace(sample, image=tf(sample.image), clean=tf(sample.clean), polygons=polys)


# -- batching ----------------------------------------------------------------------
def make_batch(samples: Sequence[AnnotatedImage], pool: Sequence[PoolEntry], rng: np.random.Generator,
               pool_indices: Sequence[int] | None = None, dilation: int = 0,
               with_clean: bool = False) -> Batch:
    """Stack samples and draw their text / random masks.

    The random mask of sample ``i`` never comes from ``pool[pool_indices[i]]``.
    """
    if not samples:
        raise DataError("empty batch")
    shape = samples[0].image.shape
    for s in samples:
        if s.image.shape != shape:
            raise DataError(f"heterogeneous sample shapes {shape} and {s.image.shape}")
    _, h, w = shape
    text = np.stack([rasterize(s.polygons, h, w, dilation) for s in samples])[:, None]
    excl = pool_indices if pool_indices is not None else [None] * len(samples)
    rand = np.stack([sample_rand_mask(pool, h, w, rng, exclude=e, dilation=dilation) for e in excl])[:, None]
    cleans = None
    if with_clean:
        if any(s.clean is None for s in samples):
            raise DataError("finetuning batch requested but a sample has no clean target")
        cleans = np.stack([s.clean for s in samples])
    return Batch(np.stack([s.image for s in samples]), text.astype(np.float64), rand.astype(np.float64), cleans)


@dataclass
class Dataset:
    samples: list[AnnotatedImage]
    pool: list[PoolEntry] = field(default_factory=list)

    def __post_init__(self):
        if not self.pool:
            self.pool = [PoolEntry(list(s.polygons), s.height, s.width, s.name) for s in self.samples]

    def __len__(self):
        return len(self.samples)

    def num_batches(self, batch_size: int) -> int:
        return -(-len(self.samples) // batch_size)

    def batches(self, batch_size: int, seed: int, epoch: int, with_clean: bool = False,
                augment_cfg: AugmentConfig | None = AugmentConfig(), dilation: int = 0,
                start: int = 0) -> Iterator[Batch]:
        """Deterministic batch stream for one epoch, optionally skipping the first ``start`` batches.

        Order and augmentation depend only on ``(seed, epoch, batch index)``.
        """
        order = np.random.default_rng([seed, epoch]).permutation(len(self.samples))
        for b in range(start, self.num_batches(batch_size)):
            idx = order[b * batch_size:(b + 1) * batch_size]
            rng = np.random.default_rng([seed, epoch, b])
            picked = [self.samples[i] for i in idx]
            if augment_cfg is not None:
                picked = [augment(s, rng, augment_cfg) for s in picked]
            yield make_batch(picked, self.pool, rng, pool_indices=idx, dilation=dilation, with_clean=with_clean)


def synth_corpus(n: int, seed: int, cfg: SynthConfig = SynthConfig(), prefix: str = "img") -> list[AnnotatedImage]:
    out = []
    for i in range(n):
        s = synth_generate(cfg, np.random.default_rng([seed, i]))
        s.name = f"{prefix}_{i:04d}"
        out.append(s)
    return out


# -- on-disk corpora ----------------------------------------------------------------
def clean_path_for(image_path: Path) -> Path:
    """Clean targets live in a ``clean/`` sibling directory under the same file name."""
    return image_path.parent / "clean" / image_path.name


def write_split(out_dir, samples: Sequence[AnnotatedImage], manifest_name: str) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img = out_dir / f"{s.name}.png"
        save_image(img, s.image)
        img.with_suffix(".txt").write_text(format_detection_file(s.polygons))
        if s.clean is not None:
            save_image(clean_path_for(img), s.clean)
        lines.append(img.name)
    manifest = out_dir / manifest_name
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def read_manifest(path) -> list[Path]:
    path = Path(path)
    base = path.parent
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out


def load_dataset(manifest, size: int, with_clean: bool) -> Dataset:
    """Load every manifest entry, resized to ``size``; clean targets only if asked."""
    samples = []
    for img_path in read_manifest(manifest):
        ann = img_path.with_suffix(".txt")
        if not ann.exists():
            raise DataError(f"missing annotation file {ann}")
        image = load_image(img_path)
        with open(ann, encoding="utf-8-sig") as fh:
            polys = parse_detection_file(fh.read(), image.shape[2], image.shape[1])
        clean = None
        if with_clean:
            cp = clean_path_for(img_path)
            if not cp.exists():
                raise DataError(f"missing clean target {cp}")
            clean = load_image(cp)
        samples.append(resize_sample(AnnotatedImage(image, polys, clean, img_path.stem), size))
    if not samples:
        raise DataError(f"manifest {manifest} lists no images")
    return Dataset(samples)
