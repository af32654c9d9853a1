"""Text-region masks: polygon rasterization and cross-image mask sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .tensor import Tensor, as_tensor, mul


@dataclass
class TextPolygon:
    """A text-region outline in pixel coordinates.

    ``ignore`` marks "do not care" annotations (``###``); they still count as
    text when rasterized.
    """

    vertices: np.ndarray
    ignore: bool = False

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if len(v) < 3:
            raise ValueError(f"polygon needs at least 3 vertices, got {len(v)}")
        self.vertices = v

    def scaled(self, sx: float, sy: float) -> TextPolygon:
        return TextPolygon(self.vertices * np.array([sx, sy]), self.ignore)

    def flipped(self, width: int) -> TextPolygon:
        v = self.vertices.copy()
        v[:, 0] = width - v[:, 0]
        return TextPolygon(v, self.ignore)


@dataclass
class PoolEntry:
    """Polygons of one image together with that image's size."""

    polygons: list[TextPolygon]
    height: int
    width: int
    name: str = field(default="")


def _polygon_mask(v: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    nxt = np.roll(v, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(v, nxt):
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        on_edge |= ((cross == 0)
                    & (px >= min(x0, x1)) & (px <= max(x0, x1))
                    & (py >= min(y0, y1)) & (py <= max(y0, y1)))
        if y0 == y1:
            continue
        spans = (y0 > py) != (y1 > py)
        x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= spans & (px < x_at)
    return inside & ~on_edge


def rasterize(polys: Sequence[TextPolygon], height: int, width: int, dilation: int = 0) -> np.ndarray:
    """Binary (H, W) uint8 mask of pixels whose centres lie strictly inside any polygon.

    Each polygon is filled with the even-odd rule; overlapping polygons union.
    ``dilation`` grows the mask by that many pixels (square structuring element).
    """
    if height < 1 or width < 1:
        raise ValueError(f"mask size must be positive, got {height}x{width}")
    mask = np.zeros((height, width), dtype=bool)
    if polys:
        py, px = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
        for poly in polys:
            if not isinstance(poly, TextPolygon):
                poly = TextPolygon(poly)
            v = poly.vertices
            # only pixels in the polygon's bounding box can be inside
            r0 = max(int(np.floor(v[:, 1].min())), 0)
            r1 = min(int(np.ceil(v[:, 1].max())) + 1, height)
            c0 = max(int(np.floor(v[:, 0].min())), 0)
            c1 = min(int(np.ceil(v[:, 0].max())) + 1, width)
            if r0 >= r1 or c0 >= c1:
                continue
            mask[r0:r1, c0:c1] |= _polygon_mask(v, px[r0:r1, c0:c1], py[r0:r1, c0:c1])
    if dilation > 0:
        mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=dilation)
    return mask.astype(np.uint8)


def sample_rand_mask(pool: Sequence[PoolEntry], target_h: int, target_w: int,
                     rng: np.random.Generator, exclude: int | None = None,
                     dilation: int = 0) -> np.ndarray:
    """Rasterize the polygons of a uniformly drawn pool entry at the target size.

    ``exclude`` removes one pool index from the draw (the sample's own
    annotation); if that leaves nothing the whole pool is used.
    """
    if not pool:
        raise ValueError("cannot sample a random mask from an empty annotation pool")
    choices = [i for i in range(len(pool)) if i != exclude] or list(range(len(pool)))
    entry = pool[choices[int(rng.integers(len(choices)))]]
    sx, sy = target_w / entry.width, target_h / entry.height
    polys = [p.scaled(sx, sy) for p in entry.polygons]
    return rasterize(polys, target_h, target_w, dilation)


def mask_complement_apply(image, mask) -> Tensor:
    """``image * (1 - mask)``, the mask broadcast over the channel axis.

    ``image`` is (C, H, W) or (N, C, H, W); ``mask`` is (H, W), (1, H, W) or
    (N, 1, H, W).
    """
    image = as_tensor(image)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape[-2:] != image.shape[-2:]:
        raise ValueError(f"mask spatial size {m.shape[-2:]} does not match image {image.shape[-2:]}")
    if m.ndim == 2 and image.ndim == 4:
        m = m[None, None]
    keep = (1 - m.astype(image.dtype)).astype(image.dtype)
    return mul(image, Tensor(keep, dtype=image.dtype))
