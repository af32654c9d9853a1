"""Slow, loop-based reference implementations used to cross-check the fast code.

Nothing here imports from the modules it validates, except the ``Tensor``
container that ``oracle_finite_diff`` has to speak.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_DFT_SIZE = 16


class OracleError(ValueError):
    pass


@dataclass
class OracleReport:
    max_abs: float
    max_rel: float
    worst_index: tuple

    def ok(self, tol: float, relative: bool = False) -> bool:
        return (self.max_rel if relative else self.max_abs) <= tol


def compare(actual, expected, floor: float = 1e-12) -> OracleReport:
    """Elementwise disagreement; relative error uses ``max(|expected|, floor)``."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if a.shape != e.shape:
        raise OracleError(f"shape mismatch: {a.shape} vs {e.shape}")
    if a.size == 0:
        return OracleReport(0.0, 0.0, ())
    diff = np.abs(a - e)
    rel = diff / np.maximum(np.abs(e), floor)
    worst = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return OracleReport(float(diff.max()), float(rel.max()), tuple(int(i) for i in worst))


# -- DFT --------------------------------------------------------------------------
def oracle_dft2(image) -> np.ndarray:
    """Textbook 2-d DFT of the trailing two axes; returns (..., 2, H, W) real/imag planes."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim < 2:
        raise OracleError("oracle_dft2 needs at least 2 dimensions")
    h, w = x.shape[-2:]
    if h > MAX_DFT_SIZE or w > MAX_DFT_SIZE:
        raise OracleError(f"oracle_dft2 is limited to {MAX_DFT_SIZE}x{MAX_DFT_SIZE}, got {h}x{w}")
    lead = x.shape[:-2]
    flat = x.reshape(-1, h, w)
    out = np.zeros((flat.shape[0], 2, h, w))
    for b in range(flat.shape[0]):
        for u in range(h):
            for v in range(w):
                re = im = 0.0
                for r in range(h):
                    for c in range(w):
                        angle = 2.0 * math.pi * (u * r / h + v * c / w)
                        re += flat[b, r, c] * math.cos(angle)
                        im -= flat[b, r, c] * math.sin(angle)
                out[b, 0, u, v] = re
                out[b, 1, u, v] = im
    return out.reshape(lead + (2, h, w))


# -- geometry -----------------------------------------------------------------------
def _collinear(poly) -> bool:
    """True when every vertex lies on one line, i.e. the polygon encloses no area."""
    x0, y0 = poly[0]
    for i in range(1, len(poly)):
        for j in range(i + 1, len(poly)):
            (x1, y1), (x2, y2) = poly[i], poly[j]
            if (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0) != 0:
                return False
    return True


def _on_segment(px, py, a, b) -> bool:
    (ax, ay), (bx, by) = a, b
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if cross != 0:
        return False
    return min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by)


def oracle_point_in_polygon(point, polygon) -> bool:
    """Even-odd test with a ray cast towards +x. Boundary points and collinear polygons give False."""
    poly = [(float(x), float(y)) for x, y in polygon]
    if len(poly) < 3:
        raise OracleError("polygon needs at least 3 vertices")
    if _collinear(poly):
        return False
    px, py = float(point[0]), float(point[1])
    inside = False
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if _on_segment(px, py, a, b):
            return False
        (ax, ay), (bx, by) = a, b
        # half-open rule on y so a vertex on the ray is counted once
        if (ay > py) == (by > py):
            continue
        t = (py - ay) / (by - ay)
        if ax + t * (bx - ax) > px:
            inside = not inside
    return inside


def oracle_mask(polygons, height: int, width: int) -> np.ndarray:
    """Per-pixel union of point-in-polygon tests at pixel centres."""
    out = np.zeros((height, width), dtype=np.uint8)
    for r in range(height):
        for c in range(width):
            for poly in polygons:
                if oracle_point_in_polygon((c + 0.5, r + 0.5), poly):
                    out[r, c] = 1
                    break
    return out


# -- autodiff --------------------------------------------------------------------------
def oracle_finite_diff(fn, x, eps: float = 1e-6, indices=None):
    """Central differences of scalar ``fn`` at ``x``.

    ``indices`` restricts the probe to some flat positions (others are left
    at 0), which keeps checks of large parameter tensors affordable.
    """
    from .tensor import Tensor

    if not eps > 0:
        raise OracleError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    dtype = x.dtype if isinstance(x, Tensor) else np.float64
    grad = np.zeros(base.size)
    flat = base.reshape(-1)
    probe = range(base.size) if indices is None else indices

    def value(arr):
        out = fn(Tensor(arr.reshape(base.shape), dtype=dtype))
        v = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(()))
        if not math.isfinite(v):
            raise OracleError("function returned a non-finite value")
        return v

    for i in probe:
        keep = flat[i]
        flat[i] = keep + eps
        hi = value(flat)
        flat[i] = keep - eps
        lo = value(flat)
        flat[i] = keep
        grad[i] = (hi - lo) / (2.0 * eps)
    return Tensor(grad.reshape(base.shape))


# -- optimizer -------------------------------------------------------------------------
def oracle_adamw(p0, grads, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decay=True):
    """Scalar-at-a-time AdamW trajectory; ``grads`` is a list of per-step gradient arrays.

    Returns the parameter after every step.
    """
    b1, b2 = betas
    p = [float(v) for v in np.asarray(p0, dtype=np.float64).reshape(-1)]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    history = []
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(len(p)):
            if decay and weight_decay:
                p[i] = p[i] - lr * weight_decay * p[i]
            m[i] = b1 * m[i] + (1.0 - b1) * g[i]
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
            m_hat = m[i] / (1.0 - b1 ** t)
            v_hat = v[i] / (1.0 - b2 ** t)
            p[i] = p[i] - lr * m_hat / (math.sqrt(v_hat) + eps)
        history.append(np.array(p).reshape(np.shape(p0)))
    return history


# -- metrics ------------------------------------------------------------------------------
def _pixels(img):
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise OracleError(f"expected a (3, H, W) image, got {x.shape}")
    return x


def oracle_mse(o, y) -> float:
    o, y = np.asarray(o, dtype=np.float64), np.asarray(y, dtype=np.float64)
    total, count = 0.0, 0
    for a, b in zip(o.reshape(-1), y.reshape(-1)):
        total += (a - b) * (a - b)
        count += 1
    return total / count


def oracle_psnr(o, y, cap: float = 99.0) -> float:
    mse = oracle_mse(o, y)
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def _gray_diff(o, y):
    o, y = _pixels(o), _pixels(y)
    _, h, w = o.shape
    d = [[0.0] * w for _ in range(h)]
    for r in range(h):
        for c in range(w):
            go = 255.0 * (0.299 * o[0, r, c] + 0.587 * o[1, r, c] + 0.114 * o[2, r, c])
            gy = 255.0 * (0.299 * y[0, r, c] + 0.587 * y[1, r, c] + 0.114 * y[2, r, c])
            d[r][c] = abs(go - gy)
    return d, h, w


def oracle_error_stats(o, y, threshold: float = 20.0) -> tuple[float, float, float]:
    """(AGE, pEPs, pCEPs) by explicit pixel loops."""
    d, h, w = _gray_diff(o, y)
    err = [[d[r][c] > threshold for c in range(w)] for r in range(h)]
    age = sum(sum(row) for row in d) / (h * w)
    n_err = sum(sum(row) for row in err)
    n_clu = 0
    for r in range(h):
        for c in range(w):
            if not err[r][c]:
                continue
            neighbours = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            if all(err[i][j] for i, j in neighbours if 0 <= i < h and 0 <= j < w):
                n_clu += 1
    return age, n_err / (h * w), n_clu / (h * w)
