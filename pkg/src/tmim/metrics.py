"""Full-reference image metrics: PSNR, MSSIM, MSE, AGE, pEPs, pCEPs."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .losses import ssim_map
from .tensor import Tensor, no_grad

PSNR_CAP = 99.0
ERROR_THRESHOLD = 20.0
LUMA = (0.299, 0.587, 0.114)


def _arrays(o, y):
    o = np.asarray(o.data if isinstance(o, Tensor) else o, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if o.shape != y.shape:
        raise ValueError(f"shape mismatch: {o.shape} vs {y.shape}")
    return o, y


def psnr(o, y) -> float:
    o, y = _arrays(o, y)
    mse = float(np.mean((o - y) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def mse100(o, y) -> float:
    o, y = _arrays(o, y)
    return 100.0 * float(np.mean((o - y) ** 2))


def mssim(o, y) -> float:
    """Mean SSIM in percent; inputs (C, H, W) or (N, C, H, W)."""
    o, y = _arrays(o, y)
    with no_grad():
        return 100.0 * float(np.mean(ssim_map(Tensor(o), Tensor(y)).data))


def gray(x: np.ndarray) -> np.ndarray:
    """(3, H, W) in [0, 1] -> (H, W) luma on the 0-255 scale."""
    return 255.0 * (LUMA[0] * x[0] + LUMA[1] * x[1] + LUMA[2] * x[2])


def age_peps_pceps(o, y, threshold: float = ERROR_THRESHOLD) -> tuple[float, float, float]:
    """Average gray-level error, error-pixel fraction, clustered-error-pixel fraction.

    A pixel is an error pixel when its gray difference exceeds ``threshold``;
    it is clustered when every in-bounds 4-neighbour is an error pixel too.
    """
    o, y = _arrays(o, y)
    d = np.abs(gray(o) - gray(y))
    err = d > threshold
    clustered = err.copy()
    clustered[1:, :] &= err[:-1, :]
    clustered[:-1, :] &= err[1:, :]
    clustered[:, 1:] &= err[:, :-1]
    clustered[:, :-1] &= err[:, 1:]
    return float(d.mean()), float(err.mean()), float(clustered.mean())


@dataclass
class EvalReport:
    psnr: float
    mssim: float
    mse: float
    age: float
    peps: float
    pceps: float
    n_images: int = 1

    def row(self) -> dict:
        return asdict(self)


def evaluate(o, y) -> EvalReport:
    age, peps, pceps = age_peps_pceps(o, y)
    return EvalReport(psnr(o, y), mssim(o, y), mse100(o, y), age, peps, pceps, 1)


def splice(o, y, mask, pad: int = 0) -> np.ndarray:
    """Ground truth outside the (dilated) mask, prediction inside."""
    o, y = _arrays(o, y)
    m = np.asarray(mask).astype(bool)
    if m.ndim == 3:
        m = m[0]
    if m.shape != o.shape[-2:]:
        raise ValueError(f"mask shape {m.shape} does not match image {o.shape[-2:]}")
    if pad > 0:
        m = ndimage.binary_dilation(m, structure=np.ones((3, 3), bool), iterations=pad)
    return np.where(m, o, y)


def region_restricted_eval(o, y, mask, pad: int = 0) -> EvalReport:
    """Score only the text region: splice ``o`` into ``y`` under the mask, then compare to ``y``."""
    _, y_arr = _arrays(o, y)
    return evaluate(splice(o, y, mask, pad), y_arr)


def aggregate(reports) -> EvalReport:
    """Unweighted mean of per-image reports."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    names = [f.name for f in fields(EvalReport) if f.name != "n_images"]
    vals = {k: float(np.mean(sorted(getattr(r, k) for r in reports))) for k in names}
    return EvalReport(**vals, n_images=sum(r.n_images for r in reports))


def report_csv(reports: dict[str, EvalReport]) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(EvalReport)]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["split"] + names)
    for label, r in reports.items():
        writer.writerow([label] + [repr(getattr(r, k)) for k in names])
    return buf.getvalue()


def report_table(reports: dict[str, EvalReport]) -> str:
    header = ["Methods", "PSNR", "MSSIM", "MSE", "AGE", "pEPs", "pCEPs"]
    rows = [[label, f"{r.psnr:.2f}", f"{r.mssim:.2f}", f"{r.mse:.4f}", f"{r.age:.2f}",
             f"{r.peps:.4f}", f"{r.pceps:.4f}"] for label, r in reports.items()]
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = [" | ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in [header] + rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
