"""Reconstruction objective: L1 + focal frequency + SSIM + feature (perceptual and Gram) terms."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

FEATURE_SEED = 0x7E57
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 15.0   # L1
    lambda2: float = 15.0   # focal frequency
    alpha: float = 1.0      # 1 - SSIM
    beta: float = 1.0       # feature

    def __post_init__(self):
        for k in ("lambda1", "lambda2", "alpha", "beta"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


def _check(o: Tensor, y: Tensor):
    if o.shape != y.shape:
        raise T.ShapeError(f"prediction shape {o.shape} != target shape {y.shape}")


def _pair(o, y):
    o = T.as_tensor(o)
    y = T.as_tensor(y, o.dtype)
    _check(o, y)
    return o, y


def l1_loss(o, y) -> Tensor:
    o, y = _pair(o, y)
    return T.mean(T.absolute(T.sub(o, y)))


# -- focal frequency loss --------------------------------------------------------
def _spectrum_distance(o: Tensor, y: Tensor) -> Tensor:
    f = T.dft2(T.sub(o, y))
    return T.add(T.square(f[:, :, 0]), T.square(f[:, :, 1]))


def ffl_weight(o, y) -> np.ndarray:
    """Spectrum weight ``|F_o - F_y| / max`` per image-channel; 0 where the max is 0."""
    o, y = _pair(o, y)
    with no_grad():
        d = _spectrum_distance(o, y).data
    mag = np.sqrt(d)
    peak = mag.max(axis=(-2, -1), keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    return np.where(peak > 0, mag / safe, 0.0).astype(o.dtype)


def ffl_loss(o, y, weight: np.ndarray | None = None) -> Tensor:
    """Focal frequency loss with focusing exponent 1.

    ``weight`` is treated as a constant; pass a precomputed one (see
    :func:`ffl_weight`) to freeze it, e.g. for finite-difference checks.
    """
    o, y = _pair(o, y)
    if o.ndim != 4:
        raise T.ShapeError(f"ffl_loss expects (N, C, H, W), got {o.shape}")
    if weight is None:
        weight = ffl_weight(o, y)
    d = _spectrum_distance(o, y)
    return T.mean(T.mul(d, Tensor(weight, dtype=o.dtype)))


# -- SSIM ------------------------------------------------------------------------------
@lru_cache(maxsize=None)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


@lru_cache(maxsize=None)
def blur_matrix(n: int, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """(n, n) operator applying the 1-d Gaussian with symmetric (edge-mirroring) padding."""
    g = gaussian_window(size, sigma)
    r = size // 2
    padded = np.pad(np.eye(n), ((r, r), (0, 0)), mode="symmetric")
    mat = np.zeros((n, n))
    for k in range(size):
        mat += g[k] * padded[k:k + n]
    return mat


def _blur(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    bh = Tensor(blur_matrix(h), dtype=x.dtype)
    bwt = Tensor(blur_matrix(w).T, dtype=x.dtype)
    return T.matmul(bh, T.matmul(x, bwt))


def ssim_map(o, y) -> Tensor:
    """Per-pixel SSIM (11x11 Gaussian window, sigma 1.5, dynamic range 1), per channel."""
    o, y = _pair(o, y)
    if o.ndim < 2:
        raise T.ShapeError(f"ssim_map expects at least 2-d inputs, got {o.shape}")
    mu_o, mu_y = _blur(o), _blur(y)
    mu_oo, mu_yy, mu_oy = T.square(mu_o), T.square(mu_y), T.mul(mu_o, mu_y)
    var_o = T.sub(_blur(T.square(o)), mu_oo)
    var_y = T.sub(_blur(T.square(y)), mu_yy)
    cov = T.sub(_blur(T.mul(o, y)), mu_oy)
    num = T.mul(T.add(T.mul(mu_oy, 2.0), SSIM_C1), T.add(T.mul(cov, 2.0), SSIM_C2))
    den = T.mul(T.add(T.add(mu_oo, mu_yy), SSIM_C1), T.add(T.add(var_o, var_y), SSIM_C2))
    return T.div(num, den)


def ssim(o, y) -> Tensor:
    return T.mean(ssim_map(o, y))


# -- feature loss ------------------------------------------------------------------------
class FeatureExtractor:
    """Three frozen conv3x3/stride-2/ReLU blocks (3 -> 8 -> 16 -> 32) with fixed random weights.

    Stands in for a pretrained VGG; any object with the same ``__call__``
    contract (image batch -> list of feature maps) can be passed instead.
    """

    widths = (8, 16, 32)

    def __init__(self, seed: int = FEATURE_SEED):
        from .model import he_uniform

        rng = np.random.default_rng(seed)
        self.seed = seed
        self.weights = []
        cin = 3
        for cout in self.widths:
            self.weights.append((he_uniform(rng, (cout, cin, 3, 3)), np.zeros(cout)))
            cin = cout
        self._cast = {}

    def _params(self, dtype):
        key = np.dtype(dtype).str
        if key not in self._cast:
            self._cast[key] = [(Tensor(w, dtype=dtype), Tensor(b, dtype=dtype)) for w, b in self.weights]
        return self._cast[key]

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for w, b in self._params(x.dtype):
            x = T.relu(T.conv2d(x, w, b, stride=2, pad=1))
            feats.append(x)
        return feats


@lru_cache(maxsize=1)
def default_extractor() -> FeatureExtractor:
    return FeatureExtractor()


def gram(f: Tensor) -> Tensor:
    n, c, h, w = f.shape
    flat = T.reshape(f, (n, c, h * w))
    return T.div(T.matmul(flat, T.transpose(flat, (0, 2, 1))), float(c * h * w))


def feature_loss(o, y, fx=None) -> Tensor:
    o, y = _pair(o, y)
    fx = fx if fx is not None else default_extractor()
    fo, fy = fx(o), fx(y)
    perceptual = [l1_loss(a, b) for a, b in zip(fo, fy)]
    style = [l1_loss(gram(a), gram(b)) for a, b in zip(fo, fy)]
    total = perceptual[0]
    for term in perceptual[1:] + style:
        total = T.add(total, term)
    return total


# -- combination --------------------------------------------------------------------------
def loss_terms(o, y, weights: LossWeights = LossWeights(), fx=None, ffl_w=None) -> dict[str, Tensor]:
    """Unweighted components; terms whose weight is zero are skipped."""
    o, y = _pair(o, y)
    terms = {}
    if weights.lambda1:
        terms["l1"] = l1_loss(o, y)
    if weights.lambda2:
        terms["ffl"] = ffl_loss(o, y, ffl_w)
    if weights.alpha:
        terms["ssim"] = T.sub(1.0, ssim(o, y))
    if weights.beta:
        terms["feature"] = feature_loss(o, y, fx)
    return terms


def combined_loss(o, y, weights: LossWeights = LossWeights(), fx=None, ffl_w=None) -> Tensor:
    """``lambda1*L1 + lambda2*FFL + alpha*(1 - SSIM) + beta*feature``."""
    terms = loss_terms(o, y, weights, fx, ffl_w)
    coef = {"l1": weights.lambda1, "ffl": weights.lambda2, "ssim": weights.alpha, "feature": weights.beta}
    total = None
    for name, term in terms.items():
        scaled = T.mul(term, coef[name])
        total = scaled if total is None else T.add(total, scaled)
    if total is None:
        return T.mul(T.mean(T.as_tensor(o)), 0.0)
    return total
