"""Shared U-Net style encoder-decoder with per-task prompt vectors.

Both streams run through the same weights; the only difference between
``forward(x, Task.BM)`` and ``forward(x, Task.TE)`` is which learned vector is
added to the bottleneck feature map.
"""
from __future__ import annotations

import enum
from collections import OrderedDict

import numpy as np

from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, add, concat, conv2d, leaky_relu, reshape, sigmoid, upsample_nearest

SLOPE = 0.2


class Task(enum.Enum):
    BM = "BM"
    TE = "TE"

    @classmethod
    def parse(cls, value) -> Task:
        if isinstance(value, Task):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown task {value!r}; expected BM or TE") from None


def he_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_specs(widths: tuple[int, int, int], in_ch: int = 3):
    w1, w2, w3 = widths
    return [
        ("enc1", in_ch, w1, 1),
        ("enc2", w1, w2, 2),
        ("enc3", w2, w3, 2),
        ("bottleneck", w3, w3, 2),
        ("dec3", w3 + w3, w2, 1),
        ("dec2", w2 + w2, w1, 1),
        ("dec1", w1 + w1, w1, 1),
        ("head", w1, in_ch, 1),
    ]


class PromptedModel:
    """Encoder (3 -> 16 -> 32 -> 64), 64-channel bottleneck, mirrored decoder with skips.

    Parameters are kept in a single ordered mapping; see :meth:`parameters`.
    """

    downsample = 8

    def __init__(self, params: OrderedDict, widths=(16, 32, 64)):
        self.params = params
        self.widths = tuple(widths)
        self.strides = {name: s for name, _, _, s in _conv_specs(self.widths)}

    @classmethod
    def init(cls, seed: int, widths=(16, 32, 64), dtype=DEFAULT_DTYPE) -> PromptedModel:
        rng = np.random.default_rng(seed)
        params = OrderedDict()
        specs = _conv_specs(tuple(widths))
        for name, cin, cout, _ in specs:
            if name.startswith("dec"):
                break
            params[f"{name}.weight"] = he_uniform(rng, (cout, cin, 3, 3))
            params[f"{name}.bias"] = np.zeros(cout)
        params["prompt.BM"] = np.zeros(widths[2])
        params["prompt.TE"] = np.zeros(widths[2])
        for name, cin, cout, _ in specs:
            if name.startswith(("dec", "head")):
                params[f"{name}.weight"] = he_uniform(rng, (cout, cin, 3, 3))
                params[f"{name}.bias"] = np.zeros(cout)
        return cls(OrderedDict((k, Tensor(v, requires_grad=True, dtype=dtype)) for k, v in params.items()),
                   widths)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Named parameters: encoder, bottleneck, prompts, decoder, head."""
        return list(self.params.items())

    def state_dict(self) -> OrderedDict:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        unknown = set(state) - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameter names: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.dtype)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> PromptedModel:
        return PromptedModel(OrderedDict((k, Tensor(v.data, requires_grad=True, dtype=dtype))
                                         for k, v in self.params.items()), self.widths)

    @staticmethod
    def no_decay(name: str) -> bool:
        return name.startswith("prompt.")

    def _conv(self, name, x, act=True):
        out = conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                     stride=self.strides[name], pad=1)
        return leaky_relu(out, SLOPE) if act else out

    def encode(self, x: Tensor):
        e1 = self._conv("enc1", x)
        e2 = self._conv("enc2", e1)
        e3 = self._conv("enc3", e2)
        z = self._conv("bottleneck", e3)
        return z, (e1, e2, e3)

    def decode(self, z: Tensor, skips) -> Tensor:
        e1, e2, e3 = skips
        d = self._conv("dec3", concat([upsample_nearest(z, 2), e3], axis=1))
        d = self._conv("dec2", concat([upsample_nearest(d, 2), e2], axis=1))
        d = self._conv("dec1", concat([upsample_nearest(d, 2), e1], axis=1))
        return sigmoid(self._conv("head", d, act=False))

    def forward(self, x, task) -> Tensor:
        task = Task.parse(task)
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.dtype)
        if x.ndim != 4:
            raise ShapeError(f"model input must be (N, C, H, W), got {x.shape}")
        h, w = x.shape[-2:]
        if h % self.downsample or w % self.downsample:
            raise ShapeError(f"input size {h}x{w} is not divisible by {self.downsample}")
        z, skips = self.encode(x)
        prompt = reshape(self.params[f"prompt.{task.value}"], (1, -1, 1, 1))
        return self.decode(add(z, prompt), skips)

    __call__ = forward
