"""Two-stream pretraining, TE-only finetuning, AdamW and checkpoints."""
from __future__ import annotations

import ast
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Batch, DataError, Dataset, AugmentConfig
from .losses import LossWeights, combined_loss, default_extractor, loss_terms
from .masks import mask_complement_apply
from .model import PromptedModel, Task
from .tensor import Tensor

MAGIC = b"TMIM"
FORMAT_VERSION = 1
CSV_HEADER = "step,L_BM,L_TE,L_total"


class NumericError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# -- configuration ------------------------------------------------------------------
@dataclass
class TrainConfig:
    stage: str = "pretrain"            # pretrain | finetune
    lr: float = 2e-4
    weight_decay: float = 0.02
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 5
    seed: int = 0
    image_size: int = 64
    dtype: str = "float64"
    bm_mode: str = "tmim"              # tmim | mim (all-region reconstruction ablation)
    lambda1: float = 15.0
    lambda2: float = 15.0
    alpha: float = 1.0
    beta: float = 1.0
    mask_dilation: int = 0
    augment: bool = True
    flip_prob: float = 0.5
    brightness: tuple = (0.8, 1.2)
    color: tuple = (0.9, 1.1)
    train_manifest: str = ""
    test_manifest: str = ""
    init: str = ""
    out: str = ""

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.brightness = tuple(float(b) for b in self.brightness)
        self.color = tuple(float(c) for c in self.color)
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if self.bm_mode not in ("tmim", "mim"):
            raise ValueError(f"bm_mode must be tmim or mim, got {self.bm_mode!r}")
        if not self.lr >= 0:
            raise ValueError("lr must be nonnegative")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.alpha, self.beta)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def augment_cfg(self) -> AugmentConfig | None:
        if not self.augment:
            return None
        return AugmentConfig(self.flip_prob, self.brightness, self.color)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        """Flat ``key = value`` text, one entry per line, in field order."""
        return "".join(f"{k} = {v!r}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @staticmethod
    def parse_text(text: str) -> dict:
        out = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            try:
                value = ast.literal_eval(raw)
            except (ValueError, SyntaxError):
                value = raw
            out[key] = value
        return out

    @classmethod
    def from_file(cls, path, **overrides) -> TrainConfig:
        values = cls.parse_text(Path(path).read_text()) if path else {}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)


# -- optimizer --------------------------------------------------------------------------
@dataclass
class OptimizerState:
    m: OrderedDict = field(default_factory=OrderedDict)
    v: OrderedDict = field(default_factory=OrderedDict)
    step: int = 0


def adamw_step(params, grads, state: OptimizerState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0, no_decay=()):
    """One in-place AdamW update over named arrays.

    ``params`` and ``grads`` map names to arrays; names whose grad is None are
    skipped. Decay is applied first as ``p <- p - lr*wd*p``, then the
    bias-corrected Adam step. Names in ``no_decay`` are not decayed.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise T.ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if weight_decay and name not in no_decay:
            p -= lr * weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, model: PromptedModel, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.02):
        self.model = model
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.state = OptimizerState()
        self.no_decay = {n for n, _ in model.parameters() if model.no_decay(n)}

    @classmethod
    def from_config(cls, model, cfg: TrainConfig) -> AdamW:
        return cls(model, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)

    def step(self):
        params = OrderedDict((n, t.data) for n, t in self.model.parameters())
        grads = {n: t.grad for n, t in self.model.parameters()}
        adamw_step(params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay, self.no_decay)

    def zero_grad(self):
        self.model.zero_grad()


# -- training steps --------------------------------------------------------------------
@dataclass
class StepReport:
    L_BM: float | None
    L_TE: float
    L_total: float


def _guard(values: dict, o, y, weights, fx, stream: str):
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if not bad:
        return
    with T.no_grad():
        terms = loss_terms(o, y, weights, fx)
    culprits = [f"{stream}.{k}" for k, t in terms.items() if not np.isfinite(t.data).all()]
    raise NumericError(f"non-finite loss in {', '.join(bad)} (terms: {', '.join(culprits) or 'combination'})")


def pretrain_losses(model: PromptedModel, batch: Batch, weights: LossWeights = LossWeights(), fx=None,
                    bm_mode: str = "tmim"):
    """Build both stream losses for a batch; returns (L_BM, L_TE, parts).

    ``parts`` holds the intermediate images (for inspection and tests). The
    clean targets of the batch are never touched.
    """
    fx = fx if fx is not None else default_extractor()
    dtype = model.dtype
    image = Tensor(batch.images, dtype=dtype)
    m_text = batch.text_masks.astype(dtype)
    i_bg = mask_complement_apply(image, m_text)
    i_m = mask_complement_apply(i_bg, batch.rand_masks)
    bm_out = model.forward(i_m, Task.BM)
    if bm_mode == "tmim":
        l_bm = combined_loss(mask_complement_apply(bm_out, m_text), i_bg, weights, fx)
    elif bm_mode == "mim":
        l_bm = combined_loss(bm_out, image, weights, fx)
    else:
        raise ValueError(f"unknown bm_mode {bm_mode!r}")
    pseudo = i_bg.data + bm_out.data * m_text
    te_out = model.forward(image, Task.TE)
    l_te = combined_loss(te_out, Tensor(pseudo, dtype=dtype), weights, fx)
    parts = {"I_bg": i_bg.data, "I_m": i_m.data, "B": bm_out.data, "I_pseudo": pseudo, "T": te_out.data,
             "_bm_out": bm_out, "_te_out": te_out}
    return l_bm, l_te, parts


def pretrain_step(model: PromptedModel, batch: Batch, weights: LossWeights, fx, opt: AdamW,
                  bm_mode: str = "tmim") -> StepReport:
    l_bm, l_te, parts = pretrain_losses(model, batch, weights, fx, bm_mode)
    vals = {"L_BM": l_bm.item(), "L_TE": l_te.item()}
    if not math.isfinite(vals["L_BM"]):
        _guard({"L_BM": vals["L_BM"]}, parts["_bm_out"].detach(), parts["I_bg"], weights, fx, "L_BM")
    if not math.isfinite(vals["L_TE"]):
        _guard({"L_TE": vals["L_TE"]}, parts["_te_out"].detach(), parts["I_pseudo"], weights, fx, "L_TE")
    total = T.add(l_bm, l_te)
    opt.zero_grad()
    total.backward()
    opt.step()
    return StepReport(vals["L_BM"], vals["L_TE"], total.item())


def finetune_step(model: PromptedModel, batch: Batch, weights: LossWeights, fx, opt: AdamW) -> StepReport:
    if batch.cleans is None:
        raise DataError("finetuning needs clean targets in the batch")
    fx = fx if fx is not None else default_extractor()
    dtype = model.dtype
    out = model.forward(Tensor(batch.images, dtype=dtype), Task.TE)
    target = Tensor(batch.cleans, dtype=dtype)
    loss = combined_loss(out, target, weights, fx)
    value = loss.item()
    if not math.isfinite(value):
        _guard({"L_TE": value}, out.detach(), target, weights, fx, "L_TE")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return StepReport(None, value, value)


# -- checkpoints -------------------------------------------------------------------------
@dataclass
class Checkpoint:
    version: int
    params: OrderedDict
    opt_step: int
    m: OrderedDict
    v: OrderedDict
    config: dict
    rng: dict

    def model(self) -> PromptedModel:
        widths = (self.params["enc1.weight"].shape[0], self.params["enc2.weight"].shape[0],
                  self.params["enc3.weight"].shape[0])
        model = PromptedModel.init(0, widths, dtype=np.dtype(self.config.get("dtype", "float64")))
        try:
            model.load_state_dict(self.params)
        except (KeyError, T.ShapeError) as exc:
            raise CheckpointError(f"checkpoint does not match the model: {exc}") from None
        return model


def _pack_records(records) -> bytes:
    out = [struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def _pack_blob(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def records(self) -> OrderedDict:
        (n,) = self.unpack("<I")
        out = OrderedDict()
        for _ in range(n):
            (ln,) = self.unpack("<H")
            name = self.take(ln).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            count = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        return out

    def blob(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode("utf-8"))


def save_checkpoint(path, model: PromptedModel, opt: AdamW | None, cfg: TrainConfig | dict, rng: dict):
    """Write ``TMIM`` magic, u32 version, parameter records, optimizer state, config and rng blobs.

    Each record is ``u16 name length, name, u8 ndim, u32 dims..., float64 LE data``.
    """
    state = opt.state if opt is not None else OptimizerState()
    cfg_dict = cfg.to_dict() if isinstance(cfg, TrainConfig) else dict(cfg)
    moments = OrderedDict()
    for name in state.m:
        moments[f"m:{name}"] = state.m[name]
        moments[f"v:{name}"] = state.v[name]
    raw = b"".join([
        MAGIC, struct.pack("<I", FORMAT_VERSION),
        _pack_records(model.state_dict()),
        struct.pack("<Q", state.step), _pack_records(moments),
        _pack_blob(cfg_dict), _pack_blob(rng),
    ])
    Path(path).write_bytes(raw)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    params = r.records()
    (step,) = r.unpack("<Q")
    moments = r.records()
    try:
        config, rng = r.blob(), r.blob()
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt metadata") from None
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    m, v = OrderedDict(), OrderedDict()
    for key, arr in moments.items():
        kind, _, name = key.partition(":")
        if name not in params or kind not in ("m", "v"):
            raise CheckpointError(f"{path}: optimizer record for unknown parameter {key!r}")
        (m if kind == "m" else v)[name] = arr
    return Checkpoint(version, params, step, m, v, config, rng)


# -- training loop -----------------------------------------------------------------------
class Trainer:
    """Drives one stage over a dataset with a resumable (epoch, batch) position."""

    def __init__(self, cfg: TrainConfig, model: PromptedModel, dataset: Dataset, fx=None, log_path=None):
        self.cfg = cfg
        self.model = model.astype(cfg.np_dtype) if model.dtype != cfg.np_dtype else model
        self.opt = AdamW.from_config(self.model, cfg)
        self.dataset = dataset
        self.fx = fx if fx is not None else default_extractor()
        self.epoch, self.batch = 0, 0
        self.history: list[StepReport] = []
        self.log_path = Path(log_path) if log_path else None
        if self.log_path is not None and not self.log_path.exists():
            self.log_path.write_text(CSV_HEADER + "\n")

    @property
    def steps_per_epoch(self) -> int:
        return self.dataset.num_batches(self.cfg.batch_size)

    @property
    def global_step(self) -> int:
        return self.opt.state.step

    def position(self) -> dict:
        return {"seed": self.cfg.seed, "epoch": self.epoch, "batch": self.batch}

    def _step(self, batch: Batch) -> StepReport:
        if self.cfg.stage == "pretrain":
            return pretrain_step(self.model, batch, self.cfg.weights, self.fx, self.opt, self.cfg.bm_mode)
        return finetune_step(self.model, batch, self.cfg.weights, self.fx, self.opt)

    def _log(self, rep: StepReport):
        self.history.append(rep)
        if self.log_path is not None:
            bm = "" if rep.L_BM is None else repr(rep.L_BM)
            with open(self.log_path, "a") as fh:
                fh.write(f"{self.global_step},{bm},{rep.L_TE!r},{rep.L_total!r}\n")

    def run(self, max_steps: int | None = None) -> list[StepReport]:
        """Train until ``cfg.epochs`` are done, or ``max_steps`` more steps have run."""
        done = 0
        finetune = self.cfg.stage == "finetune"
        while self.epoch < self.cfg.epochs:
            for batch in self.dataset.batches(self.cfg.batch_size, self.cfg.seed, self.epoch, finetune,
                                              self.cfg.augment_cfg, self.cfg.mask_dilation, start=self.batch):
                if max_steps is not None and done >= max_steps:
                    return self.history
                self._log(self._step(batch))
                self.batch += 1
                done += 1
            self.epoch, self.batch = self.epoch + 1, 0
        return self.history

    def save(self, path):
        save_checkpoint(path, self.model, self.opt, self.cfg, self.position())

    @classmethod
    def resume(cls, path, dataset: Dataset, fx=None, log_path=None, cfg: TrainConfig | None = None) -> Trainer:
        ck = load_checkpoint(path)
        cfg = cfg or TrainConfig.from_dict(ck.config)
        trainer = cls(cfg, ck.model(), dataset, fx, log_path)
        trainer.load_optimizer(ck)
        trainer.epoch, trainer.batch = int(ck.rng.get("epoch", 0)), int(ck.rng.get("batch", 0))
        return trainer

    def load_optimizer(self, ck: Checkpoint):
        dtype = self.cfg.np_dtype
        self.opt.state = OptimizerState(
            OrderedDict((k, a.astype(dtype)) for k, a in ck.m.items()),
            OrderedDict((k, a.astype(dtype)) for k, a in ck.v.items()),
            ck.opt_step)


def predict(model: PromptedModel, images: np.ndarray, task=Task.TE, batch_size: int = 16) -> np.ndarray:
    """Forward pass without graph recording, in chunks; returns float64 outputs."""
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = Tensor(images[i:i + batch_size], dtype=model.dtype)
            outs.append(model.forward(chunk, task).data.astype(np.float64))
    return np.concatenate(outs, axis=0)
