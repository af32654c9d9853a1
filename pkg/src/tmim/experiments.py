"""Desk-scale experiment drivers: pretrain -> finetune vs scratch, pretrained-only erasing, MIM ablation.

Everything is in memory and seeded; the same functions back the acceptance
tests and the demo scripts.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import AnnotatedImage, Dataset, SynthConfig, synth_corpus
from .metrics import EvalReport, aggregate, evaluate, region_restricted_eval
from .masks import rasterize
from .model import PromptedModel, Task
from .trainer import TrainConfig, Trainer, predict

TEST_STREAM = 1 << 20


@dataclass
class Corpus:
    train: Dataset
    test: list[AnnotatedImage]


def make_corpus(seed: int, n_train: int = 512, n_test: int = 64, size: int = 64) -> Corpus:
    cfg = SynthConfig(height=size, width=size)
    train = synth_corpus(n_train, seed, cfg, prefix="train")
    test = synth_corpus(n_test, TEST_STREAM + seed, cfg, prefix="test")
    return Corpus(Dataset(train), test)


def train_stage(stage: str, data: Dataset, seed: int, epochs: int, init: PromptedModel | None = None,
                bm_mode: str = "tmim", dtype: str = "float32", **overrides) -> PromptedModel:
    cfg = TrainConfig(stage=stage, seed=seed, epochs=epochs, bm_mode=bm_mode, dtype=dtype, **overrides)
    model = init if init is not None else PromptedModel.init(seed)
    trainer = Trainer(cfg, model, data)
    trainer.run()
    return trainer.model


def _stack(samples, attr):
    return np.stack([getattr(s, attr) for s in samples])


def eval_whole(model: PromptedModel, test: list[AnnotatedImage], task=Task.TE) -> EvalReport:
    out = predict(model, _stack(test, "image"), task)
    return aggregate(evaluate(o, s.clean) for o, s in zip(out, test))


def eval_region(outputs: np.ndarray, test: list[AnnotatedImage]) -> EvalReport:
    reports = []
    for o, s in zip(outputs, test):
        mask = rasterize(s.polygons, s.height, s.width)
        reports.append(region_restricted_eval(o, s.clean, mask))
    return aggregate(reports)


def eval_region_model(model: PromptedModel, test: list[AnnotatedImage], task=Task.TE) -> EvalReport:
    return eval_region(predict(model, _stack(test, "image"), task), test)


def identity_region(test: list[AnnotatedImage]) -> EvalReport:
    return eval_region(_stack(test, "image"), test)


@dataclass
class SeedResult:
    seed: int
    scratch_psnr: float = float("nan")
    finetuned_psnr: float = float("nan")
    pretrained_region: EvalReport | None = None
    identity_region: EvalReport | None = None
    mim_region: EvalReport | None = None
    seconds: dict = field(default_factory=dict)

    @property
    def gain(self) -> float:
        return self.finetuned_psnr - self.scratch_psnr


def run_seed(seed: int, pretrain_epochs: int = 5, finetune_epochs: int = 20, n_train: int = 512,
             n_test: int = 64, with_finetune: bool = True, with_mim: bool = True, log=print) -> SeedResult:
    """All three comparisons for one seed, sharing the TMIM-pretrained model."""
    corpus = make_corpus(seed, n_train, n_test)
    res = SeedResult(seed)

    def timed(name, fn):
        t0 = time.perf_counter()
        out = fn()
        res.seconds[name] = time.perf_counter() - t0
        if log:
            log(f"seed {seed}: {name} done in {res.seconds[name]:.0f}s")
        return out

    pre = timed("pretrain", lambda: train_stage("pretrain", corpus.train, seed, pretrain_epochs))
    res.pretrained_region = eval_region_model(pre, corpus.test)
    res.identity_region = identity_region(corpus.test)
    if with_mim:
        mim = timed("pretrain_mim", lambda: train_stage("pretrain", corpus.train, seed, pretrain_epochs,
                                                        bm_mode="mim"))
        res.mim_region = eval_region_model(mim, corpus.test)
    if with_finetune:
        fin = timed("finetune", lambda: train_stage("finetune", corpus.train, seed, finetune_epochs, init=pre))
        res.finetuned_psnr = eval_whole(fin, corpus.test).psnr
        scr = timed("scratch", lambda: train_stage("finetune", corpus.train, seed, finetune_epochs))
        res.scratch_psnr = eval_whole(scr, corpus.test).psnr
    return res
