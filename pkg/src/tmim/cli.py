"""Command-line entry point: ``synth``, ``pretrain``, ``finetune``, ``eval``, ``infer``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, SynthConfig, load_dataset, load_image, save_image, synth_corpus, \
    write_split
from .experiments import TEST_STREAM
from .masks import rasterize
from .metrics import aggregate, evaluate, region_restricted_eval, report_csv, report_table
from .model import PromptedModel, Task
from .trainer import CheckpointError, NumericError, TrainConfig, Trainer, load_checkpoint, predict

log = logging.getLogger("tmim")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT = "checkpoint.tmim"
LOSS_CSV = "loss.csv"
CONFIG_SNAPSHOT = "config.txt"
SYNTH_KEYS = {"seed": 0, "n_train": 512, "n_test": 64, "image_size": 64}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunSpec:
    command: str
    config: str | None = None
    seed: int | None = None
    out: str | None = None
    overrides: dict = field(default_factory=dict)

    def train_config(self, stage: str, **extra) -> TrainConfig:
        values = TrainConfig.parse_text(Path(self.config).read_text()) if self.config else {}
        values.update(self.overrides)
        values.update({k: v for k, v in extra.items() if v is not None})
        values["stage"] = stage
        if self.seed is not None:
            values["seed"] = self.seed
        if self.out is not None:
            values["out"] = self.out
        try:
            return TrainConfig.from_dict(values)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad configuration: {exc}") from None


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        out.update(TrainConfig.parse_text(f"{key} = {raw}"))
    return out


def _out_dir(path) -> Path:
    if not path:
        raise UsageError("--out is required")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write_snapshot(out: Path, text: str):
    (out / CONFIG_SNAPSHOT).write_text(text)


# -- commands ------------------------------------------------------------------------
def cmd_synth(spec: RunSpec) -> Path:
    values = dict(SYNTH_KEYS)
    if spec.config:
        values.update(TrainConfig.parse_text(Path(spec.config).read_text()))
    values.update(spec.overrides)
    if spec.seed is not None:
        values["seed"] = spec.seed
    unknown = set(values) - set(SYNTH_KEYS)
    if unknown:
        raise UsageError(f"unknown synth config keys: {sorted(unknown)}")
    out = _out_dir(spec.out)
    size = int(values["image_size"])
    cfg = SynthConfig.for_size(size)
    seed = int(values["seed"])
    train = synth_corpus(int(values["n_train"]), seed, cfg, prefix="train")
    test = synth_corpus(int(values["n_test"]), TEST_STREAM + seed, cfg, prefix="test")
    try:
        manifest = write_split(out / "train", train, "manifest.txt")
        write_split(out / "test", test, "manifest.txt")
    except OSError as exc:
        raise DataError(f"cannot write corpus under {out}: {exc}") from None
    _write_snapshot(out, "".join(f"{k} = {values[k]!r}\n" for k in SYNTH_KEYS))
    log.info("wrote %d train / %d test images to %s", len(train), len(test), out)
    return manifest


def _train(spec: RunSpec, stage: str, epochs, init, resume, max_steps) -> Path:
    cfg = spec.train_config(stage, epochs=epochs, init=init)
    if not cfg.train_manifest:
        raise UsageError("train_manifest must be set in the config")
    out = _out_dir(cfg.out)
    # pretraining must never see clean targets, so they are not even loaded
    data = load_dataset(cfg.train_manifest, cfg.image_size, with_clean=(stage == "finetune"))
    log_path = out / LOSS_CSV
    if resume:
        trainer = Trainer.resume(resume, data, log_path=log_path, cfg=cfg)
    else:
        if log_path.exists():
            log_path.unlink()
        if cfg.init:
            model = _load_model(cfg.init)
            log.info("initialising from %s", cfg.init)
        else:
            model = PromptedModel.init(cfg.seed)
            log.info("no init checkpoint given; using fresh initialisation (seed %d)", cfg.seed)
        trainer = Trainer(cfg, model, data, log_path=log_path)
    _write_snapshot(out, cfg.to_text())
    trainer.run(max_steps)
    ckpt = out / CHECKPOINT
    trainer.save(ckpt)
    log.info("%s: %d steps, checkpoint %s", stage, trainer.global_step, ckpt)
    return ckpt


def cmd_pretrain(spec: RunSpec, epochs=None, resume=None, max_steps=None) -> Path:
    return _train(spec, "pretrain", epochs, None, resume, max_steps)


def cmd_finetune(spec: RunSpec, init=None, epochs=None, resume=None, max_steps=None) -> Path:
    return _train(spec, "finetune", epochs, init, resume, max_steps)


def _load(path):
    try:
        ck = load_checkpoint(path)
        return ck, ck.model()
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except CheckpointError as exc:
        raise DataError(str(exc)) from None


def _load_model(path) -> PromptedModel:
    return _load(path)[1]


def cmd_eval(checkpoint, manifest, out, task="TE", region_only=False, batch_size: int = 16) -> dict:
    task = Task.parse(task)
    ck, model = _load(checkpoint)
    data = load_dataset(manifest, int(ck.config.get("image_size", 64)), with_clean=True)
    images = np.stack([s.image for s in data.samples])
    outputs = predict(model, images, task, batch_size)
    reports = {task.value: aggregate(evaluate(o, s.clean) for o, s in zip(outputs, data.samples))}
    if region_only:
        region = []
        for o, s in zip(outputs, data.samples):
            region.append(region_restricted_eval(o, s.clean, rasterize(s.polygons, s.height, s.width)))
        reports[f"{task.value} (text region)"] = aggregate(region)
    out = _out_dir(out)
    (out / "eval.csv").write_text(report_csv(reports))
    (out / "eval.txt").write_text(report_table(reports))
    _write_snapshot(out, "".join(f"{k} = {v!r}\n" for k, v in [
        ("checkpoint", str(checkpoint)), ("manifest", str(manifest)), ("task", task.value),
        ("region_only", bool(region_only)), ("batch_size", batch_size)]))
    sys.stdout.write(report_table(reports))
    return reports


def _pad_to(image: np.ndarray, multiple: int):
    h, w = image.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return image, (h, w)
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode=mode), (h, w)


def cmd_infer(checkpoint, image_path, out_path) -> Path:
    model = _load_model(checkpoint)
    image = load_image(image_path)
    padded, (h, w) = _pad_to(image, model.downsample)
    result = predict(model, padded[None], Task.TE)[0][:, :h, :w]
    out_path = Path(out_path)
    if out_path.parent != Path(""):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(out_path, result)
    return out_path


# -- argument handling ----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tmim", description="Scene text removal pretraining from detection labels.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="flat 'key = value' config file")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")

    sp = sub.add_parser("synth", help="generate the seeded synthetic corpus")
    common(sp)
    for name in ("pretrain", "finetune"):
        sp = sub.add_parser(name, help=f"{name} the shared model")
        common(sp)
        sp.add_argument("--epochs", type=int)
        if name == "finetune":
            sp.add_argument("--init", help="checkpoint to start from (fresh init if omitted)")
        sp.add_argument("--resume", help="continue an interrupted run from its checkpoint")
        sp.add_argument("--max-steps", type=int, help="stop after this many steps")
    sp = sub.add_parser("eval", help="score a checkpoint on a manifest with clean targets")
    sp.add_argument("checkpoint")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--task", default="TE", choices=["TE", "BM", "te", "bm"])
    sp.add_argument("--region-only", action="store_true", help="also report text-region-restricted metrics")
    sp.add_argument("--batch-size", type=int, default=16)
    sp = sub.add_parser("infer", help="erase text from one image")
    sp.add_argument("checkpoint")
    sp.add_argument("image")
    sp.add_argument("output")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command in ("synth", "pretrain", "finetune"):
        spec = RunSpec(args.command, args.config, args.seed, args.out, _overrides(args.set))
        if args.command == "synth":
            cmd_synth(spec)
        elif args.command == "pretrain":
            cmd_pretrain(spec, args.epochs, args.resume, args.max_steps)
        else:
            cmd_finetune(spec, args.init, args.epochs, args.resume, args.max_steps)
    elif args.command == "eval":
        cmd_eval(args.checkpoint, args.manifest, args.out, args.task, args.region_only, args.batch_size)
    else:
        cmd_infer(args.checkpoint, args.image, args.output)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except UsageError as exc:
        print(f"tmim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, CheckpointError) as exc:
        print(f"tmim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"tmim: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
