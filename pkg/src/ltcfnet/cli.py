"""Command line: ``ltcfnet {train,enhance,eval,inspect}``.

Exit codes: 0 success, 2 configuration, 3 data ingestion, 4 non-finite
values during training, 5 file I/O or checkpoint, 6 resource limit.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (DegradationConfig, IMAGE_SUFFIXES, load_root, read_image, synthetic_dataset,
                   write_image)
from .errors import CheckpointError, ConfigError, IngestionError, NumericError, ResourceError
from .inference import OVERLAP, TILE, enhance_tiled
from .losses import LossWeights
from .metrics import psnr, ssim
from .model import ModelConfig, build
from .optim import ScheduleConfig
from .training import train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INGESTION = 3
EXIT_NUMERIC = 4
EXIT_IO = 5
EXIT_RESOURCE = 6

OUTPUT_ENV = "LTCFNET_OUTPUT_ROOT"

log = logging.getLogger("ltcfnet")


@dataclass
class RunConfig:
    """Everything a command needs; serialized as one JSON document."""

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(total_epochs=100))
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    data_root: str | None = None
    synthetic: int = 0
    synthetic_size: int = 64
    out: str | None = None
    seed: int = 0
    epochs: int = 100
    batch: int = 8
    patch: int = 64
    test_fraction: float = 0.1
    checkpoint_every: int = 0
    tile: int = TILE
    overlap: int = OVERLAP
    workers: int = 1

    _SECTIONS = {"model": ModelConfig, "loss": LossWeights, "schedule": ScheduleConfig,
                 "degradation": DegradationConfig}

    def to_dict(self):
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if hasattr(v, "to_dict") else (
                dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            section = cls._SECTIONS.get(k)
            if section is None:
                kw[k] = v
                continue
            if not isinstance(v, dict):
                raise ConfigError(f"config section {k!r} must be a mapping")
            fields = {f.name for f in dataclasses.fields(section)}
            bad = set(v) - fields
            if bad:
                raise ConfigError(f"unknown keys in {k!r}: {sorted(bad)}")
            try:
                kw[k] = section.from_dict(v) if hasattr(section, "from_dict") else section(**v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {k!r} section: {exc}") from None
        return cls(**kw)


def _load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


def _parse_alphas(text):
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise ConfigError(f"--alphas needs five comma-separated numbers, got {text!r}") from None
    if len(vals) != 5:
        raise ConfigError(f"--alphas needs five values, got {len(vals)}")
    return vals


def resolve_config(args) -> RunConfig:
    """Config file values first, then command line flags on top."""
    base = _load_config_file(args.config) if getattr(args, "config", None) else {}
    cfg = RunConfig.from_dict(base)
    m = cfg.model
    if args.seed is not None:
        cfg.seed = m.seed = args.seed
        cfg.degradation.seed = args.seed
    if args.branches:
        m.branches = args.branches
    if args.no_fbp:
        m.use_fbp = False
    if args.no_msef:
        m.use_msef = False
    if args.share_cd:
        m.share_cd_weights = True
    for name in ("epochs", "batch", "patch", "synthetic", "out", "workers"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "data", None):
        cfg.data_root = args.data
    if args.lr is not None:
        cfg.schedule.lr_initial = args.lr
    if args.alphas:
        a = _parse_alphas(args.alphas)
        cfg.loss.alpha1, cfg.loss.alpha2, cfg.loss.alpha3, cfg.loss.alpha4, cfg.loss.alpha5 = a
    cfg.schedule.total_epochs = cfg.epochs
    try:
        m.__post_init__()
        cfg.loss.__post_init__()
        cfg.schedule.__post_init__()
        cfg.degradation.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.epochs < 0 or cfg.batch < 1 or cfg.patch < 8 or cfg.workers < 1:
        raise ConfigError("epochs >= 0, batch >= 1, patch >= 8 and workers >= 1 are required")
    if cfg.out is None:
        cfg.out = os.environ.get(OUTPUT_ENV, "runs")
    return cfg


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path, command: str):
    doc = cfg.to_dict()
    doc["command"] = command
    doc["version"] = __version__
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


MODEL_CARD = """# ltcfnet model card

- version: {version}
- branches: {branches}; FBP: {fbp}; MSEF: {msef}; shared chroma denoiser: {share}
- parameters: {params}; FLOPs at 256x256: {flops:.3f} G
- each branch reconstructs its own RGB estimate; with both branches the two
  estimates are concatenated and fused by a 3x3 convolution in RGB
- luminance attention runs on a {pool}x average-pooled token grid
- output is clamped to [0, 1]
"""


def _write_model_card(net, out: Path):
    m = net.config
    text = MODEL_CARD.format(version=__version__, branches=m.branches, fbp=m.use_fbp, msef=m.use_msef,
                             share=m.share_cd_weights, params=net.num_params(),
                             flops=net.flops(256, 256) / 1e9, pool=m.lum_pool)
    (out / "model_card.md").write_text(text)


def evaluate_pairs(preds, targets, names):
    """Per-image PSNR/SSIM rows sorted by name, plus the mean row."""
    rows = sorted((n, psnr(p, t), ssim(p, t)) for n, p, t in zip(names, preds, targets))
    if not rows:
        raise IngestionError("nothing to evaluate")
    mean = ("mean", float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])))
    return rows, mean


def write_report(path, rows, mean):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "psnr", "ssim"])
        for name, p, s in rows + [mean]:
            w.writerow([name, f"{p:.6f}", f"{s:.8f}"])


def _print_report(rows, mean):
    print(f"{'image':<32} {'psnr':>10} {'ssim':>10}")
    for name, p, s in rows + [mean]:
        print(f"{name:<32} {p:>10.4f} {s:>10.6f}")


def _enhance_all(net, images, cfg: RunConfig):
    def one(img):
        return enhance_tiled(net, img, cfg.tile, cfg.overlap)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(one, images))
    return [one(img) for img in images]


# -- commands ----------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if cfg.synthetic:
        dataset = synthetic_dataset(cfg.synthetic, cfg.synthetic_size, cfg.degradation)
        train_set, test_set = dataset, dataset
    elif cfg.data_root:
        dataset = load_root(cfg.data_root)
        train_set = dataset.subset("train", cfg.test_fraction)
        try:
            test_set = dataset.subset("test", cfg.test_fraction)
        except IngestionError:
            test_set = train_set
            log.warning("test split is empty; reporting metrics on the training split")
    else:
        raise ConfigError("train needs --data ROOT or --synthetic N")
    out = _outdir(cfg)
    _echo_config(cfg, out, "train")
    net = build(cfg.model)
    _write_model_card(net, out)
    ckpt_dir = out / "checkpoints" if cfg.checkpoint_every else None
    if ckpt_dir:
        ckpt_dir.mkdir(exist_ok=True)

    def report(epoch, record, _net):
        log.info("epoch %d lr %.3g loss %.5f", epoch, record["lr"], record["total"])

    _, history = train(net, train_set, cfg.loss, cfg.schedule, cfg.epochs, cfg.batch, cfg.seed,
                       callbacks=[report], patch=cfg.patch, log_path=out / "history.jsonl",
                       checkpoint_dir=ckpt_dir, checkpoint_every=cfg.checkpoint_every,
                       prefetch=cfg.workers > 1)
    save_checkpoint(net, out / "final.ckpt")
    preds = _enhance_all(net, test_set.low, cfg)
    rows, mean = evaluate_pairs(preds, test_set.normal, test_set.names)
    write_report(out / "metrics.csv", rows, mean)
    _print_report(rows, mean)
    print(f"checkpoint: {out / 'final.ckpt'}")
    return EXIT_OK


def _inputs(path: Path):
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise IngestionError(f"no images in {path}")
        return files
    if not path.exists():
        raise IngestionError(f"input not found: {path}")
    return [path]


def cmd_enhance(args) -> int:
    cfg = resolve_config(args)
    net = load_checkpoint(args.checkpoint)
    out = _outdir(cfg)
    files = _inputs(Path(args.input))
    gt_dir = Path(args.gt) if args.gt else None
    failures = []

    def one(path):
        try:
            img = read_image(path)
            res = enhance_tiled(net, img, cfg.tile, cfg.overlap)
            write_image(out / (path.stem + ".png"), res)
            if args.preview:
                panels = [img, res]
                if gt_dir is not None and (gt_dir / path.name).exists():
                    panels.append(read_image(gt_dir / path.name))
                write_image(out / (path.stem + "_preview.png"), np.concatenate(panels, axis=1))
            return path.name, None
        except (IngestionError, ResourceError, OSError) as exc:
            return path.name, exc

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(one, files))
    else:
        results = [one(p) for p in files]
    for name, exc in sorted(results, key=lambda r: r[0]):
        if exc is not None:
            log.error("%s: %s", name, exc)
            failures.append(exc)
    print(f"enhanced {len(files) - len(failures)} of {len(files)} image(s) into {out}")
    if failures:
        return _exit_code(failures[0])
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if args.checkpoint:
        if not cfg.data_root:
            raise ConfigError("eval with --checkpoint needs --data ROOT")
        net = load_checkpoint(args.checkpoint)
        dataset = load_root(cfg.data_root)
        preds, targets, names = _enhance_all(net, dataset.low, cfg), dataset.normal, dataset.names
    elif args.pred and args.gt:
        from .data import load_pairs
        ds = load_pairs(args.pred, args.gt)
        preds, targets, names = ds.low, ds.normal, ds.names
    else:
        raise ConfigError("eval needs --checkpoint with --data, or --pred with --gt")
    rows, mean = evaluate_pairs(preds, targets, names)
    out = _outdir(cfg)
    write_report(out / "eval.csv", rows, mean)
    _print_report(rows, mean)
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
    else:
        net = build(resolve_config(args).model)
    rows = net.module_table(args.size, args.size)
    print(f"{'module':<16} {'params':>10} {'flops':>16}")
    for name, p, f in rows:
        print(f"{name:<16} {p:>10d} {f:>16d}")
    print(f"{'total':<16} {net.num_params():>10d} {net.flops(args.size, args.size):>16d}")
    print(f"params {net.num_params() / 1e6:.4f} M, FLOPs {net.flops(args.size, args.size) / 1e9:.3f} G "
          f"at {args.size}x{args.size}")
    return EXIT_OK


# -- entry point -------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--branches", choices=["lab", "yuv", "both"])
    p.add_argument("--no-fbp", action="store_true", help="drop the Fourier block")
    p.add_argument("--no-msef", action="store_true", help="drop the squeeze-excite fusion")
    p.add_argument("--share-cd", action="store_true", help="one chroma denoiser for both planes")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--synthetic", type=int, metavar="N", help="train on N synthetic pairs")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--alphas", metavar="a1,a2,a3,a4,a5", help="loss term weights")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
    p.add_argument("--workers", type=int, help="parallel workers for image I/O and inference")
    p.add_argument("--data", help="dataset root holding low/ and high/")


def build_parser():
    parser = argparse.ArgumentParser(prog="ltcfnet", description="Low-light image enhancement.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance an image or a directory of images")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--preview", action="store_true", help="also write low | enhanced | gt grids")
    p.add_argument("--gt", help="ground-truth directory for previews")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR / SSIM report")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--pred", help="directory of already enhanced images")
    p.add_argument("--gt", help="directory of ground-truth images")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="parameter and FLOP breakdown")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_inspect)
    return parser


def _exit_code(exc) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, IngestionError):
        return EXIT_INGESTION
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ResourceError):
        return EXIT_RESOURCE
    if isinstance(exc, (CheckpointError, OSError)):
        return EXIT_IO
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IngestionError, NumericError, ResourceError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
