"""Command-line entry point: ``twostream {synth,gvf,train,predict,eval}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or inconsistent inputs, bad files), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import CheckpointError, checkpoint_extra, load_checkpoint
from .data.io import DataError, read_image, write_image, write_mask
from .data.manifest import DatasetManifest
from .data.synth import synth_dataset
from .gvf import GvfFormatError, GvfParams, compute_gvf, magnitude, write_gvf
from .trainer import TrainConfig, _SampleCache, evaluate, predict_sample, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",")]


def _check_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to write into it)")


# -- synth -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    _check_out_dir(out, args.force)
    multiple = 2 ** (args.depth - 1)
    if args.size % multiple:
        print(f"warning: size {args.size} is not divisible by {multiple} = 2^(depth-1) for depth {args.depth}; "
              f"whole-image windows will not fit the network", file=sys.stderr)
    kw = {"counts": args.counts} if args.counts else {"fractions": args.fractions}
    manifest = synth_dataset(out, args.n, args.size, args.classes, args.seed, args.noise, **kw)
    print(out / "manifest.tsv")
    print(f"train/val/test = {manifest.sizes()}", file=sys.stderr)
    return EXIT_OK


# -- gvf ---------------------------------------------------------------------------

def _write_viz(path: Path, field) -> None:
    mag = magnitude(field)
    peak = mag.max()
    write_image(path, mag / peak if peak > 0 else mag)


def cmd_gvf(args) -> int:
    params = GvfParams(mu=args.mu, iterations=args.iters, smoothing_sigma=args.sigma)
    if args.data:
        manifest = DatasetManifest.read(args.data)
        (manifest.root / "gvf").mkdir(exist_ok=True)
        for id_ in manifest.assignments:
            sample = manifest.load(id_)
            plane = sample.image[:, :, 0] if sample.channels == 1 else sample.image
            write_gvf(manifest.gvf_path(id_), compute_gvf(plane, params))
        print(manifest.root / "gvf")
        return EXIT_OK
    if not args.image or not args.out:
        raise UsageError("gvf needs --image and --out (or --data)")
    image = read_image(args.image)
    field = compute_gvf(image[:, :, 0] if image.shape[2] == 1 else image, params)
    write_gvf(args.out, field)
    if args.viz:
        _write_viz(Path(args.viz), field)
    print(args.out)
    return EXIT_OK


# -- train -------------------------------------------------------------------------

TRAIN_FLAGS = {
    "lr": "train.learning_rate",
    "batch_size": "train.batch_size",
    "epochs": "train.max_epochs",
    "alpha": "train.alpha",
    "alpha_mode": "train.alpha_mode",
    "patience": "train.patience",
    "loss": "train.loss_kind",
    "patch": "train.patch",
    "stride": "train.stride",
    "dtype": "train.dtype",
    "seed": "seed",
    "base_channels": "model.base_channels",
    "depth": "model.depth",
    "mu": "gvf.mu",
    "iters": "gvf.iterations",
    "data": "data",
    "out": "out",
}


def cmd_train(args) -> int:
    overrides = {key: getattr(args, flag) for flag, key in TRAIN_FLAGS.items()}
    if args.single_stream:
        overrides["model.two_stream"] = False
    if args.no_augment:
        overrides["train.augment"] = False
    if args.class_weights:
        overrides["train.class_weights"] = args.class_weights
    cfg = cfgmod.resolve(args.preset, args.config, overrides)
    if not cfg["data"] or not cfg["out"]:
        raise UsageError("train needs a dataset (--data) and an output directory (--out)")
    manifest = DatasetManifest.read(cfg["data"])
    cfg["model"]["num_classes"] = manifest.num_classes
    cfg["model"]["in_channels"] = manifest.channels
    tc = cfgmod.train_config(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.yaml").write_text(cfgmod.dump(cfg))

    def progress(rec):
        print(f"epoch {rec.epoch:4d}  L_total {rec.total:.5f}  alpha {rec.alpha:.3f}  "
              f"val_loss {rec.val_loss:.5f}  val_IoU {rec.val_iou:.4f}  {rec.elapsed:.1f}s",
              file=sys.stderr, flush=True)

    result = train(tc, manifest, out, on_epoch=None if args.quiet else progress)
    if result.report is not None:
        (out / "val_report.txt").write_text(result.report.to_text())
        (out / "val_report.json").write_text(result.report.to_json())
    print(out / "best.tsun")
    return EXIT_OK


# -- predict / eval ------------------------------------------------------------------

def _stored_config(checkpoint: Path) -> TrainConfig | None:
    extra = checkpoint_extra(checkpoint)
    return TrainConfig.from_dict(extra["train"]) if "train" in extra else None


def _inference_setup(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint {ckpt} does not exist")
    model = load_checkpoint(ckpt)
    stored = _stored_config(ckpt)
    patch = args.patch or (stored.patch if stored else 96)
    if args.stride:
        stride = args.stride
    elif stored and stored.eval_stride and not args.patch:
        stride = stored.eval_stride
    else:
        stride = patch
    tc = stored or TrainConfig(model=model.config, loss_kind="dice_bce" if model.num_classes == 1 else "dice_ce",
                               patch=patch, stride=patch)
    return model, DatasetManifest.read(args.data), patch, stride, tc


def cmd_predict(args) -> int:
    model, manifest, patch, stride, tc = _inference_setup(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = manifest.ids(args.split)
    cache = _SampleCache(manifest, tc, ids)
    for id_ in ids:
        image, _, gvf = cache.get(id_, "none")
        mask = predict_sample(model, image, patch, stride, args.aggregate, gvf, tc)
        write_mask(out / f"{id_}.png", mask, model.config.label_classes)
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, manifest, patch, stride, tc = _inference_setup(args)
    report = evaluate(model, manifest, args.split, patch, stride, args.aggregate, config=tc)
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "report.json").write_text(report.to_json())
    sys.stdout.write(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twostream", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic shapes dataset and manifest")
    s.add_argument("--n", type=int, default=8, help="number of samples")
    s.add_argument("--size", type=int, default=64, help="image side in pixels")
    s.add_argument("--classes", type=int, default=2, help="number of classes including background")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.1, help="Gaussian noise std (0 = clean rendering)")
    s.add_argument("--fractions", type=_floats, default=[0.6, 0.2, 0.2], help="train,val,test fractions")
    s.add_argument("--counts", type=_ints, help="train,val,test counts (overrides --fractions)")
    s.add_argument("--depth", type=int, default=3, help="depth of the intended network (divisibility check)")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gvf", help="compute a GVF2 field file for an image (or a dataset cache)")
    g.add_argument("--image")
    g.add_argument("--out")
    g.add_argument("--mu", type=float, default=0.2)
    g.add_argument("--iters", type=int, default=80)
    g.add_argument("--sigma", type=float, default=1.0, help="edge-map Gaussian smoothing")
    g.add_argument("--viz", help="also write the field magnitude as an 8-bit PNG")
    g.add_argument("--data", help="dataset root: write <root>/gvf/<id>.gvf for every sample")
    g.set_defaults(func=cmd_gvf)

    t = sub.add_parser("train", help="train a model (preset + YAML config + flag overrides)")
    t.add_argument("--config", help="YAML run configuration")
    t.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    t.add_argument("--data", help="dataset root or manifest path")
    t.add_argument("--out", help="run directory")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--alpha-mode", choices=("fixed", "estimated"))
    t.add_argument("--patience", type=int)
    t.add_argument("--loss", choices=("dice_bce", "dice_ce"))
    t.add_argument("--class-weights", type=_floats)
    t.add_argument("--patch", type=int)
    t.add_argument("--stride", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--seed", type=int)
    t.add_argument("--base-channels", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--mu", type=float)
    t.add_argument("--iters", type=int)
    t.add_argument("--single-stream", action="store_true", help="spatial stream only (baseline)")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("predict", cmd_predict, "write predicted mask PNGs"),
                                 ("eval", cmd_eval, "compute the IoU/DSC report")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", default="test", choices=("train", "val", "test"))
        e.add_argument("--patch", type=int, help="window size (default: training patch)")
        e.add_argument("--stride", type=int, help="window stride (default: the run's eval stride, else patch)")
        e.add_argument("--aggregate", default="none", choices=("none", "vote", "mean"))
        e.add_argument("--out", required=name == "predict", help="output directory")
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, GvfFormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
