"""Command-line entry point: gen-data, train, predict, eval, plot-pr.

Exit status is 0 on success, 1 on runtime failure and 2 on usage or
configuration errors.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import config as cfg
from .data import DatasetError, SaliencyDataset, SyntheticSceneSpec, generate_synthetic
from .metrics import evaluate_dataset, read_pr_curve, write_report
from .network import foreground_probability, to_nchw
from .reflection import reflect
from .training import CheckpointError, Trainer, model_from_checkpoint, train, write_train_log

log = logging.getLogger("reflect_sod")

PRESET_NAMES = {"table3-a": "a", "table3-b": "b", "table3-c": "c", "table3-d": "d",
                "table3-e": "e", "full": "full"}


class UsageError(Exception):
    pass


def _size(text):
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}") from None
    if len(dims) == 1:
        dims *= 2
    if len(dims) != 2 or min(dims) < 8:
        raise argparse.ArgumentTypeError(f"size must be N or HxW with sides >= 8, got {text!r}")
    return tuple(dims)


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def cmd_gen_data(args):
    spec = SyntheticSceneSpec(size=args.size, min_objects=args.min_objects, max_objects=args.max_objects,
                              noise=args.noise, seed=args.seed)
    manifest = generate_synthetic(spec, args.n, args.out, split=args.split)
    print(f"wrote {args.n} pairs to {Path(args.out) / args.split} "
          f"(size {spec.size[0]}x{spec.size[1]}, seed {spec.seed}); splits: "
          + ", ".join(f"{k}={len(v)}" for k, v in manifest.splits.items()))


def _train_config(args):
    overrides = list(args.set or [])
    if args.preset:
        overrides.append(f"train.ablation_preset={PRESET_NAMES[args.preset]}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.steps is not None:
        overrides.append(f"train.max_steps={args.steps}")
    return cfg.load_config(args.config, overrides)


def cmd_train(args):
    config = _train_config(args)
    data_root = Path(args.data)
    if not data_root.is_dir():
        raise UsageError(f"data root {data_root} does not exist")
    out = Path(args.out)
    if args.resume:
        size = tuple(config["model"]["input_size"])
        trainer = Trainer.resume(args.resume, SaliencyDataset(data_root, config["data"]["split"], size))
        target = args.steps if args.steps is not None else trainer.config["train"]["max_steps"]
        remaining = target - trainer.step_count
        trainer.run(max(remaining, 0), out)
        out.mkdir(parents=True, exist_ok=True)
        trainer.save(out / "checkpoint.ckpt")
        write_train_log(trainer.log, out / "train_log.csv")
    else:
        trainer = train(config, data_root, out)
    last = trainer.log[-1] if trainer.log else None
    print(f"trained {trainer.step_count} steps; final loss {last.total if last else float('nan'):.6f}; "
          f"checkpoint {out / 'checkpoint.ckpt'}")


@torch.no_grad()
def predict_image(model, mean, k, image: np.ndarray, input_size) -> np.ndarray:
    """Foreground probability at the image's own resolution for an H x W x 3 float image."""
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(image).to(dtype).permute(2, 0, 1).unsqueeze(0)
    h, w = image.shape[:2]
    if (h, w) != tuple(input_size):
        x = F.interpolate(x, size=tuple(input_size), mode="bilinear", align_corners=False)
    pair = reflect(x[0].permute(1, 2, 0), mean, k)
    model.eval()
    prob = foreground_probability(model(to_nchw(pair.origin, model), to_nchw(pair.reflected, model)))
    if (h, w) != tuple(input_size):
        prob = F.interpolate(prob.unsqueeze(1), size=(h, w), mode="bilinear", align_corners=False)[:, 0]
    return prob[0].clamp(0, 1).double().numpy()


def cmd_predict(args):
    model, mean, config, _ = model_from_checkpoint(args.checkpoint)
    images = sorted(Path(args.images).glob("*.png"))
    if not images:
        raise UsageError(f"no PNG images in {args.images}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in images:
        with Image.open(path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        prob = predict_image(model, mean, config["reflection"]["k"], image, config["model"]["input_size"])
        Image.fromarray(np.round(prob * 255).astype(np.uint8), "L").save(out / f"{path.stem}.png")
    print(f"wrote {len(images)} saliency maps to {out}")


def cmd_eval(args):
    for d in (args.pred, args.gt):
        if not Path(d).is_dir():
            raise UsageError(f"directory {d} does not exist")
    report = evaluate_dataset(args.pred, args.gt, eta_sq=args.eta_sq, lambda_=args.lambda_,
                              f_policy=args.f_policy)
    report_path, pr_path = write_report(report, args.out)
    if report.missing:
        print(f"warning: {len(report.missing)} unmatched file(s) skipped: {', '.join(report.missing)}",
              file=sys.stderr)
    print(f"{len(report.per_image)} images  F({report.f_policy})={report.f_measure:.4f}  "
          f"maxF={report.f_max:.4f}  adaptiveF={report.f_adaptive:.4f}  MAE={report.mae:.4f}  "
          f"S={report.s_measure:.4f}")
    print(f"wrote {report_path} and {pr_path}")


def cmd_plot_pr(args):
    curve = read_pr_curve(args.curve)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dat, script = out / "pr_curve.dat", out / "pr_curve.gp"
    with open(dat, "w") as fh:
        fh.write("# recall precision threshold\n")
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            fh.write(f"{float(r)!r} {float(p)!r} {float(t)!r}\n")
    script.write_text(
        "set xlabel 'Recall'\nset ylabel 'Precision'\nset xrange [0:1]\nset yrange [0:1]\n"
        "set terminal pngcairo size 640,480\nset output 'pr_curve.png'\n"
        "plot 'pr_curve.dat' using 1:2 with lines title 'PR'\n")
    print(f"wrote {len(curve.thresholds)} points to {dat} and gnuplot script {script}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reflect-sod", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    raw = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("gen-data", help="generate a synthetic saliency dataset", formatter_class=raw,
                       epilog="Consumes no config keys; the scene generator is set by the flags above.")
    p.add_argument("--n", type=_positive_int, required=True, help="number of image/mask pairs")
    p.add_argument("--size", type=_size, default=(64, 64), help="canvas size, N or HxW (default 64)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--split", default="train", help="split name (default train)")
    p.add_argument("--min-objects", type=_positive_int, default=1)
    p.add_argument("--max-objects", type=_positive_int, default=3)
    p.add_argument("--noise", type=float, default=0.04, help="background texture noise amplitude")
    p.add_argument("--out", required=True, help="dataset root")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an SFCN", formatter_class=raw,
                       epilog="config keys (JSON file sections, or --set section.key=value):\n"
                              + cfg.describe_keys(cfg.DEFAULTS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--preset", choices=sorted(PRESET_NAMES), help="ablation preset (sets train.ablation_preset)")
    p.add_argument("--seed", type=int, help="sets train.seed")
    p.add_argument("--steps", type=int, help="sets train.max_steps")
    p.add_argument("--resume", help="continue from a checkpoint (its stored config is used) up to --steps "
                                         "or the stored train.max_steps")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write saliency maps for a directory of images", formatter_class=raw,
                       epilog="Uses the config echoed in the checkpoint:\n"
                              + cfg.describe_keys(["model", "reflection"]))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory of PNG images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate saliency maps against ground truth",
                       epilog="Consumes no config keys. Writes report.csv and pr_curve.csv.")
    p.add_argument("--pred", required=True, help="directory of 8-bit saliency PNGs")
    p.add_argument("--gt", required=True, help="directory of mask PNGs (>= 128 is foreground)")
    p.add_argument("--out", required=True)
    p.add_argument("--f-policy", choices=("max", "adaptive"), default="max")
    p.add_argument("--eta-sq", type=float, default=0.3)
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.5, help="S-measure balance")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-pr", help="export a PR curve as gnuplot data",
                       epilog="Consumes no config keys. Writes pr_curve.dat and pr_curve.gp.")
    p.add_argument("--curve", required=True, help="pr_curve.csv written by eval")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_pr)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("REFLECT_SOD_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"reflect-sod: error: REFLECT_SOD_THREADS must be an integer, got {threads!r}",
                  file=sys.stderr)
            return 2
    try:
        args.func(args)
    except (UsageError, cfg.ConfigError, DatasetError) as exc:
        print(f"reflect-sod {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, RuntimeError, ValueError, OSError) as exc:
        print(f"reflect-sod {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
