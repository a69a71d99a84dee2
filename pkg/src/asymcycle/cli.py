"""Command-line entry point: ``asymcycle {train,translate,evaluate,sweep,inspect}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
The ``ASYMCYCLE_RUN_ROOT`` environment variable overrides ``run.out_dir``.
"""

import argparse
import csv
import logging
import os
import sys

import torch
from PIL import Image

from . import config as cfg
from .backends import BackendError, load_backend
from .data import PreprocessConfig, denormalize, load_domain_folder, load_eval_images
from .generators import count_parameters
from .metrics import MetricError, evaluate_folder
from .trainer import NET_NAMES, CheckpointError, build_networks, load_checkpoint, read_csv, read_checkpoint, train

REFERENCE_TOTAL_PARAMETERS = 32.05e6

log = logging.getLogger("asymcycle")


class UsageError(Exception):
    pass


def _run_root(config):
    return os.environ.get("ASYMCYCLE_RUN_ROOT", config["run.out_dir"])


def _load_config(path, overrides):
    if path is not None and not os.path.isfile(path):
        raise cfg.ConfigError(f"config file not found: {path}")
    return cfg.resolve(path, overrides)


def cmd_train(args, overrides):
    config = _load_config(args.config, overrides)
    run_dir = args.run_dir or os.path.join(_run_root(config), config["run.name"])
    run_dir = train(config, run_dir=run_dir, resume=args.resume, allow_mismatch=args.allow_mismatch)
    print(f"run directory: {run_dir}")
    return 0


def cmd_translate(args, overrides):
    state = load_checkpoint(args.checkpoint, allow_mismatch=args.allow_mismatch)
    config = state.config
    if args.config is not None:
        requested = _load_config(args.config, overrides)
        if cfg.digest(requested) != cfg.digest(config) and not args.allow_mismatch:
            raise CheckpointError("checkpoint was trained with a different config (digest mismatch)")
    net = state.nets["G" if args.direction == "x2y" else "F"].eval()
    ds = load_domain_folder(args.input_dir, "X" if args.direction == "x2y" else "Y", "test")
    pre = PreprocessConfig.from_config(config)
    os.makedirs(args.output_dir, exist_ok=True)
    dtype = next(net.parameters()).dtype
    images = load_eval_images(ds.image_paths, pre, config["data.workers"])
    with torch.no_grad():
        for path, image in zip(ds.image_paths, images):
            out = net(image.unsqueeze(0).to(dtype))[0]
            stem = os.path.splitext(os.path.basename(path))[0]
            Image.fromarray(denormalize(out)).save(os.path.join(args.output_dir, stem + ".png"))
    cfg.RunManifest.create("translate", config).write(os.path.join(args.output_dir, "manifest.json"))
    print(f"translated {len(images)} image(s) -> {args.output_dir}")
    return 0


def cmd_evaluate(args, overrides):
    config = _load_config(args.config, overrides)
    kind = args.backend or config["backends.inception.kind"]
    weights = args.weights or config["backends.inception.path"] or None
    backend = load_backend(kind, weights)
    for folder in (args.generated_dir, args.reference_dir):
        if not os.path.isdir(folder):
            raise MetricError(f"folder does not exist: {folder}")
    report = evaluate_folder(args.generated_dir, args.reference_dir, backend, args.pairing, args.sources)
    out = args.out or os.path.join(args.generated_dir, "metrics.json")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    from .plotting import plot_metric_report

    plot_metric_report(report, os.path.splitext(out)[0] + ".png")
    cfg.RunManifest.create("evaluate", config).write(os.path.splitext(out)[0] + "_manifest.json")
    print(report.table())
    return 0


def cmd_sweep(args, overrides):
    from .plotting import plot_sweep_summary

    config = _load_config(args.config, overrides)
    if args.key not in cfg.DEFAULTS:
        raise cfg.ConfigError("cannot sweep an unknown key", args.key)
    values = [cfg.coerce(args.key, v) for v in args.values]
    root = args.out or os.path.join(_run_root(config), f"sweep_{args.key}")
    os.makedirs(root, exist_ok=True)
    summary = []
    for value in values:
        run_config = dict(config)
        run_config[args.key] = value
        run_config["run.name"] = f"{args.key}={value}"
        run_dir = train(run_config, run_dir=os.path.join(root, run_config["run.name"]))
        last = read_csv(os.path.join(run_dir, "losses.csv"))[-1]
        summary.append(dict(last, value=value, run_dir=run_dir))
    columns = ["value", "epoch", "g_adv", "f_adv", "feature", "semantic", "dual", "identity", "total",
               "d_x", "d_y", "run_dir"]
    with open(os.path.join(root, "summary.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(summary)
    plot_sweep_summary(summary, args.key, os.path.join(root, "summary.png"))
    cfg.RunManifest.create("sweep", config).write(os.path.join(root, "manifest.json"))
    print(f"{'value':>10}  {'feature':>10}  {'semantic':>10}  {'dual':>10}  {'total':>10}")
    for row in summary:
        print(f"{row['value']!s:>10}  {row['feature']:10.4f}  {row['semantic']:10.4f}  "
              f"{row['dual']:10.4f}  {row['total']:10.4f}")
    return 0


def parameter_table(nets):
    counts = {name: count_parameters(nets[name]) for name in NET_NAMES}
    lines = [f"{name:<4} {counts[name]:>12,d}  {nets[name].topology_id}" for name in NET_NAMES]
    total = sum(counts.values())
    rel = (total - REFERENCE_TOTAL_PARAMETERS) / REFERENCE_TOTAL_PARAMETERS
    lines.append(f"{'all':<4} {total:>12,d}  ({total / 1e6:.2f} M vs reference 32.05 M, {rel:+.1%})")
    return counts, total, "\n".join(lines)


def cmd_inspect(args, overrides):
    if args.checkpoint is None:
        config = _load_config(args.config, overrides)
        nets = build_networks(config)
        header = "networks built from config (no checkpoint)"
    else:
        manifest, _ = read_checkpoint(args.checkpoint)
        state = load_checkpoint(args.checkpoint, allow_mismatch=True)
        config, nets = state.config, state.nets
        header = "checkpoint manifest:\n" + "\n".join(f"  {k}: {v}" for k, v in manifest.items())
    _, _, table = parameter_table(nets)
    print(header)
    print(table)
    out = args.out or os.path.join(_run_root(config), "inspect")
    os.makedirs(out, exist_ok=True)
    cfg.RunManifest.create("inspect", config).write(os.path.join(out, "manifest.json"))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="asymcycle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train G, F, D_X, D_Y; dotted overrides like --loss.mu=0.1 follow")
    p.add_argument("config")
    p.add_argument("--run-dir")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--allow-mismatch", action="store_true", help="skip config/version checks on resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a folder with a trained generator")
    p.add_argument("checkpoint")
    p.add_argument("input_dir")
    p.add_argument("output_dir")
    p.add_argument("--direction", choices=("x2y", "y2x"), default="x2y")
    p.add_argument("--config", help="fail unless the checkpoint was trained with this config")
    p.add_argument("--allow-mismatch", action="store_true")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="FID/KID/PSNR/SSIM between folders")
    p.add_argument("generated_dir")
    p.add_argument("reference_dir")
    p.add_argument("--sources", help="source images for unpaired PSNR/SSIM")
    p.add_argument("--pairing", choices=("paired", "unpaired"), default="paired")
    p.add_argument("--backend", help="pooled-feature backend kind (default backends.inception.kind)")
    p.add_argument("--weights", help="weight directory for a non-stub backend")
    p.add_argument("--config")
    p.add_argument("--out", help="report path (default <generated_dir>/metrics.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="one training run per value of a config key")
    p.add_argument("config")
    p.add_argument("key")
    p.add_argument("values", nargs="+")
    p.add_argument("--out", help="sweep directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="parameter counts and manifest of a checkpoint (or of a config)")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--config", help="build networks from this config when no checkpoint is given")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)
    return parser


def _split_overrides(extra):
    overrides, leftovers = [], []
    for item in extra:
        if item.startswith("--") and "=" in item and "." in item.split("=", 1)[0] or item.startswith("--seed="):
            overrides.append(item)
        else:
            leftovers.append(item)
    return overrides, leftovers


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides, leftovers = _split_overrides(extra)
    if leftovers:
        parser.print_usage(sys.stderr)
        print(f"asymcycle: error: unrecognized arguments: {' '.join(leftovers)}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        for item in overrides:
            cfg.parse_override(item)
        return args.func(args, overrides)
    except (cfg.ConfigError, UsageError) as exc:
        print(f"asymcycle: config error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, BackendError, MetricError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"asymcycle: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
