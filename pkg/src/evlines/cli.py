"""Command-line entry point: ``evlines <subcommand> ...``.

Every command takes ``--config FILE`` plus repeated ``--set key=value``
overrides and echoes the effective configuration into its output directory.
Outputs are assembled in a temporary sibling directory and moved into place
only when the command succeeds.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfglib
from .blur_synthesis import derive_seed, make_sample
from .data_io import load_manifest, load_sample, load_split, write_manifest, write_sample
from .errors import ConfigError, SchemaError, ValidationError
from .event_model import LineSegment
from .event_repr import encode, write_grid
from .line_detector import DetectorConfig

log = logging.getLogger("evlines")

CACHE_ENV = "EVLINES_CACHE_DIR"


class CommandError(Exception):
    pass


@contextlib.contextmanager
def staged_output(out: Path, force: bool = True):
    """Yield a temp directory that replaces ``out`` on success and is removed on failure."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        if not force:
            shutil.rmtree(tmp, ignore_errors=True)
            raise CommandError(f"{out} exists")
        shutil.rmtree(out)
    os.replace(tmp, out)


def echo_config(directory: Path, cfg: dict, args=None) -> None:
    """Write the effective config, plus the raw config file text and overrides it came from."""
    (Path(directory) / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    if args is not None:
        raw = {"command": args.command, "config_file": args.config,
               "config_text": Path(args.config).read_text() if args.config else None,
               "overrides": list(args.set or []), "preset": args.preset, "seed": args.seed}
        (Path(directory) / "invocation.json").write_text(json.dumps(raw, indent=1))


def _resolve(args) -> dict:
    return cfglib.resolve(args.config, args.set or [], getattr(args, "preset", None), args.seed)


def _detector_overrides(args) -> dict:
    """``model.detector`` entries given explicitly by the config file or ``--set``."""
    layers = [cfglib.load_file(args.config)] if args.config else []
    layers += [cfglib.parse_override(o) for o in args.set or []]
    out: dict = {}
    for layer in layers:
        out.update(layer.get("model", {}).get("detector", {}))
    return out


# --------------------------------------------------------------------------- synthesize


def _toy_inputs(n: int, seed: int, cfg: dict):
    from .scenes import random_scene

    for i in range(n):
        sid = f"toy_{i:05d}"
        rng = np.random.default_rng(derive_seed(seed, sid))
        yield sid, *random_scene(rng, cfg["synth"]["scene_size"], cfg["synth"]["max_shapes"])


def _image_inputs(images_dir: Path, annotations: Path):
    from .data_io import read_image

    table = json.loads(Path(annotations).read_text())
    for name in sorted(table):
        path = images_dir / name
        if not path.exists():
            raise ValidationError(f"annotation entry {name!r} has no image in {images_dir}")
        img = read_image(path)
        if img.max() > 1.0:
            img = img / (65535.0 if img.max() > 255 else 255.0)
        yield Path(name).stem, img, np.asarray(table[name], np.float64).reshape(-1, 4)


def cmd_synthesize(args) -> int:
    cfg = _resolve(args)
    seed = cfg["seed"]
    if args.toy:
        inputs = _toy_inputs(args.toy, seed, cfg)
    elif args.images and args.annotations:
        inputs = _image_inputs(Path(args.images), Path(args.annotations))
    else:
        raise CommandError("synthesize needs --toy N or both --images and --annotations")
    contrast = cfg["synth"]["contrast"]
    ids, counts, blurs = [], [], []
    with staged_output(Path(args.out)) as tmp:
        for sid, image, lines in inputs:
            traj = cfglib.trajectory_config(cfg, derive_seed(seed, sid))
            sample = make_sample(image, [LineSegment.from_array(a) for a in lines], traj, contrast)
            write_sample(tmp / sid, sample)
            ids.append(sid)
            counts.append(len(sample.events))
            blurs.append(sample.meta["blur_magnitude"])
        n_test = int(round(len(ids) * cfg["synth"]["test_fraction"]))
        splits = {"train": ids[:len(ids) - n_test], "test": ids[len(ids) - n_test:]}
        write_manifest(tmp, Path(args.out).name, splits)
        echo_config(tmp, cfg, args)
    counts_arr = np.asarray(counts) if counts else np.zeros(1)
    print(f"synthesized {len(ids)} samples into {args.out}")
    print(f"events per sample: mean {counts_arr.mean():.1f}, median {np.median(counts_arr):.1f}, "
          f"min {counts_arr.min()}, max {counts_arr.max()}")
    if blurs:
        print(f"blur magnitude (px): mean {np.mean(blurs):.2f}, max {np.max(blurs):.2f}")
    return 0


# --------------------------------------------------------------------------- encode


def cmd_encode(args) -> int:
    cfg = _resolve(args)
    manifest = load_manifest(args.dataset)
    kind, bins = cfg["model"]["grid_kind"], cfg["model"]["bins"]
    out = Path(args.out or os.environ.get(CACHE_ENV) or Path(args.dataset) / "cache") / f"{kind}_b{bins}"
    with staged_output(out) as tmp:
        for sid in manifest.ids(args.split):
            write_grid(tmp / f"{sid}.grid", encode(load_sample(manifest, sid).events, kind, bins))
        echo_config(tmp, cfg, args)
    print(f"encoded {len(manifest.ids(args.split))} windows as {kind} (B={bins}) into {out}")
    return 0


# --------------------------------------------------------------------------- train


def cmd_train(args) -> int:
    import torch

    from .training import build_model, fit, load_checkpoint, save_checkpoint

    cfg = _resolve(args)
    torch.manual_seed(cfg["seed"])
    mcfg = cfglib.model_config(cfg)
    tcfg = cfglib.train_config(cfg)
    manifest = load_manifest(args.dataset)
    train = load_split(manifest, args.split)
    if not train:
        raise ValidationError(f"split {args.split!r} of {args.dataset} is empty")
    val = load_split(manifest, args.val_split) if args.val_split else None
    if args.init_from:
        model, _ = load_checkpoint(args.init_from, mcfg)
        print(f"initialized from {args.init_from}")
    else:
        model = build_model(mcfg)
    with staged_output(Path(args.out)) as tmp:
        echo_config(tmp, cfg, args)
        log_path = tmp / "train_log.jsonl"
        with log_path.open("w") as fh:
            def on_epoch(rec):
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
                log.info("epoch %d lr %.2e loss %.4f", rec["epoch"], rec["lr"], rec["total"])

            res = fit(model, train, mcfg, tcfg, eval_every=args.eval_every, target_sap10=args.target_sap10,
                      val_samples=val, on_epoch=on_epoch)
        save_checkpoint(tmp / "checkpoint.npz", model, mcfg,
                        {"steps": res.steps, "init_from": str(args.init_from) if args.init_from else None})
        summary = {"steps": res.steps, "reached_step": res.reached_step, "seconds": res.seconds,
                   "final": res.history[-1] if res.history else None}
        (tmp / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"trained {res.steps} steps; checkpoint at {Path(args.out) / 'checkpoint.npz'}")
    if res.reached_step is not None:
        print(f"target sAP10 reached at step {res.reached_step}")
    return 0


# --------------------------------------------------------------------------- detect / eval


def cmd_detect(args) -> int:
    from .training import load_checkpoint, predict

    cfg = _resolve(args)
    model, mcfg = load_checkpoint(args.checkpoint)
    overrides = _detector_overrides(args)
    if overrides:
        try:
            mcfg.detector = DetectorConfig(**{**mcfg.detector.to_dict(), **overrides})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        model.cfg = mcfg.detector
    manifest = load_manifest(args.dataset)
    ids = manifest.ids(args.split)
    samples = [load_sample(manifest, sid) for sid in ids]
    preds = predict(model, samples, mcfg)
    with staged_output(Path(args.out)) as tmp:
        for sid, p in zip(ids, preds):
            (tmp / f"{sid}.json").write_text(json.dumps({"lines": p["lines"].tolist(),
                                                         "junctions": p["junctions"].tolist()}))
        echo_config(tmp, cfg, args)
    print(f"wrote predictions for {len(ids)} samples to {args.out}")
    return 0


def read_predictions(directory, ids) -> tuple[list, list]:
    directory = Path(directory)
    have = {p.stem for p in directory.glob("*.json") if p.name != "config.json"}
    missing = sorted(set(ids) - have)
    extra = sorted(have - set(ids))
    if missing or extra:
        raise ValidationError(f"prediction ids do not match the manifest: missing {missing}, unexpected {extra}")
    lines, junctions = [], []
    for sid in ids:
        d = json.loads((directory / f"{sid}.json").read_text())
        lines.append(np.asarray(d.get("lines", []), np.float64).reshape(-1, 5))
        junctions.append(np.asarray(d.get("junctions", []), np.float64).reshape(-1, 3))
    return lines, junctions


def cmd_eval(args) -> int:
    from .metrics import evaluate

    cfg = _resolve(args)
    manifest = load_manifest(args.dataset)
    ids = manifest.ids(args.split)
    pl, pj = read_predictions(args.predictions, ids)
    samples = [load_sample(manifest, sid) for sid in ids]
    report = evaluate(pl, [s.lines() for s in samples], pj, image_sizes=[s.size for s in samples],
                      sample_ids=ids)
    with staged_output(Path(args.out)) as tmp:
        report.to_json(tmp / "report.json")
        report.write_curves(tmp)
        echo_config(tmp, cfg, args)
    print(json.dumps({k: round(v, 2) for k, v in report.summary().items()}))
    return 0


# --------------------------------------------------------------------------- plots


def cmd_analyze_blur(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import blur_binned_msap

    cfg = _resolve(args)
    manifest = load_manifest(args.dataset)
    ids = manifest.ids(args.split)
    samples = [load_sample(manifest, sid) for sid in ids]
    blur = [s.meta["blur_magnitude"] for s in samples]
    with staged_output(Path(args.out)) as tmp:
        fig, axes = plt.subplots(1, 2 if args.predictions else 1, figsize=(9 if args.predictions else 5, 3.5),
                                 squeeze=False)
        axes[0, 0].hist(blur, bins=np.arange(0, max(max(blur, default=0), args.max_blur) + args.bin_width,
                                             args.bin_width))
        axes[0, 0].set_xlabel("blur magnitude (px)")
        axes[0, 0].set_ylabel("samples")
        with (tmp / "blur.csv").open("w") as fh:
            fh.write("id,blur_magnitude\n")
            for sid, b in zip(ids, blur):
                fh.write(f"{sid},{b:.6f}\n")
        if args.predictions:
            pl, _ = read_predictions(args.predictions, ids)
            bins = blur_binned_msap(pl, [s.lines() for s in samples], blur, args.bin_width, args.max_blur,
                                    image_sizes=[s.size for s in samples])
            with (tmp / "binned_msap.csv").open("w") as fh:
                fh.write("bin_lo,bin_hi,count,msAP\n")
                for b in bins:
                    fh.write(f"{b['bin_lo']},{b['bin_hi']},{b['count']},{b['msAP']:.6f}\n")
            axes[0, 1].bar([0.5 * (b["bin_lo"] + b["bin_hi"]) for b in bins], [b["msAP"] for b in bins],
                           width=0.8 * args.bin_width)
            axes[0, 1].set_xlabel("blur magnitude (px)")
            axes[0, 1].set_ylabel("msAP")
        fig.tight_layout()
        fig.savefig(tmp / "blur.png", dpi=100)
        plt.close(fig)
        echo_config(tmp, cfg, args)
    print(f"blur analysis of {len(ids)} samples written to {args.out}")
    return 0


def _read_curve(path: Path):
    data = np.genfromtxt(path, delimiter=",", names=True)
    return np.atleast_1d(data["precision"]), np.atleast_1d(data["recall"])


def cmd_plot_pr(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = _resolve(args)
    reports = [Path(r) for r in args.reports]
    labels = args.labels or [r.name for r in reports]
    if len(labels) != len(reports):
        raise CommandError("--labels must match --reports one-to-one")
    with staged_output(Path(args.out)) as tmp:
        for curve in ("sAP10", "APH"):
            fig, ax = plt.subplots(figsize=(4.5, 4.5))
            for rdir, label in zip(reports, labels):
                path = rdir / f"pr_{curve}.csv"
                if not path.exists():
                    raise ValidationError(f"{path} not found")
                precision, recall = _read_curve(path)
                ax.plot(recall, precision, label=label)
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1)
            ax.set_xlabel("recall")
            ax.set_ylabel("precision")
            ax.set_title(f"PR curve ({curve})")
            ax.grid(alpha=0.3)
            ax.legend(loc="lower left")
            fig.tight_layout()
            fig.savefig(tmp / f"pr_{curve}.png", dpi=100)
            plt.close(fig)
        echo_config(tmp, cfg, args)
    print(f"PR plots written to {args.out}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evlines", description="Frame + event line segment detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON or YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--preset", choices=cfglib.PRESETS, help="defaults layer (default: 'default')")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=fn)
        return p

    p = add("synthesize", cmd_synthesize, "build a blurred frame + event dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", help="directory of clear images")
    p.add_argument("--annotations", help="JSON mapping image file name to [[x0, y0, x1, y1], ...]")
    p.add_argument("--toy", type=int, help="generate N procedural polygon scenes instead")

    p = add("encode", cmd_encode, "cache dense event grids")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split")
    p.add_argument("--out", help=f"cache root (default ${CACHE_ENV} or <dataset>/cache)")

    p = add("train", cmd_train, "train a detector")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--val-split")
    p.add_argument("--init-from", help="checkpoint to start from (fine-tuning)")
    p.add_argument("--eval-every", type=int, help="check training sAP10 every N steps")
    p.add_argument("--target-sap10", type=float, help="stop once training sAP10 reaches this value")

    p = add("detect", cmd_detect, "write per-sample prediction JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score predictions against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True)

    p = add("analyze-blur", cmd_analyze_blur, "blur histogram and blur-binned msAP")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions")
    p.add_argument("--split")
    p.add_argument("--bin-width", type=float, default=10.0)
    p.add_argument("--max-blur", type=float, default=60.0)
    p.add_argument("--out", required=True)

    p = add("plot-pr", cmd_plot_pr, "plot PR curves from eval outputs")
    p.add_argument("--reports", nargs="+", required=True, help="eval output directories")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError, SchemaError, CommandError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
