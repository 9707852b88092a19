"""Command line entry point: ``spcaps <command> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import entropy, explain, slic
from .data import center_crop_resize, ingest_dir, synth_dataset, write_dataset
from .gradcheck import end_to_end
from .model import INGEST_EPOCHS, INGEST_LR, Model, ModelConfig, param_count
from .synth import scene_image
from .tensorio import Image, read_ppm, write_pgm, write_ppm, write_tensor
from .train import evaluate, sweep, train

log = logging.getLogger("spcaps")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text}")


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# --------------------------------------------------------------------------
# config handling


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with ModelConfig fields")
    g = p.add_argument_group("model config overrides")
    for f in dataclasses.fields(ModelConfig):
        if f.name == "backbone":
            continue
        default = f.default
        typ = _bool if isinstance(default, bool) else type(default)
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=typ, default=None)
    g.add_argument("--input-size", dest="bb_input_size", type=int)
    g.add_argument("--stages", dest="bb_stages", type=json.loads,
                   help='backbone stages as JSON, e.g. "[[1,16],[1,32],[2,64]]"')


def _build_config(args, ingest: bool = False) -> ModelConfig:
    d = json.loads(args.config.read_text()) if args.config else {}
    if ingest:
        # pretrained-scale schedule for real image folders unless told otherwise
        d.setdefault("lr", INGEST_LR)
        d.setdefault("epochs", INGEST_EPOCHS)
    for k, v in vars(args).items():
        if v is None:
            continue
        if k.startswith("cfg_"):
            d[k[4:]] = v
        elif k.startswith("bb_"):
            d.setdefault("backbone", {})
            if not isinstance(d["backbone"], dict):
                d["backbone"] = dataclasses.asdict(d["backbone"])
            d["backbone"][k[3:]] = v
    return ModelConfig.from_dict(d)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", type=Path, help="directory with one PPM subdirectory per class")
    g.add_argument("--synth", type=int, metavar="N", help="generate N synthetic images per class")
    p.add_argument("--data-seed", type=int, default=0, help="seed for --synth")


def _load_data(args, size: int):
    if args.data is not None:
        ds = ingest_dir(args.data, size)
        if ds.skipped:
            log.warning("%d unreadable files skipped", ds.skipped)
        return ds
    return synth_dataset(args.synth, args.data_seed, size)


def _load_input(path, size: int) -> Image:
    img = read_ppm(path)
    return Image.rgb(center_crop_resize(img.data, size))


# --------------------------------------------------------------------------
# commands


def cmd_segment(args) -> int:
    img = read_ppm(args.input)
    params = slic.SlicParams(args.superpixels, args.compactness, args.sigma, args.iterations)
    seg = slic.segment(img, params)
    write_tensor(seg.labels.astype(np.float32), args.out)
    if args.viz:
        write_ppm(slic.draw_boundaries(img, seg), args.viz)
    print(f"{seg.count} superpixels ({seg.nonempty} non-empty)")
    return 0


def cmd_entropy_sweep(args) -> int:
    img = read_ppm(args.input)
    params = slic.SlicParams(36, args.compactness, args.sigma, args.iterations)
    reports = entropy.entropy_sweep(img, _int_list(args.counts), params)
    _write_text(args.out, entropy.reports_to_csv(reports))
    if len(reports) >= 2:
        print(f"log-log slope of M vs S: {entropy.loglog_slope(reports):.4f}", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    if args.scenes:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for i in range(args.scenes):
            rng = np.random.default_rng(args.seed + i)
            write_ppm(Image.rgb(scene_image(rng, args.size)), out / f"scene_{args.seed + i:04d}.ppm")
        return 0
    write_dataset(synth_dataset(args.n_per_class, args.seed, args.size), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args, ingest=args.data is not None)
    ds = _load_data(args, cfg.backbone.input_size)
    model, metrics = train(cfg, ds, checkpoint_dir=args.checkpoints)
    model.save(args.out, epoch=cfg.epochs, seed=cfg.seed)
    if args.metrics:
        _write_text(args.metrics, metrics.to_csv())
    last = metrics.last("val")
    if last is not None:
        print(f"val loss {last[2]:.4f} accuracy {last[3]:.4f} ({metrics.wall_clock:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    model = Model.load(args.model)
    ds = _load_data(args, model.config.backbone.input_size)
    res = evaluate(model, ds)
    print(f"loss {res.loss:.6f} accuracy {res.accuracy:.4f} n {res.n}")
    print("confusion (rows true, cols predicted):")
    for row in res.confusion:
        print(" ".join(f"{x:5d}" for x in row))
    return 0


def _run_single(model: Model, path):
    img = _load_input(path, model.config.backbone.input_size)
    seg = model.segment(img)
    fwd = model.forward(img.data[None], model.pool_matrix(seg)[None])
    return img, seg, fwd


def cmd_infer(args) -> int:
    model = Model.load(args.model)
    _, _, fwd = _run_single(model, args.input)
    probs = fwd.probs[0]
    print(json.dumps({"class": int(np.argmax(probs)), "probabilities": [round(float(p), 6) for p in probs]}))
    return 0


def cmd_explain(args) -> int:
    model = Model.load(args.model)
    img, seg, fwd = _run_single(model, args.input)
    cmap = explain.contribution(fwd.state)
    cls = int(np.argmax(fwd.probs[0])) if args.cls is None else args.cls
    heat = explain.render_contribution(cmap.z, cls, seg)
    write_pgm(heat.image, args.out)
    if args.overlay:
        write_ppm(explain.overlay(heat.image, img), args.overlay)
    if args.csv:
        _write_text(args.csv, explain.contributions_csv(cmap.z, seg.mask))
    if heat.flat:
        log.warning("class %d contributions are constant; heatmap is flat", cls)
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_config(args, ingest=args.data is not None)
    ds = _load_data(args, cfg.backbone.input_size)
    _write_text(args.out, sweep(cfg, _int_list(args.S_list), _int_list(args.Q_list), ds))
    return 0


def cmd_gradcheck(args) -> int:
    probes = end_to_end(args.seed, args.probes)
    worst = 0.0
    for p in probes:
        worst = max(worst, p.rel_error)
        print(f"{p.name:12s} {str(p.index):18s} analytic {p.analytic:+.8e} numeric {p.numeric:+.8e} rel {p.rel_error:.2e}")
    ok = worst <= args.tol
    print(f"max relative error {worst:.2e} ({'ok' if ok else 'FAILED'})")
    return 0 if ok else 1


def cmd_params(args) -> int:
    pc = param_count(_build_config(args))
    print(json.dumps({"backbone": pc.backbone, "capsules": pc.capsules, "total": pc.total}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spcaps", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="SLIC superpixels of one PPM image")
    p.add_argument("--input", required=True)
    p.add_argument("--superpixels", type=int, default=36)
    p.add_argument("--compactness", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--out", required=True, help="label map as an SPCT tensor")
    p.add_argument("--viz", help="PPM with superpixel boundaries drawn")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("entropy-sweep", help="superpixel vs window hue entropy over superpixel counts")
    p.add_argument("--input", required=True)
    p.add_argument("--counts", default="1,13,24,145,425,894,7185")
    p.add_argument("--compactness", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_entropy_sweep)

    p = sub.add_parser("synth", help="write a synthetic shape dataset (or textured scenes)")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--scenes", type=int, default=0, help="write this many textured scenes instead")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    _add_data_args(p)
    p.add_argument("--out", required=True, help="model checkpoint (.spct)")
    p.add_argument("--metrics", help="per-epoch metrics CSV")
    p.add_argument("--checkpoints", help="directory for per-epoch checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    _add_data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="class probabilities for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("explain", help="per-superpixel contribution heatmap")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--class", dest="cls", type=int, help="class index (default: predicted)")
    p.add_argument("--out", required=True, help="heatmap PGM")
    p.add_argument("--overlay", help="heatmap blended over the input, PPM")
    p.add_argument("--csv", help="raw contributions")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("sweep", help="train a grid over S and Q")
    _add_config_args(p)
    _add_data_args(p)
    p.add_argument("--S-list", dest="S_list", default="10,16,25,36,50,100,200")
    p.add_argument("--Q-list", dest="Q_list", default="16,64")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts for a config")
    _add_config_args(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
