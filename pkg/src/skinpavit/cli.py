"""Command-line entry point: ``skinpavit <subcommand> ...``.

Every subcommand that writes artifacts also writes ``<output>.manifest.json``
with the resolved config, seed, argv and git-style content hashes of all
inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__

log = logging.getLogger("skinpavit")

MANIFEST_VERSION = 1


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def git_blob_hash(path: str | Path) -> str:
    """sha1 of ``blob <size>\\0<content>``, the hash git gives a file."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def write_manifest(out: str | Path, command: str, argv, cfg, inputs=(), outputs=(), extra=None) -> Path:
    out = Path(out)
    path = out.with_name(out.name + ".manifest.json")
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "package_version": __version__,
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed if cfg is not None else None,
        "config": cfg.to_dict() if cfg is not None else None,
        "inputs": {str(p): git_blob_hash(p) for p in inputs},
        "outputs": {str(p): git_blob_hash(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_cfg(args):
    from .config import load_config

    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def _train_overrides(args) -> dict:
    kw = {}
    for name in ("epochs", "lr", "tau", "batch_size"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    return kw


def _read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path, allow_pickle=False)
    return np.asarray(Image.open(path).convert("RGB"))


def _write_image(arr: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path, format="PNG")


def _emit(text: str) -> None:
    sys.stdout.write(text + "\n")


def _dataset_for(args, cfg):
    from .datamodel import load_dataset
    from .synthgen import gen_dataset

    if getattr(args, "data", None):
        return load_dataset(args.data), [args.data]
    log.info("no --data given; generating the synthetic dataset from [synth]")
    return gen_dataset(cfg.synth_config()), []


def _default_out(args, cfg, name: str) -> Path:
    """``--out`` if given, else ``<output_dir>/<name>``; parent directories are created."""
    out = Path(args.out) if args.out else Path(cfg.output_dir) / name
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _write_reports(reports, out: Path) -> list[Path]:
    from .evalmetrics import format_reports

    _emit(format_reports(reports))
    out.write_text("".join(r.to_json() + "\n" for r in reports))
    return [out]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    from .datamodel import serialize_dataset
    from .synthgen import gen_dataset

    cfg = _load_cfg(args)
    ds = gen_dataset(cfg.synth_config())
    serialize_dataset(ds, args.out)
    write_manifest(args.out, "synth", argv, cfg, outputs=[args.out], extra={"n_records": len(ds), "n_patches": ds.n_patches})
    _emit(f"wrote {len(ds)} records ({ds.n_patches} patches) to {args.out} [{git_blob_hash(args.out)}]")
    return 0


def cmd_filter(args, argv) -> int:
    from .spectral import bandpass_mask, extract_texture, highpass_mask, lowpass_mask, render_texture

    img = _read_image(args.image)
    h, w = img.shape[:2]
    if args.band == "band":
        mask = bandpass_mask(args.rho_low, args.rho_high, w, h)
    elif args.band == "low":
        mask = lowpass_mask(args.rho_low, w, h)
    else:
        mask = highpass_mask(args.rho_high, w, h)
    _write_image(render_texture(extract_texture(img, mask)), args.out)
    write_manifest(args.out, "filter", argv, None, inputs=[args.image], outputs=[args.out],
                   extra={"band": args.band, "rho_low": args.rho_low, "rho_high": args.rho_high})
    _emit(f"wrote {args.out}")
    return 0


def cmd_anchors(args, argv) -> int:
    from .anchors import AnchorRegressor, AnchorTrainConfig, mean_error_rate, predict_anchors, train_anchor_model
    from .datamodel import LandmarkSet
    from .synthgen import gen_geometry_pairs

    rng = np.random.default_rng(args.seed)
    if args.action == "train":
        pairs = gen_geometry_pairs(rng, args.n_pairs)
        cfg = AnchorTrainConfig(epochs=args.epochs, seed=args.seed)
        model = train_anchor_model(pairs, cfg)
        model.save(args.out)
        write_manifest(args.out, "anchors train", argv, None, outputs=[args.out],
                       extra={"seed": args.seed, "n_pairs": args.n_pairs, "final_loss": model.history[-1]})
        _emit(f"trained on {args.n_pairs} synthetic faces, final loss {model.history[-1]:.5f}; wrote {args.out}")
        return 0
    model = AnchorRegressor.load(args.model)
    if args.action == "eval":
        pairs = gen_geometry_pairs(rng, args.n_pairs)
        rates = [mean_error_rate(an, predict_anchors(model, lm), args.radius) for lm, an in pairs]
        doc = {"n": len(rates), "mean_error_rate": float(np.mean(rates)), "radius": args.radius}
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(doc) + "\n")
        write_manifest(out, "anchors eval", argv, None, inputs=[args.model], outputs=[out], extra={"seed": args.seed})
        _emit(json.dumps(doc))
        return 0
    pts = np.asarray(json.loads(Path(args.landmarks).read_text()), dtype=float)
    anchors = predict_anchors(model, LandmarkSet(pts))
    doc = {str(d): list(anchors[d]) for d in anchors.ids}
    Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    write_manifest(args.out, "anchors predict", argv, None, inputs=[args.model, args.landmarks], outputs=[args.out])
    _emit(f"wrote {len(doc)} anchors to {args.out}")
    return 0


def cmd_train(args, argv) -> int:
    from .anchors import extract_patches
    from .evalmetrics import partition_shots, split_by_panelist
    from .pavit.train import model_config_for, train

    cfg = _load_cfg(args)
    ds, inputs = _dataset_for(args, cfg)
    tcfg = cfg.train_config(**_train_overrides(args))
    tr, va = split_by_panelist(ds, cfg.eval.n_val_panelists, cfg.eval.split_seed)
    train_p, val_p = extract_patches(tr), extract_patches(va)
    partition = partition_shots([p.label.value for p in train_p], cfg.eval.bin_width)

    def progress(e):
        _emit(f"epoch {e['epoch']:3d} loss {e['loss']:.4f} val R2 {e.get('val_r2', float('nan')):.3f}")

    result = train(train_p, tcfg, model_config_for(tcfg, cfg.model_config()), val_patches=val_p, progress=progress)
    if result.backbone_hash_before != result.backbone_hash_after:
        raise CLIError("backbone weights changed during training")
    extra = {"partition": partition.to_dict(), "val_panelists": sorted(va.panelists)}
    result.save(args.out, extra=extra)
    write_manifest(args.out, "train", argv, cfg, inputs=inputs, outputs=[args.out],
                   extra={"history": result.history, "backbone_sha256": result.backbone_hash_after})
    _emit(f"wrote {args.out}")
    return 0


def _partition_from(blob, ds, cfg):
    from .evalmetrics import ShotPartition, partition_shots, split_by_panelist

    part = blob.get("extra", {}).get("partition")
    if part:
        first = int(round(part["edges"][0] / part["bin_width"]))
        return ShotPartition(part["bin_width"], first, np.asarray(part["counts"]), tuple(part["groups"]))
    tr, _ = split_by_panelist(ds, cfg.eval.n_val_panelists, cfg.eval.split_seed)
    return partition_shots(tr.labels(blob["kind"]), cfg.eval.bin_width)


def _eval_split(blob, ds, cfg):
    val = blob.get("extra", {}).get("val_panelists")
    if val is None:
        return ds
    return ds.subset(lambda r: r.image.panelist_id in set(val))


def cmd_predict(args, argv) -> int:
    from .anchors import crop_patch
    from .pavit.train import load_checkpoint, predict

    cfg = _load_cfg(args)
    model, tcfg, _ = load_checkpoint(args.checkpoint)
    ds, inputs = _dataset_for(args, cfg)
    from .datamodel import Measurement, SkinPatch

    rows, patches = [], []
    for i, rec in enumerate(ds.records):
        img = rec.image
        for d in rec.anchors.ids:
            px = crop_patch(img.pixels, rec.anchors[d], img.radius, d)
            label = rec.labels.get(d)
            patches.append(SkinPatch(px, d, label or Measurement(tcfg.kind, 0.0), img.panelist_id, img.lighting, img.angle))
            rows.append({"record": i, "panelist": img.panelist_id, "position_id": d,
                         "row": rec.anchors[d][0], "col": rec.anchors[d][1],
                         "label": label.value if label else None})
    preds = predict(model, patches, tcfg.kind)
    with open(args.out, "w") as fh:
        for row, p in zip(rows, preds):
            fh.write(json.dumps({**row, "pred": float(p), "kind": tcfg.kind}) + "\n")
    write_manifest(args.out, "predict", argv, cfg, inputs=[args.checkpoint, *inputs], outputs=[args.out])
    _emit(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def cmd_eval(args, argv) -> int:
    from .evalmetrics import evaluate
    from .pavit.train import load_checkpoint

    cfg = _load_cfg(args)
    model, tcfg, blob = load_checkpoint(args.checkpoint)
    ds, inputs = _dataset_for(args, cfg)
    partition = _partition_from(blob, ds, cfg)
    report = evaluate(model, _eval_split(blob, ds, cfg), partition, tcfg.kind, name=Path(args.checkpoint).stem[:12])
    out = _default_out(args, cfg, "eval.jsonl")
    outs = _write_reports([report], out)
    write_manifest(out, "eval", argv, cfg, inputs=[args.checkpoint, *inputs], outputs=outs)
    return 0


def cmd_ablation(args, argv) -> int:
    from .evalmetrics import ablation_ladder, split_by_panelist

    cfg = _load_cfg(args)
    ds, inputs = _dataset_for(args, cfg)
    tr, va = split_by_panelist(ds, cfg.eval.n_val_panelists, cfg.eval.split_seed)
    seeds = args.seeds if args.seeds else cfg.eval.seeds
    reports = ablation_ladder(tr, va, cfg.train_config(**_train_overrides(args)), cfg.model_config(),
                              configs=args.configs, seeds=seeds, bin_width=cfg.eval.bin_width)
    out = _default_out(args, cfg, "ablation.jsonl")
    outs = _write_reports(reports, out)
    write_manifest(out, "ablation", argv, cfg, inputs=inputs, outputs=outs, extra={"seeds": list(seeds)})
    return 0


def cmd_loo(args, argv) -> int:
    from .evalmetrics import leave_one_lighting_out

    cfg = _load_cfg(args)
    ds, inputs = _dataset_for(args, cfg)
    reports = leave_one_lighting_out(ds, cfg.train_config(**_train_overrides(args)), cfg.model_config(),
                                     bin_width=cfg.eval.bin_width)
    out = _default_out(args, cfg, "loo_lighting.jsonl")
    outs = _write_reports(reports, out)
    write_manifest(out, "loo-lighting", argv, cfg, inputs=inputs, outputs=outs)
    return 0


def cmd_heatmap(args, argv) -> int:
    from .heatmap import image_digest, render_heatmap

    cfg = _load_cfg(args)
    image = _read_image(args.image)
    rows = [json.loads(line) for line in Path(args.predictions).read_text().splitlines() if line.strip()]
    if args.record is not None:
        rows = [r for r in rows if r.get("record") == args.record]
    if not rows:
        raise CLIError("no predictions selected for the heatmap")
    kind = args.kind or rows[0].get("kind")
    if kind is None:
        raise CLIError("metric kind unknown; pass --kind")
    anchors = np.array([[r["row"], r["col"]] for r in rows], dtype=float)
    values = np.array([r["pred"] for r in rows], dtype=float)
    landmarks = np.asarray(json.loads(Path(args.landmarks).read_text()), dtype=float) if args.landmarks else None
    alpha = cfg.heatmap.alpha if args.alpha is None else args.alpha
    legend = cfg.heatmap.legend if args.legend is None else args.legend
    out = render_heatmap(image, anchors, values, kind, landmarks=landmarks, alpha=alpha, legend=legend)
    _write_image(out, args.out)
    inputs = [args.image, args.predictions] + ([args.landmarks] if args.landmarks else [])
    write_manifest(args.out, "heatmap", argv, cfg, inputs=inputs, outputs=[args.out],
                   extra={"pixel_sha256": image_digest(out)})
    _emit(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skinpavit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, data=True):
        sp.add_argument("--config", help="TOML run config")
        sp.add_argument("--seed", type=int, help="override the global seed")
        if data:
            sp.add_argument("--data", help="dataset zip (default: generate from [synth])")

    def train_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--batch-size", type=int)

    sp = sub.add_parser("synth", help="generate the synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("filter", help="render the spectral texture image of a picture")
    sp.add_argument("--image", required=True)
    sp.add_argument("--band", choices=("band", "low", "high"), default="band")
    sp.add_argument("--rho-low", type=float, default=0.0576)
    sp.add_argument("--rho-high", type=float, default=0.0036)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("anchors", help="train, evaluate or apply the landmark-to-anchor model")
    asub = sp.add_subparsers(dest="action", required=True, metavar="ACTION")
    a = asub.add_parser("train")
    a.add_argument("--n-pairs", type=int, default=400)
    a.add_argument("--epochs", type=int, default=300)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a = asub.add_parser("eval")
    a.add_argument("--model", required=True)
    a.add_argument("--n-pairs", type=int, default=100)
    a.add_argument("--radius", type=float, default=8.0, help="sticker radius in pixels")
    a.add_argument("--seed", type=int, default=1)
    a.add_argument("--out", default="runs/anchors_eval.json")
    a = asub.add_parser("predict")
    a.add_argument("--model", required=True)
    a.add_argument("--landmarks", required=True, help="JSON list of 68 [row, col] points")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_anchors)

    sp = sub.add_parser("train", help="train Skin-PAViT")
    common(sp)
    train_flags(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="predict every anchor of every record")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="JSONL predictions")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="MAE per shot group and R^2 of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="JSONL report (default: <output_dir>/eval.jsonl)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("loo-lighting", help="leave-one-lighting-out with and without lighting augmentation")
    common(sp)
    train_flags(sp)
    sp.add_argument("--out", help="JSONL reports (default: <output_dir>/loo_lighting.jsonl)")
    sp.set_defaults(func=cmd_loo)

    sp = sub.add_parser("ablation", help="train configurations A to E and report each")
    common(sp)
    train_flags(sp)
    sp.add_argument("--configs", default="ABCDE")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--out", help="JSONL reports (default: <output_dir>/ablation.jsonl)")
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("heatmap", help="render a heatmap from a predictions file")
    common(sp, data=False)
    sp.add_argument("--image", required=True, help="PNG or .npy image")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--record", type=int, help="use only predictions of this record index")
    sp.add_argument("--kind", choices=("TEWL", "SH"))
    sp.add_argument("--landmarks", help="JSON landmarks for the face mask (default: anchor hull)")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--legend", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    from .config import ConfigValidationError
    from .datamodel import DatasetFormatError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (CLIError, ConfigValidationError, DatasetFormatError, ValueError, FileNotFoundError, OSError) as e:
        sys.stderr.write(f"skinpavit {args.command}: error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
