"""Command-line interface for the full before/after change pipeline."""

from __future__ import annotations

import json
import math
import os
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import change, pipeline, register as registration
from .histmatch import histogram_match
from .raster import load_manifest, load_tile, save_tile
from .segnet import (
    SegNetConfig, SegNetModel, TrainConfig, load_model, predict_labelmap,
    save_model, train,
)


def _threads_default() -> int:
    env = os.environ.get("RAZEMETER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Global RNG seed.")
@click.option("--threads", type=int, default=None,
              help="Worker threads (default: RAZEMETER_THREADS or 1).")
@click.option("--verbose", is_flag=True, help="Chatty progress output.")
@click.pass_context
def main(ctx, seed, threads, verbose):
    """Quantify built-environment change between before/after tile pairs."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["threads"] = threads if threads is not None else _threads_default()
    ctx.obj["verbose"] = verbose


def _say(ctx, msg):
    if ctx.obj.get("verbose"):
        click.echo(msg, err=True)


def _fail(msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


@main.command("synth")
@click.option("--disasters", type=int, default=10, show_default=True,
              help="Number of before/after scene pairs.")
@click.option("--size", type=int, default=512, show_default=True)
@click.option("--buildings", type=int, default=40, show_default=True)
@click.option("--train-patches", type=int, default=0, show_default=True,
              help="Also emit this many 256x256 training patch/label pairs.")
@click.option("-o", "--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def cmd_synth(ctx, disasters, size, buildings, train_patches, out_dir):
    """Write synthetic tiles, label maps, manifest.json, and truth.json."""
    if disasters < 1:
        raise click.UsageError("--disasters must be >= 1")
    seed = ctx.obj["seed"]
    try:
        pipeline.synthesize_collection(out_dir, disasters, seed, size, buildings)
        _say(ctx, f"wrote {disasters} disasters to {out_dir}")
        if train_patches > 0:
            patch_dir = Path(out_dir) / "patches"
            patch_dir.mkdir(parents=True, exist_ok=True)
            images, labels = pipeline.training_patches(train_patches, seed + 1)
            for i, (img, lab) in enumerate(zip(images, labels)):
                Image.fromarray(img).save(patch_dir / f"img_{i:04d}.png")
                Image.fromarray(lab).save(patch_dir / f"lab_{i:04d}.png")
            _say(ctx, f"wrote {train_patches} training patches to {patch_dir}")
    except OSError as exc:
        _fail(str(exc))


def _parse_channels(_ctx, _param, value):
    try:
        channels = tuple(int(c) for c in value.split(","))
    except ValueError:
        raise click.BadParameter("expected comma-separated integers, e.g. 32,64,128")
    if any(c < 1 for c in channels):
        raise click.BadParameter("channel widths must be >= 1")
    return channels


def _load_pairs(data_dir: Path):
    images, labels, skipped = [], [], 0
    img_paths = sorted(data_dir.glob("img_*.png"))
    for img_path in img_paths:
        lab_path = img_path.with_name(img_path.name.replace("img_", "lab_", 1))
        try:
            with Image.open(img_path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.uint8)
            with Image.open(lab_path) as im:
                lab = np.asarray(im.convert("L"), dtype=np.uint8)
            if img.shape[:2] != lab.shape:
                raise ValueError("image/label size mismatch")
        except Exception as exc:
            click.echo(f"warning: skipping pair {img_path.name}: {exc}", err=True)
            skipped += 1
            continue
        images.append(img)
        labels.append(lab)
    return images, labels, skipped, len(img_paths)


def _jsonable_metrics(metrics):
    out = []
    for m in metrics:
        m = dict(m)
        m["per_class_accuracy"] = [
            None if isinstance(a, float) and math.isnan(a) else a
            for a in m["per_class_accuracy"]
        ]
        out.append(m)
    return out


@main.command("train")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory of img_*.png / lab_*.png pairs.")
@click.option("-o", "--out", "checkpoint_path", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--lr", type=float, default=0.01, show_default=True)
@click.option("--momentum", type=float, default=0.9, show_default=True)
@click.option("--batch-size", type=int, default=4, show_default=True)
@click.option("--modules", type=int, default=3, show_default=True)
@click.option("--convs-per-module", type=int, default=3, show_default=True)
@click.option("--channels", default="32,64,128", show_default=True,
              callback=_parse_channels)
@click.option("--num-classes", type=int, default=6, show_default=True)
@click.option("--relu-per-conv", is_flag=True,
              help="Activation after every conv block instead of one per module.")
@click.option("--target-accuracy", type=float, default=None,
              help="Stop once held-out pixel accuracy reaches this.")
@click.pass_context
def cmd_train(ctx, data_dir, checkpoint_path, epochs, lr, momentum, batch_size,
              modules, convs_per_module, channels, num_classes, relu_per_conv,
              target_accuracy):
    """Train a segmentation model on patch/label pairs; writes checkpoint + metrics."""
    if epochs < 0:
        raise click.UsageError("--epochs must be >= 0")
    images, labels, skipped, total = _load_pairs(Path(data_dir))
    if total == 0:
        raise click.UsageError(f"no img_*.png files in {data_dir}")
    if not images:
        _fail("all training pairs were malformed")
    _say(ctx, f"loaded {len(images)} pairs ({skipped} skipped)")

    config = SegNetConfig(
        modules=modules, convs_per_module=convs_per_module, channels=channels,
        num_classes=num_classes, relu_per_conv=relu_per_conv,
    )
    model = SegNetModel(config, seed=ctx.obj["seed"])
    tc = TrainConfig(
        learning_rate=lr, momentum=momentum, batch_size=batch_size, epochs=epochs,
        seed=ctx.obj["seed"], target_accuracy=target_accuracy,
    )
    x = np.stack(images).astype(np.float32) / 255.0
    y = np.stack(labels)
    metrics = train(model, x, y, tc) if epochs > 0 else []
    save_model(model, checkpoint_path)
    metrics_path = Path(checkpoint_path).with_suffix(".metrics.json")
    with open(metrics_path, "w") as fh:
        json.dump(_jsonable_metrics(metrics), fh, indent=2)
        fh.write("\n")
    if metrics:
        final = metrics[-1]
        _say(ctx, f"final loss {final['mean_loss']:.4f}, "
                  f"pixel accuracy {final['pixel_accuracy']:.4f}")


@main.command("segment")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="Label map PNG (class ids per pixel).")
@click.option("--mask", "mask_path", type=click.Path(), default=None,
              help="Also write the binary building layer (white on black).")
@click.pass_context
def cmd_segment(ctx, model_path, in_path, out_path, mask_path):
    """Segment one tile into the 6-class label map."""
    try:
        model = load_model(model_path)
        tile = load_tile(in_path)
        labels = predict_labelmap(model, tile)
        Image.fromarray(labels).save(out_path)
        if mask_path:
            mask = change.extract_building_mask(labels)
            Image.fromarray(mask * 255).save(mask_path)
    except Exception as exc:
        _fail(str(exc))


@main.command("register")
@click.option("--before", "before_path", type=click.Path(exists=True), required=True)
@click.option("--after", "after_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the translated before-tile here.")
@click.option("--search-radius", type=int, default=registration.DEFAULT_SEARCH_RADIUS,
              show_default=True)
@click.option("--ncc-threshold", type=float, default=registration.DEFAULT_NCC_THRESHOLD,
              show_default=True)
@click.option("--max-keypoints", type=int, default=registration.DEFAULT_MAX_KEYPOINTS,
              show_default=True)
@click.pass_context
def cmd_register(ctx, before_path, after_path, out_path, search_radius,
                 ncc_threshold, max_keypoints):
    """Estimate the translation aligning the before-tile onto the after-tile."""
    try:
        before = load_tile(before_path, epoch="before")
        after = load_tile(after_path, epoch="after")
        matches = registration.register_pair(
            before, after, max_keypoints, search_radius, ncc_threshold
        )
        dx, dy = matches.estimated_shift
        click.echo(f"shift dx={dx} dy={dy} pairs={len(matches.pairs)} "
                   f"residual={matches.residual:.2f}")
        if out_path:
            save_tile(registration.apply_translation(before, (dx, dy)), out_path)
    except Exception as exc:
        _fail(str(exc))


@main.command("match-hist")
@click.option("--before", "before_path", type=click.Path(exists=True), required=True)
@click.option("--after", "after_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.pass_context
def cmd_match_hist(ctx, before_path, after_path, out_path):
    """Histogram-match the before-tile onto the after-tile."""
    try:
        before = load_tile(before_path, epoch="before")
        after = load_tile(after_path, epoch="after")
        save_tile(histogram_match(before, after), out_path)
    except Exception as exc:
        _fail(str(exc))


@main.command("pipeline")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out", "out_dir", type=click.Path(), required=True)
@click.option("--use-truth-labels", is_flag=True,
              help="Count from ground-truth label maps instead of the model.")
@click.option("--register/--no-register", "do_register", default=True, show_default=True)
@click.option("--match-hist/--no-match-hist", "do_match_hist", default=True,
              show_default=True)
@click.option("--connectivity", type=click.Choice(["4", "8"]), default="8",
              show_default=True)
@click.option("--min-area", type=int, default=change.DEFAULT_MIN_AREA, show_default=True)
@click.option("--search-radius", type=int, default=registration.DEFAULT_SEARCH_RADIUS,
              show_default=True)
@click.option("--ncc-threshold", type=float, default=registration.DEFAULT_NCC_THRESHOLD,
              show_default=True)
@click.option("--max-keypoints", type=int, default=registration.DEFAULT_MAX_KEYPOINTS,
              show_default=True)
@click.pass_context
def cmd_pipeline(ctx, manifest_path, model_path, out_dir, use_truth_labels,
                 do_register, do_match_hist, connectivity, min_area,
                 search_radius, ncc_threshold, max_keypoints):
    """Run the full chain over a manifest and write report.csv / report.json."""
    if not use_truth_labels and model_path is None:
        raise click.UsageError("either --model or --use-truth-labels is required")
    try:
        manifest = load_manifest(manifest_path)
    except Exception as exc:
        raise click.UsageError(f"bad manifest: {exc}")
    if len(manifest) == 0:
        raise click.UsageError("empty manifest")
    model = None
    if not use_truth_labels:
        try:
            model = load_model(model_path)
        except Exception as exc:
            _fail(f"cannot load model: {exc}")
    config = pipeline.PipelineConfig(
        use_truth_labels=use_truth_labels,
        do_register=do_register,
        do_match_hist=do_match_hist,
        connectivity=int(connectivity),
        min_area=min_area,
        search_radius=search_radius,
        ncc_threshold=ncc_threshold,
        max_keypoints=max_keypoints,
        threads=ctx.obj["threads"],
    )
    records, failures = pipeline.run_pipeline(manifest, model, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    change.write_report_csv(records, manifest, out / "report.csv")
    change.write_report_json(
        records, manifest, out / "report.json",
        complete=not failures,
        failures=[{"disaster_id": f.disaster_id, "stage": f.stage, "message": f.message}
                  for f in failures],
    )
    for r in records:
        _say(ctx, f"{r.disaster_id}: before={r.n_before} after={r.n_after} "
                  f"coefficient={r.coefficient:.3f}")
    if failures:
        for f in failures:
            click.echo(f"error: disaster {f.disaster_id} failed at {f.stage}: {f.message}",
                       err=True)
        sys.exit(1)


@main.command("report")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--counts", "counts_path", type=click.Path(exists=True), required=True,
              help='JSON mapping disaster_id -> [n_before, n_after].')
@click.option("-o", "--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def cmd_report(ctx, manifest_path, counts_path, out_dir):
    """Rebuild report files from precomputed per-disaster counts."""
    try:
        manifest = load_manifest(manifest_path)
        with open(counts_path) as fh:
            raw = json.load(fh)
        counts = {k: (int(v[0]), int(v[1])) for k, v in raw.items()}
        records = change.build_change_report(manifest, counts)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        change.write_report_csv(records, manifest, out / "report.csv")
        change.write_report_json(records, manifest, out / "report.json")
    except Exception as exc:
        _fail(str(exc))


if __name__ == "__main__":
    main()
