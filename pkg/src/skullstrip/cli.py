"""Command-line entry point: ``skullstrip watershed|train|predict|evaluate|overlay``.

Exit codes:

    0  success, every output written
    1  any other pipeline error
    2  usage error, unreadable or invalid params/config file
    3  dataset too small to split
    4  training image without a mask (or mask without an image)
    5  corrupt or incompatible checkpoint
    6  geometry mismatch between volumes or slices

On failure every output file the command had started writing is removed.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import params as kv
from . import unet, volume_io, watershed
from .errors import (
    CorruptCheckpoint,
    DatasetTooSmall,
    EmptyForeground,
    IndivisibleInput,
    NoCandidateRegion,
    ParamsError,
    ShapeMismatch,
    SkullStripError,
    UnpairedFiles,
)
from .image_core import erode, normalize, resize_bilinear
from .metrics import compute_report
from .train import TrainConfig, train

log = logging.getLogger("skullstrip")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_TOO_SMALL = 3
EXIT_UNPAIRED = 4
EXIT_CHECKPOINT = 5
EXIT_GEOMETRY = 6

RED = (255, 0, 0)
GREEN = (0, 255, 0)
YELLOW = (255, 255, 0)

VOLUME_SUFFIXES = (".nii", ".txt")


# overlays --------------------------------------------------------------------

def contour(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one zero 4-neighbour (outside counts as zero)."""
    m = (np.asarray(mask) != 0).astype(np.uint8)
    return (m & (1 - erode(m, 1))).astype(bool)


def render_overlay(img: np.ndarray, pred: np.ndarray, truth: np.ndarray | None = None) -> np.ndarray:
    """RGB uint8 image: grayscale slice with red prediction and green truth contours."""
    img = np.asarray(img)
    pred = np.asarray(pred)
    if pred.shape != img.shape or (truth is not None and np.shape(truth) != img.shape):
        raise ShapeMismatch("overlay inputs must share extents")
    gray = np.floor(normalize(img).astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    p = contour(pred)
    t = contour(truth) if truth is not None else np.zeros_like(p)
    rgb[p & ~t] = RED
    rgb[t & ~p] = GREEN
    rgb[p & t] = YELLOW
    return rgb


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def overlay_names(base: Path, n_slices: int, n_frames: int) -> list[Path]:
    """``<stem>_z<k>.ppm`` per slice; 4D runs over all frames add ``_t<t>``."""
    stem = base.name.split(".")[0]
    if n_frames == 1:
        return [base.with_name(f"{stem}_z{z}.ppm") for z in range(n_slices)]
    return [base.with_name(f"{stem}_t{t}_z{z}.ppm") for t in range(n_frames) for z in range(n_slices)]


def _write_overlays(base, slices, preds, truths, n_slices, written):
    n_frames = len(slices) // n_slices
    for path, img, pred, tru in zip(overlay_names(Path(base), n_slices, n_frames), slices, preds, truths):
        written.append(path)
        path.write_bytes(encode_ppm(render_overlay(img, pred, tru)))


# helpers -----------------------------------------------------------------------

def _frames_template(vol: volume_io.Volume, time_index):
    """Template volume whose slice layout matches ``extract_slices(vol, time_index)``."""
    if vol.ndim == 4 and time_index is not None:
        return volume_io.Volume(vol.dims[:3], vol.voxel_size[:3], vol.data[..., time_index], vol.header_bytes)
    return vol


def _write_mask(masks, template, out, written):
    vol = volume_io.assemble_mask_volume(masks, template)
    written.append(Path(out))
    volume_io.write_nifti(vol, out)


def find_pairs(data_dir) -> list[tuple[str, Path, Path]]:
    """Match ``<stem>.nii`` with ``<stem>_mask.nii`` (or ``.txt``) by stem."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ParamsError(f"{data_dir} is not a directory")
    images, masks = {}, {}
    for p in sorted(data_dir.iterdir()):
        if p.suffix not in VOLUME_SUFFIXES or not p.is_file():
            continue
        if p.stem.endswith("_mask"):
            masks[p.stem[: -len("_mask")]] = p
        else:
            images[p.stem] = p
    for stem in sorted(images):
        if stem not in masks:
            raise UnpairedFiles(stem, f"image '{stem}' has no matching '{stem}_mask' file")
    for stem in sorted(masks):
        if stem not in images:
            raise UnpairedFiles(stem, f"mask '{stem}_mask' has no matching image '{stem}'")
    return [(s, images[s], masks[s]) for s in sorted(images)]


def load_training_pairs(data_dir, input_size=None):
    """All (normalised slice, binary mask) pairs, resized to ``input_size``."""
    pairs = []
    for stem, img_path, mask_path in find_pairs(data_dir):
        img = volume_io.read_volume(img_path)
        mask = volume_io.read_volume(mask_path)
        if img.dims != mask.dims:
            raise ShapeMismatch(f"{stem}: image {img.dims} vs mask {mask.dims}")
        for s, m in zip(volume_io.extract_slices(img), volume_io.extract_slices(mask)):
            size = input_size or s.shape
            x = resize_bilinear(normalize(s), size)
            y = (resize_bilinear((m != 0).astype(np.float32), size) >= 0.5).astype(np.uint8)
            pairs.append((x, y))
    return pairs


# commands ----------------------------------------------------------------------

def cmd_watershed(args) -> int:
    params = kv.load(watershed.WatershedParams, args.params)
    vol = volume_io.read_volume(args.inp)
    slices = volume_io.extract_slices(vol, args.time_index)
    masks = []
    for k, s in enumerate(slices):
        try:
            masks.append(watershed.segment_slice(s, params))
        except (EmptyForeground, NoCandidateRegion) as exc:
            if not args.skip_empty:
                raise
            log.warning("slice %d: %s; writing an empty mask", k, exc)
            masks.append(np.zeros(s.shape, np.uint8))
    template = _frames_template(vol, args.time_index)
    written = args._written
    _write_mask(masks, template, args.out, written)
    if args.overlay:
        truths = [None] * len(slices)
        if args.truth:
            truth = volume_io.read_volume(args.truth)
            if truth.dims[:3] != vol.dims[:3]:
                raise ShapeMismatch(f"truth {truth.dims} vs input {vol.dims}")
            truths = volume_io.extract_slices(truth, args.time_index if truth.ndim == 4 else None)
        _write_overlays(args.out, slices, masks, truths, vol.n_slices, written)
    log.info("wrote %d slice masks to %s", len(masks), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    config = kv.load(TrainConfig, args.config)
    overrides = {"checkpoint_path": str(args.out)}
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = dataclasses.replace(config, **overrides)
    pairs = load_training_pairs(args.inp, config.input_size or None)
    if not pairs:
        raise DatasetTooSmall(f"no training volumes found in {args.inp}")
    size = pairs[0][0].shape
    if any(p[0].shape != size for p in pairs):
        raise ShapeMismatch("training slices differ in extent; set input_size in the config")
    try:
        model = unet.build_unet(config.depth, config.base_channels, size, seed=config.seed)
    except (ValueError, IndivisibleInput) as exc:
        raise ParamsError(f"model configuration: {exc}") from exc
    log_path = Path(args.log) if args.log else Path(args.out).with_name(Path(args.out).stem + "_log.csv")
    args._written.extend([Path(args.out), log_path])
    result = train(model, pairs, config)
    log_path.write_text(result.log_csv())
    log.info("best epoch %d, val BCE %.6f; checkpoint %s, log %s", result.best_epoch, result.best_val_bce, args.out, log_path)
    return EXIT_OK


def cmd_predict(args) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise ParamsError("--threshold must lie in [0, 1]")
    model = unet.load_checkpoint(args.checkpoint)
    vol = volume_io.read_volume(args.inp)
    slices = volume_io.extract_slices(vol, args.time_index)
    batch = np.stack([resize_bilinear(normalize(s), model.input_size) for s in slices])
    probs = unet.predict_batch(model, batch)
    soft = [resize_bilinear(p, s.shape) for p, s in zip(probs, slices)]
    masks = [unet.binarize(np.clip(p, 0.0, 1.0), args.threshold) for p in soft]
    template = _frames_template(vol, args.time_index)
    written = args._written
    _write_mask(masks, template, args.out, written)
    if args.stripped:
        stripped = np.zeros(template.dims, np.float32)
        nz = vol.n_slices
        for k, (s, p) in enumerate(zip(slices, soft)):
            plane = unet.apply_soft_mask(s, p).T
            if stripped.ndim == 4:
                stripped[:, :, k % nz, k // nz] = plane
            else:
                stripped[:, :, k % nz] = plane
        written.append(Path(args.stripped))
        volume_io.write_nifti(template.with_data(stripped), args.stripped)
    if args.overlay:
        _write_overlays(args.out, slices, masks, [None] * len(slices), vol.n_slices, written)
    log.info("predicted %d slices", len(slices))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = volume_io.read_volume(args.inp)
    truth = volume_io.read_volume(args.truth)
    if pred.dims != truth.dims:
        raise ShapeMismatch(f"prediction {pred.dims} vs truth {truth.dims}")
    pairs = zip(volume_io.extract_slices(pred), volume_io.extract_slices(truth))
    # masks are already binary, so they double as probabilities
    report = compute_report(((p != 0).astype(np.float64), (t != 0)) for p, t in pairs)
    text = report.to_kv()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        csv_path = out.with_suffix(".csv")
        if csv_path == out:
            csv_path = out.with_name(out.name + ".csv")
        args._written.extend([out, csv_path])
        out.write_text(text)
        csv_path.write_text(report.to_csv())
    return EXIT_OK


def cmd_overlay(args) -> int:
    vol = volume_io.read_volume(args.inp)
    mask = volume_io.read_volume(args.mask)
    if mask.dims[:3] != vol.dims[:3]:
        raise ShapeMismatch(f"mask {mask.dims} vs image {vol.dims}")
    slices = volume_io.extract_slices(vol, args.time_index)
    preds = volume_io.extract_slices(mask, args.time_index if mask.ndim == 4 else None)
    truths = [None] * len(slices)
    if args.truth:
        truth = volume_io.read_volume(args.truth)
        if truth.dims[:3] != vol.dims[:3]:
            raise ShapeMismatch(f"truth {truth.dims} vs image {vol.dims}")
        truths = volume_io.extract_slices(truth, args.time_index if truth.ndim == 4 else None)
    if len(preds) != len(slices):
        preds = preds * (len(slices) // len(preds))
    _write_overlays(args.out, slices, preds, truths, vol.n_slices, args._written)
    return EXIT_OK


# argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skullstrip", description="Rodent fMRI skull stripping.", epilog="exit codes: 2 usage, 3 dataset too small, 4 unpaired files, 5 bad checkpoint, 6 geometry, 1 other")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("watershed", help="semi-automatic masks by marker-controlled watershed")
    p.add_argument("--in", dest="inp", required=True, help="input volume")
    p.add_argument("--out", required=True, help="output mask volume (.nii)")
    p.add_argument("--params", required=True, help="key=value watershed parameter file")
    p.add_argument("--time-index", type=int, default=None)
    p.add_argument("--overlay", action="store_true", help="write <stem>_z<k>.ppm beside --out")
    p.add_argument("--truth", help="mask volume drawn in green on overlays")
    p.add_argument("--skip-empty", action="store_true", help="empty mask instead of failing on blank slices")
    p.set_defaults(func=cmd_watershed)

    p = sub.add_parser("train", help="train the U-Net on paired volumes")
    p.add_argument("--in", dest="inp", required=True, help="directory of <stem>.nii / <stem>_mask.nii")
    p.add_argument("--config", required=True, help="key=value training config")
    p.add_argument("--out", required=True, help="best checkpoint path")
    p.add_argument("--log", help="CSV training log (default <out stem>_log.csv)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="soft masks from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help="binary mask volume")
    p.add_argument("--stripped", help="image multiplied by the soft mask")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--time-index", type=int, default=None)
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="pixel metrics of a mask volume against truth")
    p.add_argument("--in", dest="inp", required=True, help="predicted mask volume")
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="key=value report; a .csv row is written beside it")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("overlay", help="contour overlays of a mask on its volume")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--truth")
    p.add_argument("--out", required=True, help="path whose stem names <stem>_z<k>.ppm")
    p.add_argument("--time-index", type=int, default=None)
    p.set_defaults(func=cmd_overlay)
    parser.subcommands = sub.choices
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ParamsError):
        return EXIT_USAGE
    if isinstance(exc, DatasetTooSmall):
        return EXIT_TOO_SMALL
    if isinstance(exc, UnpairedFiles):
        return EXIT_UNPAIRED
    if isinstance(exc, CorruptCheckpoint):
        return EXIT_CHECKPOINT
    if isinstance(exc, ShapeMismatch):
        return EXIT_GEOMETRY
    return EXIT_ERROR


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args._written = []
    try:
        return args.func(args)
    except (SkullStripError, OSError) as exc:
        volume_io.remove_quietly(*args._written)
        code = exit_code_for(exc)
        print(f"skullstrip {args.command}: error: {exc}", file=sys.stderr)
        if code == EXIT_USAGE:
            print(parser.subcommands[args.command].format_usage(), file=sys.stderr, end="")
        return code


if __name__ == "__main__":
    sys.exit(main())
