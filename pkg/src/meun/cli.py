"""Command-line entry point: ``meun {synth,train,infer,eval,gradcheck}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from meun.autodiff import no_grad
from meun.checkpoint import checkpoint_load
from meun.checks import MODEL_TOLERANCE, model_grad_check, primitive_checks
from meun.config import load_config
from meun.data import (
    Sample,
    list_images,
    load_image,
    load_mask,
    preprocess,
    read_netpbm,
    resize_bilinear,
    save_probability_map,
    synth_dataset,
)
from meun.metrics import MetricsReport, evaluate_pair
from meun.model import MEUN
from meun.train import format_record, train

log = logging.getLogger("meun")


# -- commands ----------------------------------------------------------------------


def cmd_synth(root, seed: int, n: int, size: int) -> int:
    index = synth_dataset(root, seed, n, size)
    print(f"wrote {len(index)} samples to {root}")
    return 0


def cmd_train(config, dataset_root, out_checkpoint, quiet: bool = False):
    def on_step(record):
        if not quiet:
            print(format_record(record), flush=True)

    return train(config, dataset_root, out_checkpoint, on_step=on_step)


def load_model(checkpoint, config=None) -> MEUN:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    if config is None:
        sidecar = Path(str(checkpoint) + ".cfg")
        config = load_config(sidecar if sidecar.exists() else None)
    model = MEUN(config.model_config(), seed=config.seed)
    return checkpoint_load(checkpoint, model)


def cmd_infer(
    checkpoint,
    input_dir,
    output_dir,
    emit_intermediates: bool = False,
    emit_edge: bool = False,
    use_last_stage: bool = False,
    config=None,
) -> list[Path]:
    """Write one 8-bit map per input image; returns the written paths."""
    model = load_model(checkpoint, config).eval()
    size = model.config.input_size
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in list_images(input_dir):
        sample = preprocess(Sample(load_image(path), None, path.stem), size)
        with no_grad():
            out = model(sample.image[None].astype(model.dtype))
        main = out.sal[0] if use_last_stage else out.united
        maps = {"": main}
        if emit_intermediates:
            maps.update({f"_s{i + 1}": s for i, s in enumerate(out.sal)})
        if emit_edge:
            maps["_edge"] = out.edge_map
        for suffix, t in maps.items():
            dest = out_dir / f"{path.stem}{suffix}.pgm"
            save_probability_map(dest, t.data[0, 0])
            written.append(dest)
    return written


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MEUN_THREADS", "1")))
    except ValueError:
        return 1


def _score(pred_path: Path, gt_path: Path) -> tuple:
    gt = load_mask(gt_path)
    raw = read_netpbm(pred_path)
    if raw.ndim == 3:
        raw = raw.mean(axis=2)
    pred = np.clip(resize_bilinear(raw.astype(np.float64) / 255.0, *gt.shape), 0.0, 1.0)
    return pred, gt, evaluate_pair(pred, gt)


def cmd_eval(pred_dir, gt_dir, report_path) -> MetricsReport:
    preds = {p.stem: p for p in Path(pred_dir).iterdir() if p.suffix in (".pgm", ".ppm")}
    gts = {p.stem: p for p in Path(gt_dir).iterdir() if p.suffix == ".pgm"}
    matched = sorted(set(preds) & set(gts))
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        log.warning("%d unmatched stems skipped: %s", len(unmatched), ", ".join(unmatched))
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        scored = list(pool.map(lambda s: _score(preds[s], gts[s]), matched))
    report = MetricsReport(unmatched=unmatched)
    for stem, (_, gt, row) in zip(matched, scored):
        report.images.append(stem)
        report.rows.append(row)
        if not gt.any():
            report.empty_gt.append(stem)
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_csv())
    report_path.with_suffix(".txt").write_text(report.to_text())
    return report


def cmd_gradcheck(scope: str, seed: int = 0) -> tuple[bool, list[str]]:
    lines = []
    ok = True
    if scope == "primitives":
        for result in primitive_checks(seed=seed):
            lines.append(result.line())
            ok &= result.passed
    elif scope == "model":
        check = model_grad_check(seed=seed)
        passed = check.error < MODEL_TOLERANCE
        ok &= passed
        lines.append(
            f"{'PASS' if passed else 'FAIL'} model total loss  max_rel_err={check.error:.3e} "
            f"(tol {MODEL_TOLERANCE:g}) coords={len(check.rows)} "
            f"skipped_kinks={check.skipped_kinks} skipped_flat={check.skipped_flat}"
        )
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return ok, lines


# -- argument parsing -------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--input-size", type=int, dest="input_size")
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--encoder", choices=("mini", "resnet50-shape"))
    p.add_argument("--no-adm", action="store_false", dest="use_adm", default=None)
    p.add_argument("--plain-uen", action="store_false", dest="use_uen", default=None)
    p.add_argument("--seed", type=int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr-head", type=float, dest="lr_head")
    p.add_argument("--lr-backbone", type=float, dest="lr_backbone")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--steps", type=int)
    p.add_argument("--loss-reduction", choices=("mean", "sum"), dest="loss_reduction")
    p.add_argument("--no-iou-hw-scaling", action="store_false", dest="iou_hw_scaling", default=None)


_OVERRIDES = (
    "input_size", "base_channels", "encoder", "use_adm", "use_uen", "seed", "lr_head",
    "lr_backbone", "momentum", "weight_decay", "batch_size", "steps", "loss_reduction",
    "iou_hw_scaling",
)


def _config_from_args(args):
    overrides = {k: getattr(args, k, None) for k in _OVERRIDES}
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meun", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("dataset_root")
    p.add_argument("checkpoint")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("infer", help="write saliency maps for a directory of images")
    p.add_argument("checkpoint")
    p.add_argument("input_dir")
    p.add_argument("output_dir")
    p.add_argument("--emit-intermediates", action="store_true")
    p.add_argument("--emit-edge", action="store_true")
    p.add_argument("--use-last-stage", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score predictions against ground-truth masks")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("report")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("primitives", "model"), default="primitives")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args.root, args.seed, args.n, args.size)
        if args.command == "train":
            cmd_train(_config_from_args(args), args.dataset_root, args.checkpoint, args.quiet)
            return 0
        if args.command == "infer":
            if not args.config:
                sidecar = Path(args.checkpoint + ".cfg")
                args.config = str(sidecar) if sidecar.exists() else None
            written = cmd_infer(
                args.checkpoint, args.input_dir, args.output_dir,
                args.emit_intermediates, args.emit_edge, args.use_last_stage, _config_from_args(args),
            )
            print(f"wrote {len(written)} maps to {args.output_dir}")
            return 0
        if args.command == "eval":
            report = cmd_eval(args.pred_dir, args.gt_dir, args.report)
            sys.stdout.write(report.to_text())
            return 0
        if args.command == "gradcheck":
            ok, lines = cmd_gradcheck(args.scope, args.seed)
            print("\n".join(lines))
            return 0 if ok else 1
    except Exception as exc:  # noqa: BLE001
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
