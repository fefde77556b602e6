"""Command-line interface.

Subcommands: phantom-gen, simulate-partial, prompt, refine, vls-mask,
metrics, run.  Flags override config-file values for `run`.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nifti_io, pipeline
from .errors import PromptsegError, RejectedInputError
from .metrics import evaluate_scan
from .oracles import make_phantom_suite
from .prompting import format_prompts, make_box_prompts, parse_prompts
from .refinement import (OrganRefinementState, RefinementConfig,
                         refine_pseudo_label)
from .vls_loss import SupervisionTarget, vls_mask
from .volgrid import LabelMap, ProbVolume, mask_to_labels

log = logging.getLogger("promptseg.cli")


def _read_labels(path, what: str) -> LabelMap:
    img = nifti_io.read_volume(path)
    if not isinstance(img, LabelMap):
        raise RejectedInputError(f"{what} must be a uint8 label image: {path}")
    return img


def _read_probs(path, what: str) -> ProbVolume:
    img = nifti_io.read_volume(path)
    if not isinstance(img, ProbVolume):
        raise RejectedInputError(f"{what} must be a 4D probability image: {path}")
    return img


def cmd_phantom_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = tuple(int(v) for v in args.dims.split(","))
    suite = make_phantom_suite(args.scans, args.organs, dims, args.seed)
    for scan_id, vol, gt in suite:
        nifti_io.write_volume(out / f"{scan_id}.nii", vol)
        nifti_io.write_volume(out / f"{scan_id}.gt.nii", gt)
        man = nifti_io.ScanManifest()
        for c in range(1, gt.num_classes):
            man.names[c] = f"organ{c}"
            man.statuses[c] = "labeled"
        nifti_io.write_manifest(out / f"{scan_id}.manifest", man)
    print(f"wrote {len(suite)} phantom scans ({args.organs} organs, dims {dims}) to {out}")
    return 0


def cmd_simulate_partial(args) -> int:
    gt = _read_labels(args.gt, "--gt")
    num_classes = args.classes or gt.num_classes
    if num_classes != gt.num_classes:
        gt = LabelMap(np.array(gt.data), num_classes)
    sup = pipeline.simulate_partial_labels(gt, num_classes, args.keep_fraction,
                                           args.seed, args.scan_id)
    nifti_io.write_volume(args.out_labels, sup.target.labels)
    man = nifti_io.ScanManifest()
    for c in range(1, num_classes):
        man.statuses[c] = "labeled" if c in sup.labeled else "unlabeled"
    nifti_io.write_manifest(args.out_manifest, man)
    print(f"kept {len(sup.labeled)}/{num_classes - 1} organs: {sorted(sup.labeled)}")
    return 0


def cmd_prompt(args) -> int:
    pred = _read_labels(args.pred, "--pred")
    prompts = make_box_prompts(pred, args.class_id, args.padding)
    text = format_prompts(prompts)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_refine(args) -> int:
    candidate = _read_labels(args.candidate, "--candidate").data > 0
    probs = _read_probs(args.probs, "--probs")
    prompts = parse_prompts(Path(args.prompts).read_text(), class_id=args.class_id)
    config = RefinementConfig(tau_cls=args.tau_cls, delta_roi=args.delta_roi,
                              entropy_gate_active=args.gate_active)
    state = OrganRefinementState(class_id=args.class_id)
    if args.prev_entropy is not None:
        state.mean_entropy_history.append(args.prev_entropy)
    result = refine_pseudo_label(candidate, probs, prompts, config, state,
                                 prob_class=args.prob_class)
    nifti_io.write_volume(args.out, mask_to_labels(result.mask))
    entropy = "" if result.mean_entropy is None else f" mean_entropy={result.mean_entropy:.6f}"
    print(f"{'accept' if result.accepted else 'reject'} reason={result.reason}"
          f" voxels={int(result.mask.sum())}{entropy}")
    return 0


def cmd_vls_mask(args) -> int:
    probs = _read_probs(args.probs, "--probs")
    labels = _read_labels(args.target, "--target")
    man = nifti_io.read_manifest(args.manifest)
    num_classes = max(labels.num_classes, man.num_classes, probs.num_classes)
    labels = LabelMap(np.array(labels.data), num_classes)
    target = SupervisionTarget(labels, man.classes_with_status("pseudo"))
    mask = vls_mask(probs, target)
    nifti_io.write_volume(args.out, mask_to_labels(mask))
    print(f"selected {int(mask.sum())}/{mask.size} voxels")
    return 0


def cmd_metrics(args) -> int:
    hdr, pred = nifti_io.read_nifti(args.pred)
    gt = _read_labels(args.gt, "--gt")
    if not isinstance(pred, LabelMap):
        raise RejectedInputError(f"--pred must be a uint8 label image: {args.pred}")
    num_classes = max(pred.num_classes, gt.num_classes)
    pred = LabelMap(np.array(pred.data), num_classes)
    gt = LabelMap(np.array(gt.data), num_classes)
    spacing = args.spacing or nifti_io.sane_spacing(hdr.pixdim)
    names = {}
    if args.manifest:
        names = nifti_io.read_manifest(args.manifest).names
    ev = evaluate_scan(pred, gt, spacing, hd95_missing=args.hd95_missing)
    rows = [("class", "name", "dsc", "hd95")]
    for cm in ev.per_class:
        rows.append((str(cm.class_id), names.get(cm.class_id, ""),
                     f"{cm.dsc:.4f}", "" if cm.hd95 is None else f"{cm.hd95:.4f}"))
    rows.append(("mean", "", f"{ev.mean_dsc:.4f}",
                 "" if ev.mean_hd95 is None else f"{ev.mean_hd95:.4f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write("class,dsc,hd95\n")
            for cm in ev.per_class:
                hd = "" if cm.hd95 is None else f"{cm.hd95:.6f}"
                fh.write(f"{cm.class_id},{cm.dsc:.6f},{hd}\n")
    return 0


def cmd_run(args) -> int:
    if args.config:
        config = pipeline.load_config(args.config)
    else:
        config = pipeline.PipelineConfig()
    overrides = {}
    for name in ("seed", "keep_fraction", "rounds", "oracle", "out_dir",
                 "supervision", "scans", "test_scans", "organs"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.gate_from_round is not None:
        overrides["entropy_gate_from_round"] = args.gate_from_round
    if args.vls is not None:
        overrides["use_vls"] = args.vls
    if args.oracle_timeout is not None:
        overrides["oracle_timeout"] = args.oracle_timeout
    config = replace(config, **overrides)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("promptseg").addHandler(handler)
    try:
        result = pipeline.run_pipeline(config)
    finally:
        logging.getLogger("promptseg").removeHandler(handler)
        handler.close()
    if result.mean_dsc is not None:
        hd = "n/a" if result.mean_hd95 is None else f"{result.mean_hd95:.3f} mm"
        print(f"mean DSC {result.mean_dsc:.4f}, mean HD95 {hd}  ->  {result.out_dir}")
    else:
        print(f"run complete (no evaluation scans)  ->  {result.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptseg",
        description="Box-prompted pseudo-label refinement for partially labeled 3D segmentation")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic phantom suite")
    p.add_argument("--out", required=True)
    p.add_argument("--scans", type=int, default=1)
    p.add_argument("--organs", type=int, default=3)
    p.add_argument("--dims", default="32,32,32")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("simulate-partial", help="randomly drop organ annotations")
    p.add_argument("--gt", required=True)
    p.add_argument("--keep-fraction", type=float, required=True, dest="keep_fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scan-id", default="scan", dest="scan_id")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--out-labels", required=True, dest="out_labels")
    p.add_argument("--out-manifest", required=True, dest="out_manifest")
    p.set_defaults(func=cmd_simulate_partial)

    p = sub.add_parser("prompt", help="box prompts for one predicted class")
    p.add_argument("--pred", required=True)
    p.add_argument("--class-id", type=int, required=True, dest="class_id")
    p.add_argument("--padding", type=int, default=6)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("refine", help="filter a candidate pseudo-label")
    p.add_argument("--candidate", required=True)
    p.add_argument("--probs", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class-id", type=int, default=1, dest="class_id")
    p.add_argument("--prob-class", type=int, default=None, dest="prob_class")
    p.add_argument("--tau-cls", type=float, default=0.4, dest="tau_cls")
    p.add_argument("--delta-roi", type=int, default=3, dest="delta_roi")
    p.add_argument("--gate-active", action="store_true", dest="gate_active")
    p.add_argument("--prev-entropy", type=float, default=None, dest="prev_entropy")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("vls-mask", help="voxel selection mask from predictions")
    p.add_argument("--probs", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vls_mask)

    p = sub.add_parser("metrics", help="Dice/HD95 between two label maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--spacing", type=lambda s: tuple(float(v) for v in s.split(",")),
                   default=None)
    p.add_argument("--hd95-missing", default="exclude", choices=["exclude", "max_diag"],
                   dest="hd95_missing")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("run", help="run the full pipeline")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--keep-fraction", type=float, default=None, dest="keep_fraction")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--gate-from-round", type=int, default=None, dest="gate_from_round")
    p.add_argument("--oracle", choices=["phantom", "file"], default=None)
    p.add_argument("--oracle-timeout", type=float, default=None, dest="oracle_timeout")
    p.add_argument("--supervision", choices=["full", "partial"], default=None)
    p.add_argument("--vls", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--scans", type=int, default=None)
    p.add_argument("--test-scans", type=int, default=None, dest="test_scans")
    p.add_argument("--organs", type=int, default=None)
    p.add_argument("--out", default=None, dest="out_dir")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PromptsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
