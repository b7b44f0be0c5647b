"""
Command handlers for the d2hnet command line.
"""
import argparse
import logging
import os
from typing import Optional

import numpy as np

from d2hnet import config
from d2hnet.api.models import RunConfig, load_noise_profile
from d2hnet.core.gradcheck import gradient_check
from d2hnet.nn.pipeline import two_phase_infer
from d2hnet.services.augment_service import AugmentService
from d2hnet.services.eval_service import EvalService
from d2hnet.services.file_service import D2T_KIND_FEATURE, FileService
from d2hnet.services.noise_service import NoiseService
from d2hnet.services.selftest_service import SelftestService
from d2hnet.services.synth_service import SynthService
from d2hnet.services.train_service import TrainService, checkpoint_name
from d2hnet.utils.errors import ShapeError
from d2hnet.utils.seeding import derive_rng
from d2hnet.utils.validators import validate_range

logger = logging.getLogger(__name__)

SELECTED_MANIFEST_NAME = "manifest_selected.tsv"


def _default_checkpoint(args: argparse.Namespace, given: Optional[str], stage: str) -> str:
    return given or os.path.join(args.out, checkpoint_name(stage))


def _parse_settings(text: str) -> list[tuple[str, tuple[str, ...]]]:
    """'full,only-long,no-cutnoise+no-color-adjust' -> [(name, flags), ...]."""
    settings = []
    for name in (part.strip() for part in text.split(",")):
        if not name:
            continue
        flags = () if name == "full" else tuple(name.split("+"))
        unknown = [f for f in flags if f not in config.ABLATION_FLAGS]
        if unknown:
            raise ValueError(f"unknown ablation flag(s) {unknown} in setting '{name}'")
        settings.append((name, flags))
    if not settings:
        raise ValueError("no ablation settings given")
    return settings


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    dirs = SynthService.video_dirs(args.frames)
    if not dirs:
        raise ValueError(f"{args.frames}: no PNG frames or video sub-directories found")
    result = SynthService.build_dataset(dirs, cfg.synth, args.out, cfg.seed, args.threads, burst=args.burst)
    print(f"{len(result.train)} tuples -> {result.manifest_path}")
    if result.val_manifest_path:
        print(f"{len(result.val)} validation tuples -> {result.val_manifest_path}")
    return 0


def cmd_varmap(args: argparse.Namespace, cfg: RunConfig) -> int:
    entries = FileService.read_manifest(args.manifest)
    out_dir = os.path.join(args.out, "varmap")
    for entry in entries:
        images = FileService.read_tuple(entry)
        vmap = AugmentService.variance_map(images["l"], images["l_last"], cfg.augment.varmap_window)
        stem = os.path.join(out_dir, entry.tuple_id.replace("#", "_"))
        FileService.write_png(f"{stem}.png", vmap)
        FileService.write_d2t(f"{stem}.d2t", vmap, D2T_KIND_FEATURE)
        print(f"{entry.tuple_id}\tmean {float(vmap.mean()):.6f}")
    logger.info(f"Wrote {len(entries)} variance map(s) to {out_dir}")
    return 0


def cmd_select(args: argparse.Namespace, cfg: RunConfig) -> int:
    entries = FileService.read_manifest(args.manifest)
    augmented = EvalService.selection_manifest(entries, cfg, args.threads)
    path = os.path.join(args.out, SELECTED_MANIFEST_NAME)
    out_root = os.path.abspath(args.out)
    # tuple directories are stored relative to the new manifest
    relocated = [
        e.model_copy(update={"directory": os.path.relpath(os.path.abspath(e.directory), out_root)})
        for e in augmented
    ]
    FileService.write_manifest(path, relocated)
    print(f"{len(augmented) - len(entries)} selected squares added -> {path}")
    return 0


def cmd_augment_preview(args: argparse.Namespace, cfg: RunConfig) -> int:
    entries = FileService.read_manifest(args.manifest)
    trainer = TrainService(cfg, args.threads)
    out_dir = os.path.join(args.out, "augment_preview")
    for i in range(args.count):
        entry = entries[i % len(entries)]
        sample = trainer.make_sample(FileService.read_tuple(entry), i)
        stem = os.path.join(out_dir, f"{i:04d}")
        FileService.write_png(f"{stem}_long.png", sample.long_img)
        FileService.write_png(f"{stem}_short.png", sample.short_img)
        FileService.write_png(f"{stem}_target.png", np.clip(sample.target, 0.0, 1.0))
        if sample.cutnoise_mask is not None:
            FileService.write_png(f"{stem}_cutnoise.png", sample.cutnoise_mask)
        applied = ",".join(k for k, v in sample.applied.items() if v) or "none"
        print(f"{i:04d}\t{entry.tuple_id}\t{applied}")
    return 0


def cmd_noise_sim(args: argparse.Namespace, cfg: RunConfig) -> int:
    isp_cfg, params = cfg.isp, cfg.noise
    if args.profile:
        isp_cfg, params = load_noise_profile(args.profile, cfg)
    image = FileService.read_rgb(args.image)
    rng = derive_rng(cfg.seed, 0, "noise_short")
    iso = args.iso if args.iso is not None else float(rng.uniform(*params.iso_short_range))
    validate_range(iso, params.iso_sensor_range, "iso")
    isp = NoiseService.sample_isp(isp_cfg, rng)
    raw = NoiseService.add_noise(NoiseService.unprocess(image, isp), iso, params, rng)
    noisy = NoiseService.process(raw, isp)
    path = os.path.join(args.out, "noisy.png")
    FileService.write_png(path, noisy)
    print(f"ISO {iso:.1f}, wr {isp.wr:.4f}, wb {isp.wb:.4f} -> {path}")
    return 0


def cmd_train_deblur(args: argparse.Namespace, cfg: RunConfig) -> int:
    entries = FileService.read_manifest(args.manifest)
    result = TrainService(cfg, args.threads).train_stage(entries, "deblur", args.out)
    print(f"deblur checkpoint -> {result.checkpoint_path}")
    return 0


def cmd_train_enhance(args: argparse.Namespace, cfg: RunConfig) -> int:
    entries = FileService.read_manifest(args.manifest)
    deblur_path = _default_checkpoint(args, args.deblur, "deblur")
    result = TrainService(cfg, args.threads).train_stage(entries, "enhance", args.out, deblur_checkpoint=deblur_path)
    print(f"enhance checkpoint -> {result.checkpoint_path}")
    return 0


def cmd_infer(args: argparse.Namespace, cfg: RunConfig) -> int:
    long_img = FileService.read_rgb(args.long)
    short_img = FileService.read_rgb(args.short)
    if long_img.shape != short_img.shape:
        raise ShapeError(f"long {long_img.shape[2:]} and short {short_img.shape[2:]} images differ in size")
    trainer = TrainService(cfg, args.threads)
    enhance_path = None if cfg.model.has("deblur-only") else _default_checkpoint(args, args.enhance, "enhance")
    deblur, enhance, warnings = trainer.load_models(_default_checkpoint(args, args.deblur, "deblur"), enhance_path)
    for warning in warnings:
        logger.warning(warning)
    result = two_phase_infer(long_img, short_img, deblur, enhance, cfg.model, clamp=cfg.eval.clamp)
    FileService.write_png(os.path.join(args.out, "y.png"), result.y)
    FileService.write_png(os.path.join(args.out, "t.png"), result.t)
    print(f"y.png, t.png -> {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    entries = FileService.read_manifest(args.manifest)
    trainer = TrainService(cfg, args.threads)
    enhance_path = None if cfg.model.has("deblur-only") else _default_checkpoint(args, args.enhance, "enhance")
    deblur, enhance, warnings = trainer.load_models(_default_checkpoint(args, args.deblur, "deblur"), enhance_path)
    report = EvalService.evaluate(
        entries, deblur, enhance, cfg,
        cache_dir=os.path.join(args.out, "validation_cache"),
        manifest_hash=FileService.manifest_hash(args.manifest),
        threads=args.threads,
        warnings=warnings,
    )
    EvalService.write_report(os.path.join(args.out, config.REPORT_NAME), report)
    print(EvalService.summary_table([report]))
    return 0


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig) -> int:
    settings = _parse_settings(args.settings)
    train_entries = FileService.read_manifest(args.manifest)
    val_entries = FileService.read_manifest(args.val_manifest or args.manifest)
    reports = EvalService.run_ablation(
        settings, train_entries, val_entries, cfg, args.out,
        manifest_hash=FileService.manifest_hash(args.val_manifest or args.manifest),
        threads=args.threads,
    )
    print(EvalService.summary_table(reports))
    return 0


def cmd_gradcheck(args: argparse.Namespace, cfg: Optional[RunConfig]) -> int:
    seed = cfg.seed if cfg is not None else config.DEFAULT_SEED
    cases = SelftestService.gradient_cases(seed)
    if args.op:
        cases = [c for c in cases if c[0] == args.op]
        if not cases:
            names = ", ".join(c[0] for c in SelftestService.gradient_cases(seed))
            raise ValueError(f"unknown op '{args.op}' (choose from {names})")
    ok = True
    for name, fn, inputs, tolerances in cases:
        report = gradient_check(fn, inputs, h=args.h, tol=args.tol, op=name, tolerances=tolerances,
                                rng=derive_rng(seed, 1, "selftest"))
        for entry in report.entries:
            status = "PASS" if entry.passed else "FAIL"
            print(f"{status} {name}/{entry.name}: rel {entry.max_rel_error:.3e} abs {entry.max_abs_error:.3e} "
                  f"kinks {entry.kinks}")
        ok = ok and report.passed
    return 0 if ok else 2


def cmd_selftest(args: argparse.Namespace, cfg: Optional[RunConfig]) -> int:
    seed = cfg.seed if cfg is not None else config.DEFAULT_SEED
    results = SelftestService.run(seed)
    for result in results:
        print(result.line())
    return 0 if all(r.passed for r in results) else 2


def setup_commands(subparsers, common: argparse.ArgumentParser) -> None:
    """Register every subcommand; each sets ``handler``."""

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, parents=[common], help=help_text, description=help_text)
        sub.set_defaults(handler=handler, command=name)
        return sub

    p = add("synth", cmd_synth, "Synthesize exposure tuples from frame directories")
    p.add_argument("--frames", required=True, help="Directory of PNG frames, or of per-video frame directories")
    p.add_argument("--burst", action="store_true",
                   help="Also write synth.burst_count successive short exposures per tuple")

    p = add("varmap", cmd_varmap, "Write variance maps (PNG heatmap and D2T) for every tuple")
    p.add_argument("--manifest", required=True)

    p = add("select", cmd_select, "Add the blurriest squares to a training manifest")
    p.add_argument("--manifest", required=True)

    p = add("augment-preview", cmd_augment_preview, "Write seeded training samples for inspection")
    p.add_argument("--manifest", required=True)
    p.add_argument("--count", type=int, default=4, help="Number of samples")

    p = add("noise-sim", cmd_noise_sim, "Simulate a noisy capture of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--iso", type=float, default=None, help="ISO (default: drawn from the short-exposure range)")
    p.add_argument("--profile", default=None, help="Device noise profile (flat key = value)")

    p = add("train-deblur", cmd_train_deblur, "Train DeblurNet")
    p.add_argument("--manifest", required=True)

    p = add("train-enhance", cmd_train_enhance, "Train EnhanceNet on a frozen DeblurNet")
    p.add_argument("--manifest", required=True)
    p.add_argument("--deblur", default=None, help="DeblurNet checkpoint (default: <out>/deblur.d2ck)")

    p = add("infer", cmd_infer, "Restore one long/short pair; writes y.png and t.png")
    p.add_argument("--long", required=True)
    p.add_argument("--short", required=True)
    p.add_argument("--deblur", default=None, help="DeblurNet checkpoint (default: <out>/deblur.d2ck)")
    p.add_argument("--enhance", default=None, help="EnhanceNet checkpoint (default: <out>/enhance.d2ck)")

    p = add("eval", cmd_eval, "Evaluate checkpoints on a validation manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--deblur", default=None)
    p.add_argument("--enhance", default=None)

    p = add("ablate", cmd_ablate, "Retrain and evaluate under several ablation settings")
    p.add_argument("--manifest", required=True, help="Training manifest")
    p.add_argument("--val-manifest", default=None, help="Validation manifest (default: the training manifest)")
    p.add_argument("--settings", default=",".join(("full",) + config.ABLATION_FLAGS),
                   help="Comma-separated settings; 'full' or flags joined with '+'")

    p = add("gradcheck", cmd_gradcheck, "Finite-difference check of every differentiable op")
    p.add_argument("--op", default=None, help="Check a single op")
    p.add_argument("--h", type=float, default=1e-6, help="Central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="Relative error tolerance")

    add("selftest", cmd_selftest, "Run the invariant suite")
