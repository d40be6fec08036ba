"""Command-line entry point: ``cisrnet {prepare,train,sr,eval}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import PROFILES, build_extractor, load_config
from .core import no_grad
from .data import DatasetManifest, PatchSampler, denormalize, normalize, prepare_dataset, read_image, write_png
from .errors import CisrError, ConfigError, DataError
from .metrics import bicubic_predictor, evaluate_dataset, model_predictor, write_reports
from .model import CisrModel
from .trainer import load_checkpoint, run_stage

log = logging.getLogger("cisrnet")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


# -- prepare -----------------------------------------------------------------


def cmd_prepare(args) -> int:
    m = prepare_dataset(
        args.hr_dir,
        args.out,
        scale=args.scale,
        quality=args.quality,
        seed=args.seed,
        split=args.split,
        force=args.force,
        min_lr=args.min_lr,
    )
    print(f"wrote {len(m.pairs)} pairs (x{m.scale}, quality {m.quality}, {m.codec_id}) to {Path(args.out) / 'manifest.json'}")
    return 0


# -- train -------------------------------------------------------------------


def _truncate_log(path: Path, stage: int, step: int) -> None:
    """Drop log records past the resume point so the step counter has no gaps or repeats."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if rec["stage"] < stage or (rec["stage"] == stage and rec["step"] <= step):
            keep.append(line)
    path.write_text("".join(k + "\n" for k in keep))


def _load_pairs(manifest_path: str | None, scale: int, what: str):
    if not manifest_path:
        raise ConfigError(f"no {what} manifest configured (set data.{what}_manifest)")
    m = DatasetManifest.read(manifest_path)
    if m.scale != scale:
        raise ConfigError(f"{what} manifest is x{m.scale} but the model is x{scale}")
    return m.load()


def cmd_train(args) -> int:
    cfg = load_config(args.config).with_overrides(args.set or [])
    if args.train_manifest:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, train_manifest=str(Path(args.train_manifest).resolve())))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")

    pairs = _load_pairs(cfg.data.train_manifest, cfg.model.scale, "train")
    sampler = PatchSampler(pairs, cfg.model.scale, cfg.data.batch_size, cfg.data.patch_size, cfg.np_dtype)
    extractor = build_extractor(cfg)
    log_path = out / "train.jsonl"

    state = None
    if args.resume:
        model, state, _ = load_checkpoint(args.resume, cfg.model)
        if state is None:
            raise DataError(f"{args.resume} holds no training state to resume")
        _truncate_log(log_path, state.stage, state.step)
        start = state.stage
    else:
        start = 1 if args.stage in ("1", "all") else 2
        _truncate_log(log_path, start, 0)
        init = args.init or (out / "stage1-final.npz" if start == 2 else None)
        if init is not None and Path(init).exists():
            model, _, _ = load_checkpoint(init, cfg.model)
            log.info("initialized from %s", init)
        else:
            if args.init:
                raise DataError(f"init checkpoint not found: {args.init}")
            if start == 2:
                log.warning("no stage-1 checkpoint found; stage 2 starts from fresh weights")
            model = CisrModel(cfg.model, seed=cfg.seed, dtype=cfg.np_dtype)

    stages = {"1": [1], "2": [2], "all": [1, 2]}[args.stage]
    if state is not None and state.stage not in stages:
        raise ConfigError(f"checkpoint is mid stage {state.stage} but --stage {args.stage} was requested")
    every = max(1, args.log_every)

    def report(rec):
        if rec["step"] % every == 0:
            log.info("stage %d epoch %d step %d lr %.3g loss %.6f", rec["stage"], rec["epoch"], rec["step"], rec["lr"], rec["loss"])

    for stage in stages:
        if stage < start:
            continue
        schedule = cfg.stage1 if stage == 1 else cfg.stage2
        resumed = state if state is not None and state.stage == stage else None
        run_stage(
            model,
            sampler,
            schedule,
            stage,
            weights=cfg.loss,
            extractor=extractor if stage == 2 else None,
            state=resumed,
            seed=cfg.seed,
            log_path=log_path,
            checkpoint_dir=out,
            checkpoint_every=cfg.checkpoint_every,
            on_step=report,
        )
        print(f"stage {stage} done: {out / f'stage{stage}-final.npz'}")
    return 0


# -- sr ----------------------------------------------------------------------


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"no images in {path}")
        return files
    if not path.exists():
        raise DataError(f"input not found: {path}")
    return [path]


def cmd_sr(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    if args.scale is not None and args.scale != model.scale:
        raise ConfigError(f"checkpoint is x{model.scale}, requested x{args.scale}")
    src = Path(args.input)
    files = _inputs(src)
    out = Path(args.output)
    to_dir = src.is_dir() or len(files) > 1 or out.suffix.lower() != ".png"
    if to_dir:
        out.mkdir(parents=True, exist_ok=True)
    for f in files:
        lr = read_image(f)
        with no_grad():
            coarse, fine = model(normalize(lr, model.dtype))
        target = out / f"{f.stem}_x{model.scale}.png" if to_dir else out
        target.parent.mkdir(parents=True, exist_ok=True)
        write_png(target, denormalize(fine))
        if args.emit_coarse:
            write_png(target.with_name(target.stem + "_coarse.png"), denormalize(coarse))
        print(target)
    return 0


# -- eval --------------------------------------------------------------------


def cmd_eval(args) -> int:
    manifest = DatasetManifest.read(args.manifest)
    pairs = manifest.load()
    reports = []
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        reports.append(
            evaluate_dataset(
                model_predictor(model, args.output), pairs, manifest.scale, f"model-{args.output}", manifest.codec_id, model_scale=model.scale
            )
        )
    if args.baseline == "bicubic":
        reports.append(evaluate_dataset(bicubic_predictor(manifest.scale), pairs, manifest.scale, "bicubic", manifest.codec_id))
    if not reports:
        raise ConfigError("nothing to evaluate: pass --checkpoint and/or --baseline bicubic")
    for r in reports:
        sys.stdout.write(r.to_text())
    if args.out:
        write_reports(reports, args.out)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cisrnet", description="Coarse-to-fine super-resolution of JPEG-compressed images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="degrade a folder of HR PNGs into a training/eval set")
    sp.add_argument("--hr-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    sp.add_argument("--quality", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--split", default="train")
    sp.add_argument("--min-lr", type=int, default=48, help="minimum LR side length (default: patch size 48)")
    sp.add_argument("--force", action="store_true", help="overwrite an existing manifest")
    sp.set_defaults(func=cmd_prepare)

    st = sub.add_parser("train", help="run stage 1, stage 2, or both")
    st.add_argument("--config", default="desk", help=f"profile name {PROFILES} or path to a JSON config")
    st.add_argument("--out", required=True, help="run directory (checkpoints, log, effective config)")
    st.add_argument("--stage", choices=("1", "2", "all"), default="all")
    st.add_argument("--train-manifest", help="shortcut for --set data.train_manifest=...")
    st.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. stage1.lr=2e-4")
    st.add_argument("--resume", help="checkpoint with training state to continue from")
    st.add_argument("--init", help="weights to start from (default for --stage 2: <out>/stage1-final.npz)")
    st.add_argument("--log-every", type=int, default=50)
    st.set_defaults(func=cmd_train)

    ss = sub.add_parser("sr", help="super-resolve images with a checkpoint")
    ss.add_argument("--checkpoint", required=True)
    ss.add_argument("--input", required=True, help="image file or directory")
    ss.add_argument("--output", required=True, help="PNG path (single input) or directory")
    ss.add_argument("--scale", type=int, help="fail unless the checkpoint has this scale")
    ss.add_argument("--emit-coarse", action="store_true", help="also write the coarse-network output")
    ss.set_defaults(func=cmd_sr)

    se = sub.add_parser("eval", help="Y-channel PSNR/SSIM on a manifest")
    se.add_argument("--manifest", required=True)
    se.add_argument("--checkpoint")
    se.add_argument("--baseline", choices=("bicubic", "none"), default="bicubic")
    se.add_argument("--output", choices=("fine", "coarse"), default="fine", help="score the refined or the coarse image")
    se.add_argument("--out", help="directory for eval.txt / eval.csv")
    se.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CisrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
