"""``gfenet`` command line: prepare, synthesize, train, enhance, evaluate.

Exit codes: 0 success, 1 usage/config, 2 data, 3 runtime-numeric.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import parse_and_validate
from .data import list_corpus, load_image, prepare_dataset, resize_square, save_image
from .degradation import DegradationPolicy, DonorPool, apply_degradation, sample_spec
from .errors import ConfigError, DataError, GFEError
from .frequency import hfm_to_uint8
from .metrics import evaluate_pairs
from .network import load_checkpoint
from .training import run_training

log = logging.getLogger("gfenet")


def write_run_record(out_dir, command, config=None, **extra):
    """Freeze the resolved configuration and code version into ``out_dir``."""
    doc = {"command": command, "version": __version__, "argv": sys.argv[1:], **extra}
    if config is not None:
        doc.update({"config": config.values, "config_hash": config.config_hash})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def cmd_prepare(args):
    write_run_record(args.output_dir, "prepare")
    rels = prepare_dataset(args.input_dir, args.output_dir, args.manifest)
    print(f"prepared {len(rels)} images into {args.output_dir}")
    return 0


def cmd_synthesize(args):
    policy = DegradationPolicy.load(args.policy) if args.policy else DegradationPolicy()
    if args.views < 1:
        raise ConfigError(f"--views must be >= 1, got {args.views}")
    rels = list_corpus(args.input_dir, args.manifest)
    if not rels:
        raise DataError(f"no images found in {args.input_dir}")
    out = Path(args.output_dir)
    write_run_record(out, "synthesize", policy=policy.to_dict(), views=args.views, seed=args.seed)
    pool = DonorPool(args.input_dir, rels)
    with open(out / "manifest.jsonl", "w") as fh:
        for i, rel in enumerate(rels):
            src = load_image(Path(args.input_dir) / rel)
            donors = pool.excluding(rel)
            for v in range(1, args.views + 1):
                spec = sample_spec(args.seed + i * args.views + v, policy, list(donors), view_index=v)
                view = apply_degradation(src, spec, donors)
                out_rel = (Path(rel).parent / f"{Path(rel).stem}_v{v}.png").as_posix()
                save_image(out / out_rel, view.pixels)
                fh.write(json.dumps({"source": rel, "output": out_rel, **spec.to_record()}) + "\n")
    print(f"wrote {len(rels) * args.views} views to {out}")
    return 0


def cmd_train(args):
    cfg = parse_and_validate(args.config, {
        "data_dir": args.data_dir, "out_dir": args.out_dir, "device": args.device,
        "manifest": args.manifest, "deterministic": True if args.deterministic else None,
    })
    if not cfg.data_dir or not cfg.out_dir:
        raise ConfigError("train needs --data-dir and --out-dir (or data_dir/out_dir in the config)")
    write_run_record(cfg.out_dir, "train", cfg)
    rels = list_corpus(cfg.data_dir, cfg.manifest)
    if not rels:
        raise ConfigError(f"training corpus {cfg.data_dir} is empty")
    images = [(rel, load_image(Path(cfg.data_dir) / rel)) for rel in rels]
    ckpt = run_training(images, cfg.train, cfg.out_dir, cfg.network, cfg.augmentation, cfg.kernel,
                        cfg.policy, resume=args.resume, device=cfg.device,
                        deterministic=cfg.deterministic, meta={"run_config_hash": cfg.config_hash})
    print(f"final checkpoint: {ckpt}")
    return 0


def default_side(h, w, divisor):
    return max(divisor, int(round(min(h, w) / divisor)) * divisor)


def cmd_enhance(args):
    net_cfg = kernel = None
    if args.config:
        cfg = parse_and_validate(args.config)
        net_cfg, kernel = cfg.network, cfg.kernel
    model, _, meta = load_checkpoint(args.checkpoint, net_cfg, kernel, force=args.force, map_location=args.device)
    model.eval()
    divisor = model.cfg.divisor
    if args.size is not None and args.size % divisor:
        raise ConfigError(f"--size {args.size} not divisible by {divisor} (2^{model.cfg.L})")
    rels = list_corpus(args.input_dir, args.manifest)
    out = Path(args.output_dir)
    write_run_record(out, "enhance", checkpoint=str(args.checkpoint), checkpoint_hash=meta.get("config_hash"),
                     size=args.size)
    done, failed = 0, 0
    for rel in rels:
        try:
            img = load_image(Path(args.input_dir) / rel, "unit")
        except DataError as e:
            log.warning("skipping %s: %s", rel, e)
            failed += 1
            continue
        side = args.size or default_side(*img.shape, divisor)
        img = resize_square(img, side).to_range("signed")
        x = torch.from_numpy(img.pixels.transpose(2, 0, 1).copy())[None].to(args.device)
        with torch.no_grad():
            hfm, enh = model(x)
        unit = (enh[0].cpu().numpy().transpose(1, 2, 0) + 1.0) / 2.0
        unit[~img.fov_mask] = 0.0
        out_rel = Path(rel).with_suffix(".png")
        save_image(out / out_rel, unit)
        if args.dump_hfm:
            u8 = hfm_to_uint8(hfm[0].cpu().numpy().transpose(1, 2, 0))
            save_image(out / "hfm" / out_rel, u8.astype(np.float32) / 255.0)
        done += 1
    print(f"enhanced {done} images ({failed} failed) into {out}")
    if rels and done == 0:
        return DataError.exit_code
    return 0


def cmd_evaluate(args):
    write_run_record(Path(args.out).parent, "evaluate", enhanced_dir=args.enhanced_dir,
                     reference_dir=args.reference_dir, in_mask=args.in_mask)
    report = evaluate_pairs(args.enhanced_dir, args.reference_dir, in_mask=args.in_mask)
    report.write(args.out)
    for w in report.warnings:
        log.warning(w)
    print(json.dumps(report.aggregate(), indent=2))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="gfenet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="mirror a corpus and write field-of-view mask sidecars")
    s.add_argument("--input-dir", required=True)
    s.add_argument("--output-dir", required=True)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synthesize", help="write degraded views plus a JSON-lines manifest")
    s.add_argument("--input-dir", required=True)
    s.add_argument("--output-dir", required=True)
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--policy", help="degradation policy JSON file")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("train", help="train GFE-Net")
    s.add_argument("--config")
    s.add_argument("--data-dir")
    s.add_argument("--out-dir")
    s.add_argument("--manifest")
    s.add_argument("--resume")
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--device", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="enhance a directory of images with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input-dir", required=True)
    s.add_argument("--output-dir", required=True)
    s.add_argument("--size", type=int)
    s.add_argument("--dump-hfm", action="store_true")
    s.add_argument("--config", help="runtime config whose network hash must match the checkpoint")
    s.add_argument("--force", action="store_true")
    s.add_argument("--manifest")
    s.add_argument("--device", default=os.environ.get("GFE_DEVICE", "cpu"))
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("evaluate", help="SSIM/PSNR of enhanced images against references")
    s.add_argument("--enhanced-dir", required=True)
    s.add_argument("--reference-dir", required=True)
    s.add_argument("--out", default="report.csv")
    s.add_argument("--in-mask", action="store_true")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GFEError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
