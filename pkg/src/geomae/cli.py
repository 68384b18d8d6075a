"""Command-line entry point: ``geomae <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 a verification check
(``gradcheck``) ran but failed its threshold.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("geomae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; usage errors here are 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ranged(kind, lo=None, hi=None, lo_open=False):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}")
        if lo is not None and (value <= lo if lo_open else value < lo):
            raise argparse.ArgumentTypeError(f"{value} must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and value > hi:
            raise argparse.ArgumentTypeError(f"{value} must be <= {hi}")
        return value
    return parse


SEED = _ranged(int, 0, 2 ** 64 - 1)
POSITIVE = _ranged(int, 1)
RATIO = _ranged(float, 0.0, 1.0)


def build_parser() -> argparse.ArgumentParser:
    from .masking import SCHEMES
    from .synthgen import CATALOG, PATTERNS

    parser = _Parser(prog="geomae", description="Multi-source masked autoencoder toolkit.")
    parser.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic region shards")
    p.add_argument("--regions", type=POSITIVE, required=True, help="number of regions to generate")
    p.add_argument("--seed", type=SEED, default=0, help="generator seed (64-bit)")
    p.add_argument("--profile", action="append", choices=sorted(CATALOG), required=True,
                   help="source profile to include; repeat for several sources")
    p.add_argument("--out", required=True, help="output directory for shard-*.evsh files")
    p.add_argument("--shard-size", type=POSITIVE, default=64, help="regions per shard file")
    p.add_argument("--pattern", choices=PATTERNS, default="smooth-field", help="spatial pattern family")
    p.add_argument("--revisits", type=POSITIVE, default=None,
                   help="fixed number of timesteps per source (default: per-source catalogue range)")

    p = sub.add_parser("stats", help="per-band mean/std of every source in a shard directory")
    p.add_argument("--data", required=True, help="directory of .evsh shards")

    p = sub.add_parser("curate", help="rank crop windows by land-cover entropy and cloud cover")
    p.add_argument("--input", required=True, help="directory of .evsh shards holding sentinel2-scl regions")
    p.add_argument("--window", type=POSITIVE, default=384, help="crop window side in pixels")
    p.add_argument("--cloud-max", type=RATIO, default=0.3, help="drop windows with cloud fraction >= this")
    p.add_argument("--top-k", type=POSITIVE, default=1, help="windows kept per capture")

    p = sub.add_parser("mask-demo", help="print mask statistics and an ASCII grid")
    p.add_argument("--scheme", choices=SCHEMES, default="tube", help="masking scheme")
    p.add_argument("--ratio", type=RATIO, default=0.75, help="masking ratio (tube stage for combined)")
    p.add_argument("--t", type=POSITIVE, default=4, help="timesteps")
    p.add_argument("--s", type=POSITIVE, default=1, help="sources")
    p.add_argument("--p", type=POSITIVE, default=196, help="patches per image")
    p.add_argument("--seed", type=SEED, default=0, help="mask seed")

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining on a shard directory")
    p.add_argument("--data", required=True, help="directory of .evsh shards")
    p.add_argument("--tasks", default=None,
                   help="task list as 'a,b;c' (sources joined by ',', tasks by ';'); default: one per source plus all")
    p.add_argument("--mask", choices=SCHEMES, default="tube", help="masking scheme")
    p.add_argument("--ratio", type=RATIO, default=0.9, help="masking ratio")
    p.add_argument("--epochs", type=POSITIVE, default=100, help="training epochs")
    p.add_argument("--warmup", type=_ranged(int, 0), default=10, help="warmup epochs")
    p.add_argument("--blr", type=_ranged(float, 0.0, lo_open=True), default=1.32e-4,
                   help="base learning rate; lr = blr * batch / 256")
    p.add_argument("--batch", type=POSITIVE, default=32, help="effective batch size")
    p.add_argument("--workers", type=POSITIVE, default=1, help="synchronous workers (must divide --batch)")
    p.add_argument("--seed", type=SEED, default=0, help="run seed")
    p.add_argument("--out", required=True, help="output directory for metrics.jsonl and checkpoint.emck")
    p.add_argument("--steps", type=POSITIVE, default=None, help="override total steps (desk runs)")
    p.add_argument("--warmup-steps", type=_ranged(int, 0), default=None, help="override warmup steps")
    p.add_argument("--max-timesteps", type=POSITIVE, default=None, help="cut every source to this many timesteps")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of a small float64 model")
    p.add_argument("--seed", type=SEED, default=0, help="seed for parameters, data and coordinate choice")
    p.add_argument("--eps", type=_ranged(float, 0.0, lo_open=True), default=1e-4, help="central-difference step")
    p.add_argument("--params", type=POSITIVE, default=200, help="scalar parameters to check")
    p.add_argument("--tol", type=_ranged(float, 0.0, lo_open=True), default=1e-4,
                   help="pass threshold on max relative error")

    p = sub.add_parser("reconstruct", help="write input/masked/reconstruction PPM panels")
    p.add_argument("--ckpt", required=True, help="checkpoint.emck from pretrain")
    p.add_argument("--data", required=True, help="directory of .evsh shards")
    p.add_argument("--out", required=True, help="output directory for .ppm panels")
    p.add_argument("--region", type=_ranged(int, 0), default=0, help="index of the region to reconstruct")
    p.add_argument("--seed", type=SEED, default=0, help="mask seed")
    return parser


# -- subcommands ----------------------------------------------------------------------------

def _load_regions(directory):
    from .region_store import read_shard, shard_paths

    if not os.path.isdir(directory):
        raise FileNotFoundError(f"no such directory: {directory}")
    paths = shard_paths(directory)
    if not paths:
        raise FileNotFoundError(f"no .evsh shards in {directory}")
    regions = []
    for path in paths:
        regions.extend(read_shard(path))
    return regions


def cmd_synth(args) -> int:
    from .synthgen import SynthConfig, synth_dataset

    revisits = {} if args.revisits is None else {p: (args.revisits, args.revisits) for p in args.profile}
    try:
        config = SynthConfig(seed=args.seed, profiles=list(args.profile), revisits=revisits,
                             spatial_pattern=args.pattern)
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    paths = synth_dataset(config, args.regions, args.out, args.shard_size)
    print(json.dumps({"shards": paths, "regions": args.regions}))
    return EXIT_OK


def cmd_stats(args) -> int:
    from .tokenizer import BandStatsAccumulator

    acc = {}
    for region in _load_regions(args.data):
        for name, src in region.sources.items():
            acc.setdefault(name, BandStatsAccumulator()).update(src.data)
    out = {}
    for name in sorted(acc):
        st = acc[name].result()
        out[name] = {"mean": st.mean.tolist(), "std": st.std.tolist()}
    print(json.dumps(out, indent=1))
    return EXIT_OK


def cmd_curate(args) -> int:
    from .curation import rank_candidates, score_capture
    from .synthgen import CLOUD_BAND, SCL_BAND

    regions = _load_regions(args.input)
    if not any("sentinel2-scl" in r.sources for r in regions):
        raise ValueError("no sentinel2-scl source in the input shards")
    rows = []
    for region in regions:
        src = region.sources.get("sentinel2-scl")
        if src is None:
            continue
        for k in range(src.t):
            cands = score_capture(src.data[k, SCL_BAND], src.data[k, CLOUD_BAND], args.window)
            for c in rank_candidates(cands, args.top_k, args.cloud_max):
                rows.append({"region_id": region.region_id, "timestep": k, "offset": list(c.offset),
                             "cloud_fraction": c.cloud_fraction, "scl_entropy": c.scl_entropy})
    for row in rows:
        print(json.dumps(row))
    return EXIT_OK


def cmd_mask_demo(args) -> int:
    from .masking import make_mask, render_ascii

    try:
        mask = make_mask(args.scheme, args.t, args.s, args.p, args.ratio, np.random.default_rng(args.seed))
    except ValueError as exc:
        raise UsageError(str(exc))
    per_slice = mask.per_slice()
    print(f"scheme: {args.scheme}  lattice: t={args.t} s={args.s} p={args.p}")
    print(f"masked per slice: {int(per_slice.flat[0])}" if np.all(per_slice == per_slice.flat[0])
          else f"masked per slice: {per_slice.tolist()}")
    print(f"masked total: {mask.masked_count}  visible: {mask.n_visible}")
    print(render_ascii(mask))
    return EXIT_OK


def _parse_tasks(text):
    if text is None:
        return None
    tasks = [[s.strip() for s in group.split(",") if s.strip()] for group in text.split(";") if group.strip()]
    if not tasks:
        raise UsageError("--tasks is empty")
    return tasks


def cmd_pretrain(args) -> int:
    from .trainer import Checkpoint, TrainConfig, train

    if args.batch % args.workers:
        raise UsageError("--workers must divide --batch")
    if args.warmup >= args.epochs and args.steps is None:
        raise UsageError("--warmup must be smaller than --epochs")
    config = TrainConfig(effective_batch=args.batch, base_lr=args.blr, epochs=args.epochs,
                         warmup_epochs=args.warmup, mask_scheme=args.mask, mask_ratio=args.ratio,
                         seed=args.seed, workers=args.workers, tasks=_parse_tasks(args.tasks),
                         steps=args.steps, warmup_steps=args.warmup_steps, max_timesteps=args.max_timesteps)
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    regions = _load_regions(args.data)
    resume = Checkpoint.load(args.resume) if args.resume else None
    log.info("config %s", json.dumps(config.to_dict(), sort_keys=True))
    try:
        ckpt, metrics = train(config, regions, out_dir=args.out, resume=resume)
    except ValueError as exc:
        # task/source mismatches surface only once the data is known
        raise UsageError(str(exc))
    last = metrics[-1] if metrics else {}
    print(json.dumps({"steps": ckpt.step, "final_loss": last.get("loss"),
                      "checkpoint": os.path.join(args.out, "checkpoint.emck")}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import SMALL_CONFIG, check_model
    from .model import ModelConfig

    config = ModelConfig(**SMALL_CONFIG)
    err = check_model(config, {"sentinel1": 2, "sentinel2": 3}, eps=args.eps, n_params=args.params, seed=args.seed)
    ok = err < args.tol
    print(json.dumps({"max_rel_error": err, "tol": args.tol, "pass": ok}))
    return EXIT_OK if ok else EXIT_CHECK


def _to_rgb(image: np.ndarray) -> np.ndarray:
    """``(c, H, W)`` float to ``(H, W, 3)`` uint8 with a 2-98 percentile stretch."""
    if image.shape[0] >= 13:
        chans = image[[3, 2, 1]]  # red, green, blue of the Sentinel-2 band order
    elif image.shape[0] >= 3:
        chans = image[:3]
    else:
        chans = np.repeat(image[:1], 3, axis=0)
    lo, hi = np.percentile(chans, [2, 98])
    scaled = np.clip((chans - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    return (scaled * 255).round().astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, rgb: np.ndarray):
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def cmd_reconstruct(args) -> int:
    import torch

    from .model import build_batch, sample_masks
    from .tokenizer import patchify, unpatchify
    from .trainer import Checkpoint

    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.build_model().eval()
    cfg = ckpt.config
    regions = _load_regions(args.data)
    if args.region >= len(regions):
        raise UsageError(f"--region {args.region} out of range (have {len(regions)})")
    region = regions[args.region]
    names = [n for n in model.source_bands if n in region.sources]
    if not names:
        raise ValueError(f"region {region.region_id} has none of the checkpoint's sources")
    t = min(region.sources[n].t for n in names)
    if cfg.max_timesteps is not None:
        t = min(t, cfg.max_timesteps)
    batch = build_batch([region], names, ckpt.stats(), cfg.model.image_size, model.dtype, t=t)
    rng = np.random.default_rng(args.seed)
    mask = sample_masks(cfg.mask_scheme, cfg.mask_ratio, 1, batch.t, len(names), cfg.model.num_patches, rng)
    with torch.no_grad():
        preds = model(batch, mask)
    os.makedirs(args.out, exist_ok=True)
    P, G = cfg.model.patch, cfg.model.grid
    written = []
    for si, name in enumerate(names):
        image = batch.images[name][0]  # (t, c, S, S)
        c = image.shape[1]
        tokens = patchify(image, P)
        pred = preds[name][0]
        if cfg.model.norm_pix:
            # predictions live in per-patch normalized units; undo with the true patch stats
            mean = tokens.mean(dim=-1, keepdim=True)
            std = (tokens.var(dim=-1, unbiased=False, keepdim=True) + 1e-6) ** 0.5
            pred = pred * std + mean
        m = mask[0, :, si].unsqueeze(-1)
        blanked = torch.where(m, torch.zeros_like(tokens), tokens)
        pasted = torch.where(m, pred, tokens)
        for k in range(image.shape[0]):
            panels = [image[k], unpatchify(blanked[k], c, P, G), unpatchify(pasted[k], c, P, G)]
            for label, panel in zip(("input", "masked", "reconstructed"), panels):
                path = os.path.join(args.out, f"{region.region_id}-{name}-t{k}-{label}.ppm")
                write_ppm(path, _to_rgb(panel.double().numpy()))
                written.append(path)
    print(json.dumps({"panels": len(written), "out": args.out}))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "curate": cmd_curate,
    "mask-demo": cmd_mask_demo,
    "pretrain": cmd_pretrain,
    "gradcheck": cmd_gradcheck,
    "reconstruct": cmd_reconstruct,
}


def run(argv: Optional[List[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .region_store import ShardError, ValidationError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("geomae: error: a subcommand is required")
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        resolved = {k: v for k, v in vars(args).items() if k != "quiet"}
        log.info("resolved %s", json.dumps(resolved, sort_keys=True))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return int(exc.code or 0)
    except (FileNotFoundError, ShardError, ValidationError, CheckpointError, KeyError, ValueError) as exc:
        print(f"geomae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
