"""Command-line entry point.

Subcommands: train-tokenizer, train-diffusion, train-ar, reconstruct,
sample, inspect-code. Exit codes: 0 ok, 2 usage or configuration error,
3 runtime failure. Every command writes its outputs (and a resolved
configuration snapshot) under the --out directory only.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import torch

from . import autoregressive as ar
from . import diffusion as diff
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import ShapesCorpus, bits_to_image, image_grid, load_image, save_image
from .metrics import psnr, ssim
from .tokenizer import ConfigurationError
from .training import (INFERENCE_TAU, TrainingError, load_generator_checkpoint,
                       load_tokenizer_checkpoint, train_generator, train_tokenizer)


def _add_common(p: argparse.ArgumentParser, config_required: bool) -> None:
    p.add_argument("--config", required=config_required, help="run configuration (TOML)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key config override; repeatable")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default=None, help="output directory")


def _resolved_config(args, kind: str):
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = Path(args.out if args.out else f"runs/{kind}")
    return cfg, out


def _write_invocation(out: Path, entries: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = ["[invocation]"]
    for key, value in entries.items():
        if isinstance(value, bool):
            lines.append(f"{key} = {'true' if value else 'false'}")
        elif isinstance(value, (int, float)):
            lines.append(f"{key} = {value}")
        else:
            lines.append(f"{key} = {json.dumps(str(value))}")
    (out / "invocation.toml").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train_tokenizer(args) -> int:
    cfg, out = _resolved_config(args, "train-tokenizer")
    summary = train_tokenizer(cfg, out)
    for res, entry in summary["validation"].items():
        print(f"val res={res}: psnr={entry['psnr']:.2f} dB ssim={entry['ssim']:.4f}")
    print(f"checkpoint: {summary['checkpoint']}")
    return 0


def _cmd_train_generator(args, kind: str) -> int:
    cfg, out = _resolved_config(args, f"train-{kind}")
    summary = train_generator(kind, cfg, out)
    if "val_loss" in summary:
        print(f"val loss: {summary['val_loss']:.6f} nats/bit")
    print(f"checkpoint: {summary['checkpoint']}")
    return 0


def cmd_reconstruct(args) -> int:
    model, cfg, _ = load_tokenizer_checkpoint(args.checkpoint)
    out = Path(args.out if args.out else "runs/reconstruct")
    out.mkdir(parents=True, exist_ok=True)
    res_list = args.out_res if args.out_res else [cfg.tokenizer.train_res]
    for res in res_list:
        if res not in cfg.tokenizer.decode_res:
            raise ConfigurationError(
                f"decode resolution {res} not in {cfg.tokenizer.decode_res}")
    _write_invocation(out, {"command": "reconstruct", "checkpoint": args.checkpoint,
                            "images": ",".join(args.images),
                            "out_res": ",".join(map(str, res_list))})
    inputs = torch.stack([load_image(p, cfg.tokenizer.train_res) for p in args.images])
    with torch.no_grad():
        code, _ = model.encode(inputs, INFERENCE_TAU)
        lines = []
        for res in res_list:
            recon = model.decode(code, res)
            originals = [load_image(p, res) for p in args.images]
            rows = [torch.cat([originals[i], recon[i]], dim=-1) for i in range(len(args.images))]
            save_image(image_grid(rows), out / f"reconstruct_{res}.png")
            for i, p in enumerate(args.images):
                lines.append(f"{Path(p).name}\t{res}\t{psnr(originals[i], recon[i]):.4f}\t"
                             f"{ssim(originals[i], recon[i]):.4f}")
    (out / "metrics.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def _parse_condition(raw, kind_spec_mode: str):
    if raw is None:
        return None
    if kind_spec_mode == "class-label":
        try:
            return [int(raw)]
        except ValueError:
            raise ConfigError(f"class-label condition must be an integer, got {raw!r}") from None
    return [raw]


def cmd_sample(args) -> int:
    kind, model, encoder, cfg, _ = load_generator_checkpoint(args.checkpoint)
    if args.algorithm is not None and kind != "diffusion":
        raise ConfigError(
            f"sampler/model kind mismatch: --algorithm applies to diffusion "
            f"checkpoints, this one is {kind!r}")
    alpha = cfg.sampler.alpha if args.alpha is None else args.alpha
    temperature = cfg.sampler.temperature if args.temperature is None else args.temperature
    steps = cfg.sampler.steps if args.steps is None else args.steps
    algorithm = cfg.sampler.algorithm if args.algorithm is None else args.algorithm
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out if args.out else "runs/sample")
    out.mkdir(parents=True, exist_ok=True)
    _write_invocation(out, {
        "command": "sample", "checkpoint": args.checkpoint, "kind": kind,
        "condition": "" if args.condition is None else args.condition,
        "n": args.n, "alpha": alpha, "temperature": temperature, "steps": steps,
        "algorithm": algorithm, "seed": seed, "kv_cache": not args.no_kv_cache,
    })
    g = diff.GuidanceParams(alpha, temperature, steps)
    rng = torch.Generator().manual_seed(seed)
    cond = null = None
    if encoder is not None:
        null = encoder.null_stack(args.n)
        parsed = _parse_condition(args.condition, encoder.spec.mode)
        if parsed is not None:
            cond = encoder.encode(parsed * args.n)
    with torch.no_grad():
        if kind == "diffusion":
            sampler = diff.sample_original if algorithm == 1 else diff.sample_simplified
            codes = sampler(model, g, rng, args.n, cond, null)
            tag = f"alg{algorithm}"
        else:
            codes = ar.ar_sample(model, g, rng, args.n, cond, null,
                                 use_cache=not args.no_kv_cache)
            tag = "ar"
    if args.tokenizer:
        tok, tok_cfg, _ = load_tokenizer_checkpoint(args.tokenizer)
        res = args.out_res if args.out_res else tok_cfg.tokenizer.train_res
        with torch.no_grad():
            images = tok.decode(codes, res)
        tiles = [images[i] for i in range(args.n)]
    else:
        tiles = [bits_to_image(codes[i]) for i in range(args.n)]
    name = f"samples_seed{seed}_a{alpha:g}_t{temperature:g}_S{steps}_{tag}.png"
    save_image(image_grid(tiles), out / name)
    print(out / name)
    return 0


def cmd_inspect_code(args) -> int:
    model, cfg, _ = load_tokenizer_checkpoint(args.checkpoint)
    out = Path(args.out if args.out else "runs/inspect-code")
    out.mkdir(parents=True, exist_ok=True)
    _write_invocation(out, {"command": "inspect-code", "checkpoint": args.checkpoint,
                            "count": args.count, "val": args.val,
                            "images": ",".join(args.images) if args.images else "shapes"})
    res = cfg.tokenizer.train_res
    if args.images:
        batch = torch.stack([load_image(p, res) for p in args.images])
    else:
        corpus = ShapesCorpus(cfg.seed)
        indices = corpus.val_indices(args.count) if args.val else list(range(args.count))
        batch = corpus.batch(indices, res)
    codes = []
    with torch.no_grad():
        for lo in range(0, batch.shape[0], 64):
            code, _ = model.encode(batch[lo:lo + 64], INFERENCE_TAU)
            codes.append(code)
    bits = torch.cat(codes).reshape(batch.shape[0], -1).to(torch.float64)
    n, d = bits.shape
    marginals = bits.mean(dim=0)

    def entropy(p: float) -> float:
        return 0.0 if p in (0.0, 1.0) else -(p * math.log(p) + (1 - p) * math.log(1 - p))

    ones = bits.sum(dim=0)
    if n >= 2:
        differing_pairs = (ones * (n - ones)).sum()
        mean_hamming = float(differing_pairs / (n * (n - 1) / 2))
    else:
        mean_hamming = None
    flagged = [i for i, m in enumerate(marginals.tolist()) if not 0.02 < m < 0.98]
    report = {
        "images": n,
        "bits_per_code": d,
        "marginals": [round(m, 6) for m in marginals.tolist()],
        "entropy_nats": [round(entropy(m), 6) for m in marginals.tolist()],
        "marginal_min": float(marginals.min()),
        "marginal_max": float(marginals.max()),
        "mean_pairwise_hamming": mean_hamming,
        "flagged_bits": flagged,
        "collapse_ok": not flagged,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"bits: {d}  marginal range: [{report['marginal_min']:.4f}, "
          f"{report['marginal_max']:.4f}]")
    print("mean pairwise hamming: "
          + (f"{mean_hamming:.2f}" if mean_hamming is not None else "n/a"))
    print(f"flagged bits (outside (0.02, 0.98)): {len(flagged)}")
    print(f"report: {out / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitlatent",
        description="Binary-latent image tokenizer and generative models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-tokenizer", help="train the image tokenizer (stages 1-3)")
    _add_common(p, config_required=True)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train-diffusion", help="train the diffusion generator")
    _add_common(p, config_required=True)
    p.set_defaults(func=lambda a: _cmd_train_generator(a, "diffusion"))

    p = sub.add_parser("train-ar", help="train the autoregressive generator")
    _add_common(p, config_required=True)
    p.set_defaults(func=lambda a: _cmd_train_generator(a, "ar"))

    p = sub.add_parser("reconstruct", help="encode and decode images, report PSNR/SSIM")
    p.add_argument("--checkpoint", required=True, help="tokenizer checkpoint")
    p.add_argument("--images", nargs="+", required=True, help="input image files")
    p.add_argument("--out-res", type=int, action="append", default=None,
                   help="decode resolution; repeatable")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sample", help="sample codes from a generator and render them")
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    p.add_argument("--tokenizer", default=None, help="tokenizer checkpoint for decoding")
    p.add_argument("--condition", default=None, help="class label or token text")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--algorithm", type=int, choices=(1, 2), default=None,
                   help="diffusion sampler: 1 original, 2 simplified")
    p.add_argument("--alpha", type=float, default=None, help="guidance scale")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--steps", type=int, default=None, help="diffusion sampling steps")
    p.add_argument("--no-kv-cache", action="store_true", help="disable AR KV caching")
    p.add_argument("--out-res", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("inspect-code", help="per-bit statistics of encoded codes")
    p.add_argument("--checkpoint", required=True, help="tokenizer checkpoint")
    p.add_argument("--images", nargs="*", default=None, help="image files (default: shapes corpus)")
    p.add_argument("--count", type=int, default=256, help="shapes corpus size to encode")
    p.add_argument("--val", action="store_true", help="use held-out shapes indices")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_inspect_code)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
