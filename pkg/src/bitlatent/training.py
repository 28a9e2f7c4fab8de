"""Training loops, optimizer configuration, checkpointing, and datasets.

One `torch.Generator` seeded from the run config drives every stochastic
choice in a loop (batch order, quantizer sampling, timesteps, condition
dropout, crops) in a fixed draw order, and its state is stored in every
checkpoint, so resumed runs continue bit-exactly at a fixed thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
from torch import Tensor, nn

from . import autoregressive as ar
from . import diffusion as diff
from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import ConditionEncoder, ConditionSpec, load_vocab
from .config import (ConfigError, RunConfig, config_from_flat, flatten_config,
                     save_config)
from .data import ShapesCorpus, load_idx_bits
from .metrics import psnr, ssim
from .tokenizer import RandomFeatureExtractor, Tokenizer, reconstruction_loss

STAGE_TAU = {1: 0.5, 2: 0.1, 3: 0.1}
INFERENCE_TAU = 0.0
PERCEPTUAL_SEED = 1234
TRAIN_INDEX_RANGE = 1_000_000


class TrainingError(RuntimeError):
    pass


def lr_schedule(step: int, lr: float, warmup_steps: int) -> float:
    """Linear ramp 0 -> lr over the warmup, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps <= 0:
        return lr
    return lr * min(1.0, step / warmup_steps)


def make_optimizer(params, lr: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.95), weight_decay=0.01)


@dataclass
class AdversarialHook:
    """Stage-3 adversarial plug-in: a generator-side loss and its weighting."""

    generator_loss: Callable[[Tensor, Tensor], Tensor]
    weight: Callable[[int, float, float], float] = lambda step, rec, adv: 1.0


class MetricsLog:
    """Append-only TSV: step, loss, lr, wall-clock milliseconds per step."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, step: int, loss: float, lr: float, wall_ms: float) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{step}\t{loss:.6f}\t{lr:.6g}\t{wall_ms:.1f}\n")


def generator_state_hex(gen: torch.Generator) -> str:
    return gen.get_state().numpy().tobytes().hex()


def restore_generator(gen: torch.Generator, state_hex: str) -> None:
    raw = bytes.fromhex(state_hex)
    gen.set_state(torch.frombuffer(bytearray(raw), dtype=torch.uint8).clone())


def _module_tensors(prefix: str, module: nn.Module) -> dict:
    return {f"{prefix}.{name}": value for name, value in module.state_dict().items()}


def _optimizer_tensors(optimizer: torch.optim.Optimizer) -> dict:
    out = {}
    state = optimizer.state_dict()["state"]
    for idx, entry in state.items():
        for key, value in entry.items():
            out[f"optim.{idx}.{key}"] = value if torch.is_tensor(value) else torch.tensor(float(value))
    return out


def _restore_optimizer(optimizer: torch.optim.Optimizer, tensors: dict) -> None:
    sd = optimizer.state_dict()
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        entry = state.setdefault(int(idx), {})
        entry[key] = value.clone()
    if state:
        sd["state"] = state
        optimizer.load_state_dict(sd)


def save_training_checkpoint(
    path,
    cfg: RunConfig,
    kind: str,
    step: int,
    modules: dict[str, nn.Module],
    optimizer: torch.optim.Optimizer | None = None,
    rng: torch.Generator | None = None,
) -> None:
    header = {"schema": "1", "kind": kind, "stage": str(cfg.train.stage),
              "step": str(step), "seed": str(cfg.seed)}
    if rng is not None:
        header["rng"] = generator_state_hex(rng)
    header.update(flatten_config(cfg))
    tensors: dict = {}
    for prefix, module in modules.items():
        tensors.update(_module_tensors(prefix, module))
    if optimizer is not None:
        tensors.update(_optimizer_tensors(optimizer))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, header, tensors)


def _restore_module(module: nn.Module, prefix: str, tensors: dict) -> None:
    state = {name[len(prefix) + 1:]: value for name, value in tensors.items()
             if name.startswith(prefix + ".")}
    if not state:
        raise TrainingError(f"checkpoint holds no '{prefix}.*' tensors")
    module.load_state_dict(state)


def load_tokenizer_checkpoint(path) -> tuple[Tokenizer, RunConfig, dict]:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "tokenizer":
        raise TrainingError(f"{path}: expected a tokenizer checkpoint, found kind={header.get('kind')!r}")
    cfg = config_from_flat(header)
    model = Tokenizer(cfg.tokenizer, torch.Generator().manual_seed(0))
    _restore_module(model, "model", tensors)
    model.eval()
    return model, cfg, header


def condition_spec(cfg: RunConfig) -> ConditionSpec:
    vocab = load_vocab(cfg.condition.vocab_file) if cfg.condition.vocab_file else ()
    return ConditionSpec(
        mode=cfg.condition.mode,
        num_classes=cfg.condition.num_classes,
        vocab=vocab,
        max_len=cfg.condition.max_len,
        dropout=cfg.condition.dropout,
    )


def build_generator(kind: str, cfg: RunConfig, generator: torch.Generator):
    m = cfg.model
    if kind == "diffusion":
        model = diff.Denoiser(
            diff.DenoiserConfig(m.tokens, m.code_bits, m.hidden, m.depth, m.heads), generator
        )
    elif kind == "ar":
        model = ar.ARModel(
            ar.ARConfig(m.tokens, m.code_bits, m.hidden, m.depth, m.heads), generator
        )
    else:
        raise ConfigError(f"unknown generator kind {kind!r}")
    return model


def load_generator_checkpoint(path):
    """Returns (kind, model, condition encoder or None, cfg, header)."""
    header, tensors = load_checkpoint(path)
    kind = header.get("kind")
    if kind not in ("diffusion", "ar"):
        raise TrainingError(f"{path}: expected a generator checkpoint, found kind={kind!r}")
    cfg = config_from_flat(header)
    gen = torch.Generator().manual_seed(0)
    model = build_generator(kind, cfg, gen)
    _restore_module(model, "model", tensors)
    model.eval()
    encoder = None
    if any(name.startswith("cond.") for name in tensors):
        encoder = ConditionEncoder(condition_spec(cfg), cfg.model.depth, cfg.model.hidden, gen)
        _restore_module(encoder, "cond", tensors)
    return kind, model, encoder, cfg, header


class BitsData:
    """Pre-binarized codes with optional labels, split train/validation."""

    def __init__(self, bits: Tensor, labels: Tensor | None, val_count: int):
        n = bits.shape[0]
        if not 0 < val_count < n:
            raise ConfigError(f"data.val_count must lie in (0, {n})")
        self.train_bits = bits[: n - val_count]
        self.val_bits = bits[n - val_count:]
        self.train_labels = labels[: n - val_count] if labels is not None else None
        self.val_labels = labels[n - val_count:] if labels is not None else None

    @property
    def train_size(self) -> int:
        return self.train_bits.shape[0]


def _write_snapshot(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.toml")


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def tokenizer_validation(
    model: Tokenizer, corpus: ShapesCorpus, val_size: int, resolutions
) -> dict[int, dict[str, float]]:
    """Held-out PSNR/SSIM per decode resolution from one tau=0 encode pass."""
    indices = corpus.val_indices(val_size)
    images = corpus.batch(indices, model.cfg.train_res)
    results: dict[int, dict[str, float]] = {}
    with torch.no_grad():
        code, _ = model.encode(images, INFERENCE_TAU)
        for res in resolutions:
            target = images if res == model.cfg.train_res else corpus.batch(indices, res)
            recon = model.decode(code, res)
            ps = [psnr(target[i], recon[i]) for i in range(len(indices))]
            ss = [ssim(target[i], recon[i]) for i in range(len(indices))]
            results[res] = {
                "psnr": sum(ps) / len(ps),
                "ssim": sum(ss) / len(ss),
            }
    return results


def train_tokenizer(
    cfg: RunConfig, out_dir, hook: AdversarialHook | None = None
) -> dict:
    """Run one tokenizer training stage; returns a summary dict."""
    out_dir = Path(out_dir)
    _write_snapshot(cfg, out_dir)
    if cfg.data.kind != "shapes":
        raise ConfigError("tokenizer training expects data.kind = 'shapes'")
    stage = cfg.train.stage
    init_gen = torch.Generator().manual_seed(cfg.seed)
    loop_gen = torch.Generator().manual_seed(cfg.seed + 1)

    model = Tokenizer(cfg.tokenizer, init_gen)
    start_step = 0
    if cfg.train.resume:
        header, tensors = load_checkpoint(cfg.train.resume)
        if header.get("kind") != "tokenizer":
            raise TrainingError("resume checkpoint is not a tokenizer checkpoint")
        _restore_module(model, "model", tensors)
        start_step = int(header["step"])
        restore_generator(loop_gen, header["rng"])
        resume_tensors = tensors
    elif stage > 1:
        if not cfg.train.init_from:
            raise ConfigError(f"stage {stage} requires train.init_from (the prior-stage checkpoint)")
        prior, _, _ = load_tokenizer_checkpoint(cfg.train.init_from)
        model.load_state_dict(prior.state_dict())
        resume_tensors = None
    else:
        resume_tensors = None

    if stage == 3:
        for p in model.encoder_parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(params, cfg.train.lr)
    if resume_tensors is not None:
        _restore_optimizer(optimizer, resume_tensors)

    perceptual = RandomFeatureExtractor(PERCEPTUAL_SEED) if cfg.train.perceptual else None
    tau = cfg.train.tau if cfg.train.tau >= 0 else STAGE_TAU[stage]
    corpus = ShapesCorpus(cfg.seed)
    metrics = MetricsLog(out_dir / "metrics.tsv")
    ckpt_dir = out_dir / "checkpoints"
    multi_res = stage >= 2

    def save(step, name):
        save_training_checkpoint(
            ckpt_dir / name, cfg, "tokenizer", step, {"model": model}, optimizer, loop_gen
        )

    res_list = list(cfg.tokenizer.decode_res)
    for step in range(start_step, cfg.train.steps):
        t0 = time.perf_counter()
        _set_lr(optimizer, lr_schedule(step, cfg.train.lr, cfg.train.warmup_steps))
        indices = torch.randint(0, TRAIN_INDEX_RANGE, (cfg.train.batch_size,), generator=loop_gen)
        res = cfg.tokenizer.train_res
        if multi_res:
            res = res_list[int(torch.randint(0, len(res_list), (1,), generator=loop_gen))]
        images = corpus.batch(indices.tolist(), cfg.tokenizer.train_res)
        target = images if res == cfg.tokenizer.train_res else corpus.batch(indices.tolist(), res)
        code, _ = model.encode(images, tau, loop_gen)
        recon = model.decode(code, res)
        loss = reconstruction_loss(target, recon, perceptual, loop_gen, cfg.train.perceptual_weight)
        if stage == 3 and hook is not None:
            adv = hook.generator_loss(target, recon)
            loss = loss + hook.weight(step, float(loss.detach()), float(adv.detach())) * adv
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
        optimizer.step()
        wall = (time.perf_counter() - t0) * 1000.0
        if step % cfg.train.log_every == 0 or step == cfg.train.steps - 1:
            metrics.append(step, float(loss.detach()), optimizer.param_groups[0]["lr"], wall)
        if cfg.train.checkpoint_every and (step + 1) % cfg.train.checkpoint_every == 0:
            save(step + 1, f"step-{step + 1:06d}.ckpt")

    save(cfg.train.steps, "final.ckpt")
    model.eval()
    resolutions = res_list if multi_res else [cfg.tokenizer.train_res]
    val = tokenizer_validation(model, corpus, cfg.train.val_size, resolutions)
    with open(out_dir / "validation.tsv", "w", encoding="utf-8") as fh:
        for res, entry in val.items():
            fh.write(f"{res}\t{entry['psnr']:.4f}\t{entry['ssim']:.4f}\n")
    return {"checkpoint": str(ckpt_dir / "final.ckpt"), "validation": val}


def _generator_validation(kind, model, encoder, data: BitsData, cfg: RunConfig) -> float:
    """Deterministic validation loss (fixed seed, no condition dropout)."""
    val_gen = torch.Generator().manual_seed(cfg.seed + 777)
    total, count = 0.0, 0
    with torch.no_grad():
        for lo in range(0, data.val_bits.shape[0], cfg.train.batch_size):
            z = data.val_bits[lo: lo + cfg.train.batch_size]
            z = z.reshape(z.shape[0], cfg.model.tokens, cfg.model.code_bits)
            cond = None
            if encoder is not None and data.val_labels is not None:
                cond = encoder.encode_labels(data.val_labels[lo: lo + z.shape[0]])
            if kind == "diffusion":
                loss = diff.diffusion_loss(model, z, val_gen, cond, drop_prob=0.0)
            else:
                loss = ar.ar_loss(model, z, val_gen, cond, drop_prob=0.0)
            total += float(loss) * z.shape[0]
            count += z.shape[0]
    return total / count


def _load_bits_data(cfg: RunConfig) -> BitsData:
    if not cfg.data.images:
        raise ConfigError("data.images is required for idx-bits data")
    bits, labels = load_idx_bits(
        cfg.data.images, cfg.data.labels, grid=cfg.data.grid, threshold=cfg.data.threshold
    )
    if cfg.model.tokens != cfg.data.grid or cfg.model.code_bits != cfg.data.grid:
        raise ConfigError(
            "idx-bits data maps the bit plane onto tokens: model.tokens and "
            f"model.code_bits must equal data.grid ({cfg.data.grid})"
        )
    return BitsData(bits.reshape(bits.shape[0], -1), labels, cfg.data.val_count)


def train_generator(kind: str, cfg: RunConfig, out_dir) -> dict:
    """Train the diffusion or AR generator on binary codes."""
    out_dir = Path(out_dir)
    _write_snapshot(cfg, out_dir)
    init_gen = torch.Generator().manual_seed(cfg.seed)
    loop_gen = torch.Generator().manual_seed(cfg.seed + 1)
    model = build_generator(kind, cfg, init_gen)

    tok = None
    data: BitsData | None = None
    corpus = None
    if cfg.data.kind == "idx-bits":
        data = _load_bits_data(cfg)
        encoder = None
        if data.train_labels is not None:
            encoder = ConditionEncoder(
                condition_spec(cfg), cfg.model.depth, cfg.model.hidden, init_gen
            )
    else:
        if not cfg.train.init_from:
            raise ConfigError("code-mode generator training requires train.init_from "
                              "(a tokenizer checkpoint)")
        tok, tok_cfg, _ = load_tokenizer_checkpoint(cfg.train.init_from)
        if (tok_cfg.tokenizer.latent_tokens, tok_cfg.tokenizer.code_bits) != (
            cfg.model.tokens, cfg.model.code_bits
        ):
            raise ConfigError("generator token geometry must match the tokenizer checkpoint")
        corpus = ShapesCorpus(cfg.seed)
        encoder = None

    start_step = 0
    if cfg.train.resume:
        header, tensors = load_checkpoint(cfg.train.resume)
        if header.get("kind") != kind:
            raise TrainingError(f"resume checkpoint kind {header.get('kind')!r} != {kind!r}")
        _restore_module(model, "model", tensors)
        if encoder is not None:
            _restore_module(encoder, "cond", tensors)
        start_step = int(header["step"])
        restore_generator(loop_gen, header["rng"])
        resume_tensors = tensors
    else:
        resume_tensors = None

    params = list(model.parameters())
    if encoder is not None:
        params += [p for p in encoder.parameters() if p.requires_grad]
    optimizer = make_optimizer(params, cfg.train.lr)
    if resume_tensors is not None:
        _restore_optimizer(optimizer, resume_tensors)

    metrics = MetricsLog(out_dir / "metrics.tsv")
    ckpt_dir = out_dir / "checkpoints"
    modules = {"model": model}
    if encoder is not None:
        modules["cond"] = encoder

    def save(step, name):
        save_training_checkpoint(ckpt_dir / name, cfg, kind, step, modules, optimizer, loop_gen)

    def emit_samples(step):
        sample_gen = torch.Generator().manual_seed(cfg.seed + 12345)
        g = diff.GuidanceParams(cfg.sampler.alpha, cfg.sampler.temperature, cfg.sampler.steps)
        batch = 16
        cond = None
        null = None
        if encoder is not None:
            labels = torch.arange(batch) % cfg.condition.num_classes
            cond = encoder.encode_labels(labels)
            null = encoder.null_stack(batch)
        with torch.no_grad():
            if kind == "diffusion":
                codes = diff.sample_simplified(model, g, sample_gen, batch, cond, null)
            else:
                codes = ar.ar_sample(model, g, sample_gen, batch, cond, null)
        from .data import bits_to_image, image_grid, save_image

        tiles = [bits_to_image(codes[i]) for i in range(batch)]
        out = out_dir / "samples"
        out.mkdir(exist_ok=True)
        save_image(image_grid(tiles), out / f"step-{step:06d}.png")

    for step in range(start_step, cfg.train.steps):
        t0 = time.perf_counter()
        _set_lr(optimizer, lr_schedule(step, cfg.train.lr, cfg.train.warmup_steps))
        if data is not None:
            idx = torch.randint(0, data.train_size, (cfg.train.batch_size,), generator=loop_gen)
            z = data.train_bits[idx].reshape(-1, cfg.model.tokens, cfg.model.code_bits)
            cond = (
                encoder.encode_labels(data.train_labels[idx]) if encoder is not None else None
            )
        else:
            idx = torch.randint(0, TRAIN_INDEX_RANGE, (cfg.train.batch_size,), generator=loop_gen)
            images = corpus.batch(idx.tolist(), tok.cfg.train_res)
            with torch.no_grad():
                z, _ = tok.encode(images, INFERENCE_TAU)
            cond = None
        null = encoder.null_stack(z.shape[0]) if encoder is not None else None
        if kind == "diffusion":
            loss = diff.diffusion_loss(model, z, loop_gen, cond, null, cfg.condition.dropout)
        else:
            loss = ar.ar_loss(model, z, loop_gen, cond, null, cfg.condition.dropout)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
        optimizer.step()
        wall = (time.perf_counter() - t0) * 1000.0
        if step % cfg.train.log_every == 0 or step == cfg.train.steps - 1:
            metrics.append(step, float(loss.detach()), optimizer.param_groups[0]["lr"], wall)
        if cfg.train.checkpoint_every and (step + 1) % cfg.train.checkpoint_every == 0:
            save(step + 1, f"step-{step + 1:06d}.ckpt")
            emit_samples(step + 1)
        if cfg.train.val_every and (step + 1) % cfg.train.val_every == 0 and data is not None:
            model.eval()
            vl = _generator_validation(kind, model, encoder, data, cfg)
            model.train()
            with open(out_dir / "validation.tsv", "a", encoding="utf-8") as fh:
                fh.write(f"{step + 1}\t{vl:.6f}\n")

    save(cfg.train.steps, "final.ckpt")
    model.eval()
    summary = {"checkpoint": str(ckpt_dir / "final.ckpt")}
    if data is not None:
        val_loss = _generator_validation(kind, model, encoder, data, cfg)
        with open(out_dir / "validation.tsv", "a", encoding="utf-8") as fh:
            fh.write(f"{cfg.train.steps}\t{val_loss:.6f}\n")
        summary["val_loss"] = val_loss
    return summary
