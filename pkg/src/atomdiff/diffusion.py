"""Stage 2: flow matching in the frozen VAE latent space with a class-conditional DiT."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from atomdiff.config import DiTConfig, RunConfig
from atomdiff.datasets import (
    CLASS_NAMES,
    CRYSTAL,
    MOLECULE,
    NULL_CLASS,
    DatasetRecord,
    atom_count_histogram,
    make_batches,
)
from atomdiff.geometry import augment
from atomdiff.nn import (
    EMA,
    DiTBlock,
    FinalLayer,
    NumericalError,
    TimestepEmbedder,
    TransformerConfig,
    load_checkpoint,
    make_optimizer,
    optimizer_step,
    optimizer_tensors,
    restore_optimizer,
    save_checkpoint,
    scheduled_lr,
    set_lr,
)
from atomdiff.vae import VAE, _load_params, batch_tensors

T_MIN = 0.01
T_CLIP = 0.9


class DiT(nn.Module):
    """Denoiser predicting clean latents from (z_t, t, class, self-conditioning)."""

    def __init__(self, latent_dim: int, cfg: DiTConfig):
        super().__init__()
        d, heads, layers = cfg.dims()
        self.latent_dim = latent_dim
        self.dit_cfg = cfg
        tcfg = TransformerConfig(d, heads, layers, cfg.ff_mult)
        self.input_proj = nn.Linear(2 * latent_dim, d)
        self.t_embed = TimestepEmbedder(d)
        # rows: molecule, crystal, null label
        self.class_embed = nn.Embedding(3, d)
        nn.init.normal_(self.class_embed.weight, std=0.02)
        self.blocks = nn.ModuleList(DiTBlock(tcfg) for _ in range(layers))
        self.final = FinalLayer(d, latent_dim)

    def condition(self, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return self.t_embed(t) + self.class_embed(c)

    def trunk(self, h, cond, pad_mask):
        for block in self.blocks:
            h = block(h, cond, pad_mask)
        return h

    def forward(self, zt, t, c, self_cond, pad_mask):
        if zt.dim() != 3 or zt.shape[-1] != self.latent_dim or self_cond.shape != zt.shape:
            raise ValueError(f"shape mismatch: zt {tuple(zt.shape)}, self_cond {tuple(self_cond.shape)}")
        cond = self.condition(t, c)
        h = self.input_proj(torch.cat([zt, self_cond], dim=-1))
        h = self.trunk(h, cond, pad_mask)
        return self.final(h, cond) * pad_mask[..., None].to(h.dtype)


@dataclass
class DiffusionBatch:
    z1: torch.Tensor
    z0: torch.Tensor
    t: torch.Tensor
    zt: torch.Tensor
    pad_mask: torch.Tensor


def sample_time(rng: np.random.Generator, size=None, t_min: float = T_MIN):
    return rng.uniform(t_min, 1.0, size=size)


def centered_noise(rng: np.random.Generator, pad_mask: torch.Tensor, dim: int, dtype=torch.float32):
    """Standard normal latents with the per-channel mean over real atoms removed."""
    B, N = pad_mask.shape
    z0 = torch.as_tensor(rng.standard_normal((B, N, dim)), dtype=dtype)
    m = pad_mask[..., None].to(dtype)
    mean = (z0 * m).sum(dim=1, keepdim=True) / m.sum(dim=1, keepdim=True)
    return (z0 - mean) * m


def interpolate(z0, z1, t):
    t = torch.as_tensor(t, dtype=z0.dtype)
    if t.dim() == 1:
        t = t[:, None, None]
    return (1 - t) * z0 + t * z1


def target_vector_field(zt, z1, t):
    t = torch.as_tensor(t, dtype=zt.dtype)
    if torch.any(t >= 1):
        raise ValueError("target vector field is undefined at t >= 1")
    if t.dim() == 1:
        t = t[:, None, None]
    return (z1 - zt) / (1 - t)


def fm_loss(z1_pred, z1, t, pad_mask, t_clip: float = T_CLIP) -> torch.Tensor:
    """Batch mean of (1/(1-min(t, t_clip))^2) * (1/N) * sum_i ||z1_i - z1_pred_i||^2."""
    t = torch.as_tensor(t, dtype=z1.dtype).reshape(-1)
    m = pad_mask[..., None].to(z1.dtype)
    n = m.sum(dim=(1, 2))
    err = (((z1 - z1_pred) * m) ** 2).sum(dim=(1, 2)) / n
    coef = 1.0 / (1.0 - torch.clamp(t, max=t_clip)) ** 2
    return (coef * err).mean()


def build_dit(latent_dim: int, cfg: DiTConfig, seed: int) -> DiT:
    torch.manual_seed(seed + 1)
    return DiT(latent_dim, cfg)


def make_diffusion_batch(vae: VAE, batch, rng: np.random.Generator, t_min: float = T_MIN) -> DiffusionBatch:
    """Encode with the frozen VAE (posterior sample) and build an interpolant."""
    bt = batch_tensors(batch)
    noise = torch.as_tensor(rng.standard_normal((batch.size, bt.pad_mask.shape[1], vae.latent_dim)), dtype=torch.float32)
    with torch.no_grad():
        z1 = vae.encode_batch(bt, noise).z
    z0 = centered_noise(rng, bt.pad_mask, vae.latent_dim)
    t = torch.as_tensor(sample_time(rng, batch.size, t_min), dtype=torch.float32)
    return DiffusionBatch(z1, z0, t, interpolate(z0, z1, t), bt.pad_mask)


def dit_step_loss(model: DiT, db: DiffusionBatch, labels: torch.Tensor, use_self_cond: bool, t_clip: float = T_CLIP):
    self_cond = torch.zeros_like(db.zt)
    if use_self_cond:
        with torch.no_grad():
            self_cond = model(db.zt, db.t, labels, self_cond, db.pad_mask).detach()
    pred = model(db.zt, db.t, labels, self_cond, db.pad_mask)
    return fm_loss(pred, db.z1, db.t, db.pad_mask, t_clip)


def train_dit(
    config: RunConfig,
    vae: VAE,
    records: Sequence[DatasetRecord],
    out_dir=None,
    resume=None,
    epochs: int | None = None,
    vae_path: str | None = None,
    log_fn: Callable[[dict], None] | None = None,
) -> tuple[DiT, EMA, list[dict]]:
    """Flow-matching training of the DiT on latents of the frozen ``vae``.

    Per batch: augment -> encode (stochastic) -> interpolate -> optional
    self-conditioning pass -> label dropout -> FM loss -> AdamW -> EMA.
    """
    cfg = config.dit
    total_epochs = cfg.epochs if epochs is None else epochs
    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    model = build_dit(vae.latent_dim, cfg, config.seed)
    names = [k for k, _ in model.named_parameters()]
    opt = make_optimizer(model.parameters(), cfg.lr)
    ema = EMA(model, cfg.ema_decay)
    rng = np.random.default_rng(config.seed + 1)
    step = epoch0 = 0
    if resume is not None:
        manifest, sets = load_checkpoint(resume)
        _load_params(model, sets["params"])
        ema.shadow = {k: v.clone() for k, v in sets["ema"].items()}
        restore_optimizer(opt, names, sets.get("optim", {}))
        rng.bit_generator.state = manifest["rng_state"]
        step, epoch0 = manifest["step"], manifest["epoch"]

    transform = augment if cfg.augment else None
    history = []
    log_file = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_file = open(Path(out_dir) / "train_log.jsonl", "a" if resume else "w", encoding="utf-8")
    model.train()
    try:
        for epoch in range(epoch0, total_epochs):
            lr = scheduled_lr(cfg.lr, cfg.lr_schedule, epoch, total_epochs)
            set_lr(opt, lr)
            total, count = 0.0, 0
            for batch in make_batches(records, cfg.batch_size, config.n_max, rng, transform):
                db = make_diffusion_batch(vae, batch, rng, cfg.t_min)
                labels = np.where(rng.random(batch.size) < cfg.label_dropout, NULL_CLASS, batch.class_labels)
                use_sc = bool(rng.random() < cfg.self_cond_prob)
                loss = dit_step_loss(model, db, torch.as_tensor(labels), use_sc, cfg.t_clip)
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite FM loss at step {step}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                optimizer_step(opt)
                ema.update(model)
                step += 1
                if log_file:
                    log_file.write(json.dumps({"step": step, "epoch": epoch, "lr": lr, "fm_loss": loss.item(),
                                               "self_cond": use_sc}) + "\n")
                total += loss.item()
                count += 1
            summary = {"epoch": epoch, "step": step, "fm_loss": total / max(count, 1)}
            history.append(summary)
            if log_fn:
                log_fn(summary)
    finally:
        if log_file:
            log_file.close()
    model.eval()
    if out_dir is not None:
        save_dit(model, ema, Path(out_dir) / "dit_ckpt", config, records, step, total_epochs, rng, opt, vae_path)
    return model, ema, history


def _histograms(records: Sequence[DatasetRecord]) -> dict:
    out = {}
    for label in (MOLECULE, CRYSTAL):
        if any(r.class_label == label for r in records):
            out[CLASS_NAMES[label]] = atom_count_histogram(records, label).to_json()
    return out


def save_dit(model: DiT, ema: EMA, path, config: RunConfig, records, step, epoch, rng, opt=None, vae_path=None):
    names = [k for k, _ in model.named_parameters()]
    sets = {"params": dict(model.named_parameters()), "ema": ema.shadow}
    if opt is not None:
        sets["optim"] = optimizer_tensors(opt, names)
    extra = {
        "epoch": epoch,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "latent_dim": model.latent_dim,
        "atom_count_histograms": _histograms(records),
        "vae_checkpoint": None if vae_path is None else str(vae_path),
        "notes": {
            "block_activation": "GELU",
            "ff_mult": config.dit.ff_mult,
            "self_conditioning": "channel concat of previous prediction; sampling feeds the CFG-combined prediction",
        },
    }
    return save_checkpoint(path, "dit", config.to_dict(), sets, step, config.seed, extra=extra)


def load_dit(path, use_ema: bool = True) -> tuple[DiT, dict]:
    manifest, sets = load_checkpoint(path)
    if manifest.get("kind") != "dit":
        raise ValueError(f"{path} is not a DiT checkpoint")
    dcfg = DiTConfig(**manifest["config"]["dit"])
    model = DiT(manifest["latent_dim"], dcfg)
    _load_params(model, sets["ema" if use_ema else "params"])
    model.eval()
    return model, manifest
