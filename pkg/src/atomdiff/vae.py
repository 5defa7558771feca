"""Stage 1: per-atom Transformer VAE over the unified atom representation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from atomdiff.config import LossWeights, RunConfig, VAEConfig
from atomdiff.datasets import CRYSTAL, Batch, DatasetRecord, collate, make_batches
from atomdiff.geometry import (
    AtomicSystem,
    GeometryError,
    LatticeParams,
    augment,
    cart_to_frac,
    lattice_matrix_to_params,
    lattice_params_to_matrix,
    wrap_fractional,
)
from atomdiff.nn import (
    NumericalError,
    TransformerConfig,
    TransformerEncoder,
    load_checkpoint,
    make_optimizer,
    optimizer_step,
    optimizer_tensors,
    restore_optimizer,
    save_checkpoint,
    scheduled_lr,
    set_lr,
    swish_mlp,
)
from atomdiff.vocab import MASK_INDEX, NUM_ELEMENTS, VOCAB_SIZE

log = logging.getLogger(__name__)

TERMS = ("A", "X", "F", "Ll", "La")


@dataclass
class EncoderOutput:
    mu: torch.Tensor
    log_sigma: torch.Tensor
    z: torch.Tensor


@dataclass
class DecoderOutput:
    atom_logits: torch.Tensor  # (B, N, VOCAB_SIZE)
    cart: torch.Tensor  # (B, N, 3) Angstrom
    frac: torch.Tensor  # (B, N, 3)
    lengths: torch.Tensor  # (B, 3) Angstrom
    angles: torch.Tensor  # (B, 3) radians


@dataclass
class BatchTensors:
    atom_types: torch.Tensor
    cart: torch.Tensor
    frac: torch.Tensor
    pad_mask: torch.Tensor
    n_atoms: torch.Tensor
    periodic: torch.Tensor
    lengths: torch.Tensor
    angles: torch.Tensor
    class_labels: torch.Tensor


def batch_tensors(batch: Batch, dtype=torch.float32) -> BatchTensors:
    """Torch view of a Batch plus lattice-parameter targets (zeros for molecules)."""
    B = batch.size
    lengths = np.zeros((B, 3))
    angles = np.zeros((B, 3))
    for i in range(B):
        if batch.class_labels[i] == CRYSTAL:
            p = lattice_matrix_to_params(batch.lattice[i])
            lengths[i] = p.lengths
            angles[i] = p.angles_rad
    return BatchTensors(
        atom_types=torch.as_tensor(batch.atom_types, dtype=torch.long),
        cart=torch.as_tensor(batch.cart, dtype=dtype),
        frac=torch.as_tensor(batch.frac, dtype=dtype),
        pad_mask=torch.as_tensor(batch.pad_mask, dtype=torch.bool),
        n_atoms=torch.as_tensor(batch.n_atoms, dtype=dtype),
        periodic=torch.as_tensor(batch.class_labels == CRYSTAL, dtype=torch.bool),
        lengths=torch.as_tensor(lengths, dtype=dtype),
        angles=torch.as_tensor(angles, dtype=dtype),
        class_labels=torch.as_tensor(batch.class_labels, dtype=torch.long),
    )


class VAE(nn.Module):
    def __init__(self, cfg: VAEConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        tcfg = TransformerConfig(d, cfg.n_heads, cfg.n_layers, cfg.ff_mult)
        self.type_embed = nn.Embedding(VOCAB_SIZE, d)
        self.cart_proj = swish_mlp(3, d)
        self.frac_proj = swish_mlp(3, d)
        self.encoder = TransformerEncoder(tcfg)
        self.to_mu = nn.Linear(d, cfg.latent_dim)
        self.to_log_sigma = nn.Linear(d, cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, d)
        self.decoder = TransformerEncoder(tcfg)
        self.type_head = nn.Linear(d, VOCAB_SIZE)
        self.cart_head = nn.Linear(d, 3)
        self.frac_head = nn.Linear(d, 3)
        self.lattice_head = nn.Linear(d, 6)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    def encode(
        self,
        atom_types: torch.Tensor,
        cart: torch.Tensor,
        frac: torch.Tensor,
        pad_mask: torch.Tensor,
        noise: torch.Tensor | None = None,
    ) -> EncoderOutput:
        """Latents per atom; ``noise=None`` is deterministic mode (z = mu)."""
        h = self.type_embed(atom_types)
        h = h + self.cart_proj(cart)
        # molecules pass their zero fractional sentinel through the same projection
        h = h + self.frac_proj(frac)
        h = self.encoder(h, pad_mask)
        m = pad_mask[..., None].to(h.dtype)
        mu = self.to_mu(h) * m
        log_sigma = self.to_log_sigma(h) * m
        z = mu if noise is None else mu + torch.exp(log_sigma) * noise * m
        return EncoderOutput(mu, log_sigma, z)

    def encode_batch(self, bt: BatchTensors, noise: torch.Tensor | None = None) -> EncoderOutput:
        return self.encode(bt.atom_types, bt.cart, bt.frac, bt.pad_mask, noise)

    def decode(self, z: torch.Tensor, pad_mask: torch.Tensor) -> DecoderOutput:
        if z.dim() != 3 or z.shape[-1] != self.latent_dim or pad_mask.shape != z.shape[:2]:
            raise ValueError(f"shape mismatch: z {tuple(z.shape)}, pad_mask {tuple(pad_mask.shape)}")
        h = self.decoder(self.from_latent(z), pad_mask)
        m = pad_mask[..., None].to(h.dtype)
        n = m.sum(dim=1)
        pooled = (h * m).sum(dim=1) / n
        lat = self.lattice_head(pooled)
        # lengths are predicted per cube root of the atom count
        lengths = lat[:, :3] * n.pow(1.0 / 3.0)
        return DecoderOutput(self.type_head(h), self.cart_head(h), self.frac_head(h), lengths, lat[:, 3:])


def _masked_center(x: torch.Tensor, m: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    mean = (x * m).sum(dim=1, keepdim=True) / n[:, None, None]
    return (x - mean) * m


def reconstruction_terms(bt: BatchTensors, out: DecoderOutput) -> dict[str, torch.Tensor]:
    """Per-sample loss terms (shape (B,)); per-atom means use true atom counts."""
    m = bt.pad_mask[..., None].to(out.cart.dtype)
    n = bt.n_atoms.to(out.cart.dtype)
    logits = out.atom_logits.reshape(-1, out.atom_logits.shape[-1])
    ce = F.cross_entropy(logits, bt.atom_types.reshape(-1), reduction="none").view(bt.atom_types.shape)
    loss_a = (ce * bt.pad_mask).sum(dim=1) / n
    dx = _masked_center(out.cart, m, n) - _masked_center(bt.cart, m, n)
    loss_x = (dx * dx * m).sum(dim=(1, 2)) / (3 * n)
    df = (out.frac - bt.frac) * m
    loss_f = (df * df).sum(dim=(1, 2)) / (3 * n)
    cbrt = n.pow(1.0 / 3.0)[:, None]
    dl = (out.lengths - bt.lengths) / cbrt
    loss_ll = (dl * dl).mean(dim=1)
    da = out.angles - bt.angles
    loss_la = (da * da).mean(dim=1)
    return {"A": loss_a, "X": loss_x, "F": loss_f, "Ll": loss_ll, "La": loss_la}


def weight_rows(weights: LossWeights, periodic: torch.Tensor, dtype) -> torch.Tensor:
    per = torch.tensor(weights.periodic, dtype=dtype)
    non = torch.tensor(weights.non_periodic, dtype=dtype)
    return torch.where(periodic[:, None], per[None, :], non[None, :])


def reconstruction_loss(bt: BatchTensors, out: DecoderOutput, weights: LossWeights):
    """Returns (total, terms): batch-mean of the class-weighted sum, and per-sample terms."""
    terms = reconstruction_terms(bt, out)
    w = weight_rows(weights, bt.periodic, out.cart.dtype)
    stacked = torch.stack([terms[k] for k in TERMS], dim=1)
    # zero weights contribute exactly nothing, even for non-finite terms
    weighted = torch.where(w == 0, torch.zeros_like(stacked), w * stacked)
    return weighted.sum(dim=1).mean(), terms


def kl_penalty(mu: torch.Tensor, log_sigma: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    """Mean over real atoms and channels of KL(N(mu, sigma) || N(0, 1))."""
    kl = 0.5 * (torch.exp(2 * log_sigma) + mu * mu - 1 - 2 * log_sigma)
    m = pad_mask[..., None].to(kl.dtype)
    return (kl * m).sum() / (m.sum() * mu.shape[-1])


def denoising_corrupt(
    batch: Batch, rng: np.random.Generator, prob: float = 0.1, std: float = 0.1
) -> Batch:
    """Mask types and jitter Cartesian coordinates of a random subset of atoms.

    Crystal fractional coordinates are recomputed from the jittered Cartesian
    positions and wrapped, so the noise scale is in Angstrom in both domains.
    """
    hit = (rng.random(batch.pad_mask.shape) < prob) & batch.pad_mask
    noise = rng.normal(0.0, std, size=batch.cart.shape) * hit[..., None]
    types = np.where(hit, MASK_INDEX, batch.atom_types)
    cart = batch.cart + noise
    frac = batch.frac.copy()
    for i in np.flatnonzero(batch.class_labels == CRYSTAL):
        n = batch.n_atoms[i]
        if hit[i, :n].any():
            frac[i, :n] = wrap_fractional(cart_to_frac(batch.lattice[i], cart[i, :n]))
    return replace(batch, atom_types=types, cart=cart, frac=frac)


# -------------------------------------------------------------- decoding


def predicted_types(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over real elements only (pad and MASK are never emitted); ties go to the lowest index."""
    return torch.argmax(logits[..., 1 : NUM_ELEMENTS + 1], dim=-1) + 1


def split_decode(out: DecoderOutput, pad_mask, class_labels) -> list[AtomicSystem | None]:
    """Molecules keep (types, cart); crystals keep (types, wrapped frac, lattice).

    A crystal whose predicted lattice parameters are not realisable yields None.
    """
    types = predicted_types(out.atom_logits).cpu().numpy()
    cart = out.cart.detach().cpu().double().numpy()
    frac = out.frac.detach().cpu().double().numpy()
    lengths = out.lengths.detach().cpu().double().numpy()
    angles = np.degrees(out.angles.detach().cpu().double().numpy())
    mask = np.asarray(pad_mask.cpu() if torch.is_tensor(pad_mask) else pad_mask)
    labels = np.asarray(class_labels.cpu() if torch.is_tensor(class_labels) else class_labels)
    systems: list[AtomicSystem | None] = []
    for i in range(types.shape[0]):
        n = int(mask[i].sum())
        if not np.all(np.isfinite(cart[i, :n])) or not np.all(np.isfinite(frac[i, :n])):
            systems.append(None)
            continue
        if labels[i] == CRYSTAL:
            try:
                lattice = lattice_params_to_matrix(LatticeParams(*lengths[i], *angles[i]))
                s = AtomicSystem.crystal(types[i, :n], frac[i, :n], lattice)
                s.validate()
            except GeometryError:
                s = None
            systems.append(s)
        else:
            systems.append(AtomicSystem.molecule(types[i, :n], cart[i, :n]))
    return systems


# -------------------------------------------------------------- training


def build_vae(cfg: VAEConfig, seed: int) -> VAE:
    torch.manual_seed(seed)
    return VAE(cfg)


def vae_step_loss(
    model: VAE, clean: Batch, corrupted: Batch, noise: torch.Tensor | None, cfg: VAEConfig, dtype=torch.float32
):
    """Forward pass and total loss for one batch (inputs corrupted, targets clean)."""
    target = batch_tensors(clean, dtype)
    inputs = batch_tensors(corrupted, dtype)
    enc = model.encode_batch(inputs, noise)
    out = model.decode(enc.z, target.pad_mask)
    rec, terms = reconstruction_loss(target, out, cfg.weights)
    kl = kl_penalty(enc.mu, enc.log_sigma, target.pad_mask)
    total = rec + cfg.kl_weight * kl
    return total, rec, kl, terms, target


def _class_mean(values: torch.Tensor, mask: torch.Tensor) -> float | None:
    if not bool(mask.any()):
        return None
    return float(values[mask].mean())


def train_vae(
    config: RunConfig,
    records: Sequence[DatasetRecord],
    out_dir=None,
    resume=None,
    epochs: int | None = None,
    log_fn: Callable[[dict], None] | None = None,
) -> tuple[VAE, list[dict]]:
    """Train the VAE; returns the model and per-epoch summaries.

    The loop per batch is augment -> corrupt -> encode -> decode ->
    reconstruction + kl_weight * KL -> AdamW. With ``out_dir`` set a checkpoint
    and ``train_log.jsonl`` (one line per step) are written there.
    """
    cfg = config.vae
    total_epochs = cfg.epochs if epochs is None else epochs
    model = build_vae(cfg, config.seed)
    names = [k for k, _ in model.named_parameters()]
    opt = make_optimizer(model.parameters(), cfg.lr)
    rng = np.random.default_rng(config.seed)
    step = epoch0 = 0
    if resume is not None:
        manifest, sets = load_checkpoint(resume)
        _load_params(model, sets["params"])
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
            sums, count = {}, 0
            for clean in make_batches(records, cfg.batch_size, config.n_max, rng, transform):
                corrupted = denoising_corrupt(clean, rng, cfg.corrupt_prob, cfg.corrupt_std)
                noise = torch.as_tensor(
                    rng.standard_normal((clean.size, config.n_max, cfg.latent_dim)), dtype=torch.float32
                )
                total, rec, kl, terms, target = vae_step_loss(model, clean, corrupted, noise, cfg)
                if not torch.isfinite(total):
                    raise NumericalError(f"non-finite VAE loss at step {step}: rec={rec.item()} kl={kl.item()}")
                opt.zero_grad(set_to_none=True)
                total.backward()
                optimizer_step(opt)
                step += 1
                entry = {"step": step, "epoch": epoch, "lr": lr, "loss": total.item(),
                         "rec": rec.item(), "kl": kl.item()}
                per, non = target.periodic, ~target.periodic
                for k in TERMS:
                    entry[f"{k}_crystal"] = _class_mean(terms[k].detach(), per)
                    entry[f"{k}_molecule"] = _class_mean(terms[k].detach(), non)
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                for k in ("loss", "rec", "kl"):
                    sums[k] = sums.get(k, 0.0) + entry[k]
                count += 1
            summary = {"epoch": epoch, "step": step, **{k: v / max(count, 1) for k, v in sums.items()}}
            history.append(summary)
            if log_fn:
                log_fn(summary)
    finally:
        if log_file:
            log_file.close()
    model.eval()
    if out_dir is not None:
        save_vae(model, Path(out_dir) / "vae_ckpt", config, step, total_epochs, rng, opt)
    return model, history


def _load_params(model: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for k, p in model.named_parameters():
            if k not in tensors:
                raise KeyError(f"checkpoint missing parameter {k}")
            if tuple(tensors[k].shape) != tuple(p.shape):
                raise ValueError(f"checkpoint shape mismatch for {k}")
            p.copy_(tensors[k])


def save_vae(model: VAE, path, config: RunConfig, step: int, epoch: int, rng, opt=None) -> Path:
    names = [k for k, _ in model.named_parameters()]
    sets = {"params": dict(model.named_parameters())}
    if opt is not None:
        sets["optim"] = optimizer_tensors(opt, names)
    return save_checkpoint(
        path, "vae", config.to_dict(), sets, step, config.seed,
        extra={"epoch": epoch, "rng_state": rng.bit_generator.state if rng is not None else None},
    )


def load_vae(path) -> tuple[VAE, dict]:
    manifest, sets = load_checkpoint(path)
    if manifest.get("kind") != "vae":
        raise ValueError(f"{path} is not a VAE checkpoint")
    vcfg = manifest["config"]["vae"]
    cfg = VAEConfig(**{**vcfg, "weights": LossWeights(**vcfg["weights"])})
    model = VAE(cfg)
    _load_params(model, sets["params"])
    model.eval()
    return model, manifest


# ------------------------------------------------------------ evaluation


@torch.no_grad()
def encode_records(model: VAE, records: Sequence[DatasetRecord], n_max: int, batch_size: int = 256):
    """Deterministic-mode latents (mu) for each record, as (n_atoms, d) arrays."""
    latents = []
    for start in range(0, len(records), batch_size):
        batch = collate(records[start : start + batch_size], n_max)
        enc = model.encode_batch(batch_tensors(batch))
        for i in range(batch.size):
            latents.append(enc.mu[i, : batch.n_atoms[i]].numpy().copy())
    return latents


@torch.no_grad()
def reconstruct(model: VAE, records: Sequence[DatasetRecord], n_max: int, batch_size: int = 256):
    """Deterministic encode/decode of records; returns (systems, per-record type accuracy)."""
    systems, accs = [], []
    for start in range(0, len(records), batch_size):
        batch = collate(records[start : start + batch_size], n_max)
        bt = batch_tensors(batch)
        out = model.decode(model.encode_batch(bt).z, bt.pad_mask)
        pred = predicted_types(out.atom_logits)
        correct = ((pred == bt.atom_types) & bt.pad_mask).sum(dim=1).double() / bt.n_atoms.double()
        accs.extend(correct.tolist())
        systems.extend(split_decode(out, bt.pad_mask, bt.class_labels))
    return systems, accs


def coordinate_rmse(original: AtomicSystem, recon: AtomicSystem) -> float:
    """RMSE in Angstrom without alignment: zero-centred Cartesian for molecules,
    minimum-image fractional error mapped through the true lattice for crystals."""
    if original.periodic:
        df = recon.frac_coords - original.frac_coords
        df -= np.round(df)
        d = df @ original.lattice
    else:
        a = original.cart_coords - original.cart_coords.mean(axis=0)
        b = recon.cart_coords - recon.cart_coords.mean(axis=0)
        d = a - b
    return float(math.sqrt(np.mean(np.sum(d * d, axis=1))))
