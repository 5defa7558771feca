"""Transformer building blocks, optimisation helpers, gradient checking and checkpoints.

Everything here is plain PyTorch on CPU. Atom sets carry no positional
encoding, so every block is permutation-equivariant over the atom axis.
``pad_mask`` is True for real atoms; padded atoms are never attended to.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class NumericalError(RuntimeError):
    pass


@dataclass
class TransformerConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ff_mult: int = 4

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.n_layers, self.ff_mult) <= 0:
            raise ValueError("transformer dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


def swish_mlp(d_in: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_out), nn.SiLU(), nn.Linear(d_out, d_out))


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        H = self.n_heads
        q, k, v = self.qkv(x).view(B, N, 3, H, D // H).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(D // H)
        scores = scores.masked_fill(~pad_mask[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, mult: int):
        super().__init__(nn.Linear(d_model, mult * d_model), nn.GELU(), nn.Linear(mult * d_model, d_model))


class EncoderBlock(nn.Module):
    """Pre-norm block: x + attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.mlp = FeedForward(cfg.d_model, cfg.ff_mult)

    def forward(self, x, pad_mask):
        x = x + self.attn(self.norm1(x), pad_mask)
        return x + self.mlp(self.norm2(x))


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, h: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        if h.dim() != 3 or h.shape[-1] != self.cfg.d_model or pad_mask.shape != h.shape[:2]:
            raise ValueError(f"shape mismatch: h {tuple(h.shape)}, pad_mask {tuple(pad_mask.shape)}")
        for block in self.blocks:
            h = block(h, pad_mask)
        return self.norm(h)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class DiTBlock(nn.Module):
    """Transformer block with adaLN-Zero conditioning.

    The modulation layer is zero-initialised, so all gates start at 0 and the
    block is exactly the identity map.
    """

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(d, cfg.n_heads)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mlp = FeedForward(d, cfg.ff_mult)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x, cond, pad_mask):
        if cond.dim() != 2 or cond.shape[0] != x.shape[0]:
            raise ValueError("cond must be (B, d_model)")
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.adaLN_modulation(cond).chunk(6, dim=-1)
        x = x + gate_a[:, None, :] * self.attn(modulate(self.norm1(x), shift_a, scale_a), pad_mask)
        return x + gate_m[:, None, :] * self.mlp(modulate(self.norm2(x), shift_m, scale_m))


class FinalLayer(nn.Module):
    def __init__(self, d_model: int, d_out: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(d_model, d_out)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(d_model, 2 * d_model))
        for layer in (self.linear, self.adaLN_modulation[-1]):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x, cond):
        shift, scale = self.adaLN_modulation(cond).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0, scale: float = 1000.0):
    """Interleaved [sin, cos] features of ``scale * t``; ``dim`` must be even."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = scale * t.reshape(-1, 1) * freqs[None, :]
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(-1, dim)


class TimestepEmbedder(nn.Module):
    def __init__(self, d_model: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, d_model), nn.SiLU(), nn.Linear(d_model, d_model))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        w = self.mlp[0].weight
        return self.mlp(sinusoidal_embedding(t.to(w.dtype), self.freq_dim))


# ------------------------------------------------------------ optimisation


def make_optimizer(params: Iterable[torch.Tensor], lr: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)


def scheduled_lr(base: float, schedule: str, epoch: int, total_epochs: int) -> float:
    """Per-epoch learning rate; cosine decays from ``base`` towards 0 over the run."""
    if schedule == "constant" or total_epochs <= 1:
        return base
    if schedule == "cosine":
        return 0.5 * base * (1 + math.cos(math.pi * epoch / total_epochs))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def optimizer_step(optimizer: torch.optim.Optimizer) -> None:
    """AdamW step that refuses to apply non-finite gradients."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericalError("non-finite gradient; step aborted")
    optimizer.step()


class EMA:
    """Shadow copy of a module's parameters updated as decay*ema + (1-decay)*param."""

    def __init__(self, module: nn.Module, decay: float = 0.9999):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in module.named_parameters()}

    @torch.no_grad()
    def update(self, module: nn.Module, decay: float | None = None) -> None:
        d = self.decay if decay is None else decay
        for k, p in module.named_parameters():
            self.shadow[k].mul_(d).add_(p.detach(), alpha=1 - d)

    @torch.no_grad()
    def copy_to(self, module: nn.Module) -> None:
        for k, p in module.named_parameters():
            p.copy_(self.shadow[k])


# --------------------------------------------------------- gradient check


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Iterable[torch.Tensor],
    eps: float = 1e-5,
    n_samples: int = 200,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` must be deterministic and evaluate a scalar from the current
    parameter values (run the model in float64). A random subsample of
    ``n_samples`` scalar entries is perturbed; the relative error is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)``.
    """
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    for p in tensors:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(tensors, grads)]

    sizes = np.array([p.numel() for p in tensors])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_samples, int(offsets[-1])), replace=False)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[which])
            view = tensors[which].view(-1)
            orig = view[idx].item()
            view[idx] = orig + eps
            plus = loss_fn().item()
            view[idx] = orig - eps
            minus = loss_fn().item()
            view[idx] = orig
            fd = (plus - minus) / (2 * eps)
            ad = grads[which].reshape(-1)[idx].item()
            err = abs(ad - fd) / max(abs(ad), abs(fd), floor)
            worst = max(worst, err)
    return worst


# ------------------------------------------------------------ checkpoints


def _blob_name(name: str) -> str:
    return name + ".bin"


def save_tensors(directory: Path, tensors: Mapping[str, torch.Tensor]) -> list[dict]:
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        if arr.dtype != np.float32:
            raise TypeError(f"{name}: checkpoints store float32 only, got {arr.dtype}")
        (directory / _blob_name(name)).write_bytes(arr.astype("<f4").tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
    return entries


def load_tensors(directory: Path, entries: list[dict]) -> dict[str, torch.Tensor]:
    out = {}
    for e in entries:
        raw = (directory / _blob_name(e["name"])).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out


def save_checkpoint(
    path,
    kind: str,
    config: dict,
    param_sets: Mapping[str, Mapping[str, torch.Tensor]],
    step: int,
    seed: int,
    extra: dict | None = None,
) -> Path:
    """Write ``manifest.json`` plus one raw little-endian float32 blob per tensor.

    ``param_sets`` maps a set name (``params``, ``ema``, ``optim``) to named tensors;
    each set lives in its own subdirectory.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "atomdiff-checkpoint/1",
        "kind": kind,
        "config": config,
        "step": int(step),
        "seed": int(seed),
        "sets": {name: save_tensors(path / name, tensors) for name, tensors in param_sets.items()},
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_file}")
    manifest = json.loads(manifest_file.read_text(encoding="utf-8"))
    sets = {name: load_tensors(path / name, entries) for name, entries in manifest["sets"].items()}
    return manifest, sets


def optimizer_tensors(optimizer: torch.optim.Optimizer, names: list[str]) -> dict[str, torch.Tensor]:
    """Flatten AdamW moments into named tensors (``<param>.exp_avg`` etc.)."""
    out = {}
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        state = optimizer.state.get(p)
        if not state:
            continue
        out[name + ".exp_avg"] = state["exp_avg"]
        out[name + ".exp_avg_sq"] = state["exp_avg_sq"]
        out[name + ".step"] = torch.tensor([float(state["step"])], dtype=torch.float32)
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, names: list[str], tensors: Mapping[str, torch.Tensor]) -> None:
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        if name + ".exp_avg" not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(tensors[name + ".step"].item()),
            "exp_avg": tensors[name + ".exp_avg"].clone(),
            "exp_avg_sq": tensors[name + ".exp_avg_sq"].clone(),
        }


def config_dict(cfg) -> dict:
    return asdict(cfg)
