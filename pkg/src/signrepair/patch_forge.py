"""Mask-gated U-Net perturbation generator trained against a frozen classifier.

The generator sees the sign plus ``P`` one-hot condition planes; each condition
slot yields its own noise pattern so the pairwise diversity term is defined
for a single deterministic network.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .mask_lab import BinaryMask
from .sign_data import SIZE, Dataset, iter_batches
from .tsr_classifier import Classifier, FrozenModelError, to_images, to_tensor

log = logging.getLogger(__name__)

PAPER_WIDTHS = (64, 32, 64, 8)


def conv_unit(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class Generator(nn.Module):
    """Eight-unit U-Net encoder (pool after every two units) with a mirrored decoder."""

    def __init__(self, num_conditions: int = 4, widths: Sequence[int] = PAPER_WIDTHS):
        super().__init__()
        if num_conditions < 1:
            raise ValueError("need at least one condition slot")
        self.num_conditions = num_conditions
        self.widths = tuple(int(w) for w in widths)
        chans = 3 + num_conditions
        self.encoder = nn.ModuleList()
        for w in self.widths:
            self.encoder.append(nn.Sequential(conv_unit(chans, w), conv_unit(w, w)))
            chans = w
        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for w in reversed(self.widths):
            self.ups.append(nn.ConvTranspose2d(chans, w, 2, stride=2))
            self.decoder.append(nn.Sequential(conv_unit(2 * w, w), conv_unit(w, w)))
            chans = w
        self.head = nn.Conv2d(chans, 3, 1)

    def condition_planes(self, condition: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        n, _, h, w = like.shape
        planes = F.one_hot(condition, self.num_conditions).to(like.dtype)
        return planes[:, :, None, None].expand(n, self.num_conditions, h, w)

    def forward(self, x: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        if condition.min() < 0 or condition.max() >= self.num_conditions:
            raise ValueError(f"condition ids must lie in [0, {self.num_conditions})")
        h = torch.cat([x, self.condition_planes(condition, x)], dim=1)
        skips = []
        for stage in self.encoder:
            h = stage(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        for up, stage, skip in zip(self.ups, self.decoder, reversed(skips)):
            h = stage(torch.cat([up(h), skip], dim=1))
        return torch.tanh(self.head(h))

    def to_checkpoint(self) -> dict:
        return {"kind": "generator",
                "architecture": {"name": "Generator", "num_conditions": self.num_conditions,
                                 "widths": list(self.widths)},
                "state_dict": {k: v.clone() for k, v in self.state_dict().items()}}

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "Generator":
        arch = ckpt["architecture"]
        g = cls(arch["num_conditions"], arch["widths"])
        g.load_state_dict(ckpt["state_dict"])
        return g.eval()


def unet_forward(g: Generator, x: np.ndarray, condition_id: int) -> np.ndarray:
    """Noise for one canonical image, as a ``(64, 64, 3)`` array in ``[-1, 1]``."""
    if x.shape != (SIZE, SIZE, 3):
        raise ValueError(f"expected a ({SIZE}, {SIZE}, 3) image, got {x.shape}")
    if not 0 <= condition_id < g.num_conditions:
        raise ValueError(f"condition_id {condition_id} outside [0, {g.num_conditions})")
    g.eval()
    with torch.no_grad():
        noise = g(to_tensor(x), torch.tensor([condition_id]))
    return to_images(noise)[0]


@torch.no_grad()
def generate_noise(g: Generator, images: np.ndarray, conditions: np.ndarray, batch_size: int = 128) -> np.ndarray:
    g.eval()
    out = []
    for s in range(0, len(images), batch_size):
        out.append(to_images(g(to_tensor(images[s:s + batch_size]),
                               torch.from_numpy(np.asarray(conditions[s:s + batch_size], np.int64)))))
    return np.concatenate(out) if out else np.zeros((0, SIZE, SIZE, 3), np.float32)


def contaminate(x: np.ndarray, noise: np.ndarray, mask) -> np.ndarray:
    """``clamp(x + noise * mask, 0, 1)``; unmasked pixels are copied bit for bit."""
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask)
    if x.shape != noise.shape or x.shape[-3:-1] != bits.shape[-2:]:
        raise ValueError(f"shape mismatch: image {x.shape}, noise {noise.shape}, mask {bits.shape}")
    gate = bits[..., None].astype(bool)
    return np.where(gate, np.clip(x + noise, 0.0, 1.0), x).astype(x.dtype)


def contaminate_t(x: torch.Tensor, noise: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Torch version of :func:`contaminate` on NCHW tensors; ``mask`` is ``(N, 1, H, W)``."""
    return torch.where(mask > 0, torch.clamp(x + noise * mask, 0.0, 1.0), x)


def pairwise_mae(noise: torch.Tensor) -> torch.Tensor:
    """Mean absolute error averaged over ordered pairs ``p1 != p2``; noise is ``(B, P, ...)``."""
    b, p = noise.shape[:2]
    if p < 2:
        raise ValueError("pairwise diversity needs at least two patterns")
    flat = noise.reshape(b, p, -1)
    diff = (flat[:, :, None, :] - flat[:, None, :, :]).abs().mean(dim=-1)
    return diff.sum(dim=(1, 2)) / (p * (p - 1))


@dataclass
class GeneratorLoss:
    l2: torch.Tensor
    l3: torch.Tensor
    alpha: float
    beta: float

    @property
    def total(self) -> torch.Tensor:
        return self.alpha * self.l2 + self.beta * self.l3


def generator_loss(c: Classifier, x: torch.Tensor, y: torch.Tensor, g: Generator,
                   masks: torch.Tensor, alpha: float = 0.5, beta: float = 0.5) -> GeneratorLoss:
    """Fooling and diversity terms for a batch.

    ``masks`` has shape ``(B, P, 64, 64)``: one mask per sample and condition slot.
    """
    if not c.frozen:
        raise FrozenModelError("generator loss requires a frozen classifier")
    p = g.num_conditions
    if beta > 0 and p < 2:
        raise ValueError("diversity term needs at least two condition slots")
    b = x.shape[0]
    xs = x.repeat_interleave(p, dim=0)
    cond = torch.arange(p).repeat(b)
    noise = g(xs, cond)
    adv = contaminate_t(xs, noise, masks.reshape(b * p, 1, SIZE, SIZE).to(x.dtype))
    l2 = F.cross_entropy(c.logits(adv), y.repeat_interleave(p))
    if p >= 2:
        l3 = pairwise_mae(noise.reshape(b, p, 3, SIZE, SIZE)).mean()
    else:
        l3 = noise.new_zeros(())
    return GeneratorLoss(l2, l3, alpha, beta)


@dataclass
class GeneratorConfig:
    widths: tuple[int, ...] = PAPER_WIDTHS
    num_conditions: int = 4
    alpha: float = 0.5
    beta: float = 0.5
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 1
    max_images: int | None = None
    # epochs trained on the fooling term alone before the diversity term joins
    diversity_warmup: int = 0
    seed: int = 0


@dataclass
class GeneratorRun:
    generator: Generator
    loss_curve: list[dict] = field(default_factory=list)


def train_generator(c: Classifier, d: Dataset, masks: Sequence[BinaryMask],
                    cfg: GeneratorConfig | None = None, g: Generator | None = None) -> GeneratorRun:
    """Gradient ascent on ``alpha * l2 + beta * l3``; the classifier is never updated.

    ``batch_size`` counts images; each image is expanded into its ``P`` condition
    slots, every slot drawing its own mask uniformly from ``masks``.
    """
    cfg = cfg or GeneratorConfig()
    if not c.frozen:
        raise FrozenModelError("refusing to train a generator against an unfrozen classifier")
    if not masks:
        raise ValueError("need at least one mask")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if g is None:
        g = Generator(cfg.num_conditions, cfg.widths)
    x, y = d.arrays("train")
    if cfg.max_images is not None and cfg.max_images < len(x):
        keep = np.sort(rng.choice(len(x), cfg.max_images, replace=False))
        x, y = x[keep], y[keep]
    xt, yt = to_tensor(x), torch.from_numpy(y)
    mask_bank = torch.from_numpy(np.stack([m.bits for m in masks]).astype(np.float32))
    opt = torch.optim.Adam(g.parameters(), lr=cfg.lr)
    before = c.param_hash()
    curve = []
    for epoch in range(cfg.epochs):
        g.train()
        beta = cfg.beta if epoch >= cfg.diversity_warmup else 0.0
        sums = np.zeros(3)
        for idx in iter_batches(len(x), cfg.batch_size, rng):
            pick = torch.from_numpy(rng.integers(0, len(masks), size=(len(idx), g.num_conditions)))
            idx_t = torch.from_numpy(idx)
            loss = generator_loss(c, xt[idx_t], yt[idx_t], g, mask_bank[pick], cfg.alpha, beta)
            opt.zero_grad()
            (-loss.total).backward()
            opt.step()
            sums += np.array([loss.l2.item(), loss.l3.item(), loss.total.item()]) * len(idx)
        row = dict(zip(("l2", "l3", "total"), (sums / len(x)).tolist()))
        row["epoch"] = epoch + 1
        curve.append(row)
        log.info("generator epoch %d l2 %.4f l3 %.4f", epoch + 1, row["l2"], row["l3"])
    if c.param_hash() != before:
        raise FrozenModelError("classifier parameters changed during generator training")
    g.eval()
    return GeneratorRun(g, curve)


@torch.no_grad()
def mean_pattern_diversity(g: Generator, images: np.ndarray) -> float:
    """Mean pairwise MAE between the ``P`` noise patterns of each image."""
    g.eval()
    p = g.num_conditions
    xs = to_tensor(images).repeat_interleave(p, dim=0)
    noise = g(xs, torch.arange(p).repeat(len(images)))
    return float(pairwise_mae(noise.reshape(len(images), p, -1)).mean())
