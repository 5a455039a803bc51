"""Attention-based multi-view repair network.

Each of the ``R`` views passes through a small CNN and a squeeze-excitation
block. At every pixel the ``R`` recalibrated feature vectors form a token
sequence; multi-head scaled dot-product attention mixes them across views, the
per-query results are averaged, heads are summed, and a 1x1 convolution with a
sigmoid emits the repaired RGB image.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .mask_lab import BinaryMask
from .patch_forge import Generator, contaminate, generate_noise
from .sign_data import SIZE, Dataset, synthesize_views
from .tsr_classifier import Classifier, FrozenModelError, to_images, to_tensor

log = logging.getLogger(__name__)


class SEBlock(nn.Module):
    """Squeeze (global mean) -> FC 16 -> FC 16 -> FC C (sigmoid) -> channel rescale."""

    def __init__(self, channels: int = 3, hidden: Sequence[int] = (16, 16)):
        super().__init__()
        dims = [channels, *hidden]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU(inplace=True)]
        layers += [nn.Linear(dims[-1], channels), nn.Sigmoid()]
        self.excite = nn.Sequential(*layers)
        # test hook: a fixed excitation weight replacing the learned one
        self.forced_weight: float | None = None

    @staticmethod
    def squeeze(x: torch.Tensor) -> torch.Tensor:
        # float64 accumulation makes the mean of a constant channel exact
        return x.double().mean(dim=(-2, -1)).to(x.dtype)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        if self.forced_weight is not None:
            return torch.full(x.shape[:2], self.forced_weight, dtype=x.dtype)
        return self.excite(self.squeeze(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.weights(x)[:, :, None, None]


def se_recalibrate(block: SEBlock, features: torch.Tensor) -> torch.Tensor:
    if features.ndim != 4:
        raise ValueError(f"expected an (N, C, H, W) feature map, got shape {tuple(features.shape)}")
    return block(features)


class ViewExtractor(nn.Module):
    """Three conv units, each conv -> ReLU -> BatchNorm."""

    def __init__(self, widths: Sequence[int] = (16, 16, 3)):
        super().__init__()
        layers: list[nn.Module] = []
        chans = 3
        for w in widths:
            layers += [nn.Conv2d(chans, w, 3, padding=1), nn.ReLU(inplace=True), nn.BatchNorm2d(w)]
            chans = w
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class CrossViewAttention(nn.Module):
    """Per-pixel multi-head attention across the view axis.

    With ``shared=True`` one V/K/Q triple serves every view, which makes the
    fused output invariant to view order; otherwise each view slot owns its
    projections and the view count is fixed to ``views``.
    """

    def __init__(self, channels: int, heads: int = 4, key_dim: int = 8, value_dim: int = 8,
                 shared: bool = True, views: int = 6, head_merge: str = "sum"):
        super().__init__()
        if head_merge not in ("sum", "mean"):
            raise ValueError(f"unknown head merge {head_merge!r}")
        slots = 1 if shared else views
        self.shared, self.views, self.heads = shared, views, heads
        self.key_dim, self.head_merge = key_dim, head_merge
        scale = 1.0 / math.sqrt(channels)
        self.wq = nn.Parameter(torch.randn(slots, heads, channels, key_dim) * scale)
        self.wk = nn.Parameter(torch.randn(slots, heads, channels, key_dim) * scale)
        self.wv = nn.Parameter(torch.randn(slots, heads, channels, value_dim) * scale)
        self.enabled = True

    def _project(self, tokens: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        # tokens (B, P, R, C), w (slots, H, C, D) -> (B, H, P, R, D)
        r = tokens.shape[2]
        if not self.shared and r != self.views:
            raise ValueError(f"per-view projections need exactly {self.views} views, got {r}")
        w = w.expand(r, -1, -1, -1) if self.shared else w
        return torch.einsum("bprc,rhcd->bhprd", tokens, w)

    def forward(self, tokens: torch.Tensor, return_weights: bool = False):
        """``tokens`` is ``(B, P, R, C)``; returns ``(B, P, D)`` and optionally the weights.

        Weights come back as ``(B, heads, P, R_query, R_key)``.
        """
        if self.shared and self.enabled:
            return self._shared_forward(tokens, return_weights)
        v = self._project(tokens, self.wv)
        r = tokens.shape[2]
        if self.enabled:
            q = self._project(tokens, self.wq)
            k = self._project(tokens, self.wk)
            scores = torch.einsum("bhpqd,bhpsd->bhpqs", q, k) / math.sqrt(self.key_dim)
            attn = torch.softmax(scores, dim=-1)
        else:
            b, h, p = v.shape[:3]
            attn = v.new_full((b, h, p, r, r), 1.0 / r)
        per_query = torch.einsum("bhpqs,bhpsd->bhpqd", attn, v)
        fused = per_query.mean(dim=3)
        fused = fused.sum(dim=1) if self.head_merge == "sum" else fused.mean(dim=1)
        return (fused, attn) if return_weights else fused

    def _shared_forward(self, tokens: torch.Tensor, return_weights: bool):
        # With tied projections q_i . k_j = x_i^T (Wq Wk^T) x_j, so scores contract
        # over the C token channels instead of the key width, and the value
        # projection can be applied once after the attention-weighted average.
        x = tokens.permute(0, 2, 3, 1)  # (B, R, C, P)
        r = x.shape[1]
        bilinear = torch.einsum("hcd,hed->hce", self.wq[0], self.wk[0]) / math.sqrt(self.key_dim)
        keys = torch.einsum("brep,hce->bhcrp", x, bilinear)
        # averaging over queries commutes with the weighted sum over views
        mean_attn = 0
        weights = []
        for i in range(r):
            attn = torch.softmax((x[:, i, None, :, None, :] * keys).sum(dim=2), dim=2)  # (B, H, R, P)
            mean_attn = mean_attn + attn
            if return_weights:
                weights.append(attn)
        mixed = torch.einsum("bhrp,brcp->bhcp", mean_attn / r, x)
        fused = torch.einsum("bhcp,hcd->bpd", mixed, self.wv[0])
        if self.head_merge == "mean":
            fused = fused / self.heads
        if not return_weights:
            return fused
        return fused, torch.stack(weights, dim=2).permute(0, 1, 4, 2, 3)


@dataclass
class ReconstructorConfig:
    views: int = 6
    min_views: int = 2
    max_views: int = 10
    extractor_widths: tuple[int, ...] = (16, 16, 3)
    se_hidden: tuple[int, ...] = (16, 16)
    heads: int = 4
    key_dim: int = 8
    value_dim: int = 8
    shared_weights: bool = True
    head_merge: str = "sum"
    attention: bool = True
    fidelity_weight: float = 0.1
    clean_fraction: float = 0.5
    view_jitter: bool = True
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 500
    seed: int = 0


class Reconstructor(nn.Module):
    def __init__(self, cfg: ReconstructorConfig | None = None):
        super().__init__()
        cfg = cfg or ReconstructorConfig()
        self.cfg = cfg
        if not 2 <= cfg.min_views <= cfg.views <= cfg.max_views:
            raise ValueError("view range must satisfy 2 <= min_views <= views <= max_views")
        channels = cfg.extractor_widths[-1]
        n = 1 if cfg.shared_weights else cfg.views
        self.extractors = nn.ModuleList(ViewExtractor(cfg.extractor_widths) for _ in range(n))
        self.se = nn.ModuleList(SEBlock(channels, cfg.se_hidden) for _ in range(n))
        self.attention = CrossViewAttention(channels, cfg.heads, cfg.key_dim, cfg.value_dim,
                                            cfg.shared_weights, cfg.views, cfg.head_merge)
        self.attention.enabled = cfg.attention
        self.head = nn.Conv2d(cfg.value_dim, 3, 1)

    def view_features(self, views: torch.Tensor) -> torch.Tensor:
        """``(B, R, 3, H, W)`` -> recalibrated features ``(B, R, C, H, W)``."""
        b, r = views.shape[:2]
        if self.cfg.shared_weights:
            flat = views.reshape(b * r, *views.shape[2:])
            feats = self.se[0](self.extractors[0](flat))
            return feats.reshape(b, r, *feats.shape[1:])
        if r != self.cfg.views:
            raise ValueError(f"per-view weights need exactly {self.cfg.views} views, got {r}")
        return torch.stack([self.se[i](self.extractors[i](views[:, i])) for i in range(r)], dim=1)

    def fuse(self, feats: torch.Tensor, return_weights: bool = False):
        b, r, c, h, w = feats.shape
        if r < 2:
            raise ValueError("cross-view fusion needs at least two views")
        tokens = feats.permute(0, 3, 4, 1, 2).reshape(b, h * w, r, c)
        fused, attn = self.attention(tokens, return_weights=True)
        image = torch.sigmoid(self.head(fused.transpose(1, 2).reshape(b, -1, h, w)))
        return (image, attn) if return_weights else image

    def forward(self, views: torch.Tensor, return_weights: bool = False):
        r = views.shape[1]
        if not self.cfg.min_views <= r <= self.cfg.max_views:
            raise ValueError(f"view count {r} outside [{self.cfg.min_views}, {self.cfg.max_views}]")
        return self.fuse(self.view_features(views), return_weights)

    def to_checkpoint(self) -> dict:
        return {"kind": "reconstructor", "architecture": {"name": "Reconstructor", **_cfg_dict(self.cfg)},
                "state_dict": {k: v.clone() for k, v in self.state_dict().items()}}

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "Reconstructor":
        arch = dict(ckpt["architecture"])
        arch.pop("name")
        for key in ("extractor_widths", "se_hidden"):
            arch[key] = tuple(arch[key])
        s = cls(ReconstructorConfig(**arch))
        s.load_state_dict(ckpt["state_dict"])
        return s.eval()


def _cfg_dict(cfg: ReconstructorConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()}


def views_tensor(views: np.ndarray) -> torch.Tensor:
    """``(B, R, H, W, 3)`` or ``(R, H, W, 3)`` array -> ``(B, R, 3, H, W)`` tensor."""
    arr = np.asarray(views, np.float32)
    if arr.ndim == 4:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 1, 4, 2, 3)))


def fuse_views(s: Reconstructor, per_view_features: Sequence[torch.Tensor]) -> np.ndarray:
    """Fuse ``R`` feature maps of shape ``(C, H, W)`` into one image."""
    if len(per_view_features) < 2:
        raise ValueError("cross-view fusion needs at least two views")
    shapes = {tuple(f.shape) for f in per_view_features}
    if len(shapes) != 1:
        raise ValueError(f"view feature shapes differ: {shapes}")
    s.eval()
    with torch.no_grad():
        out = s.fuse(torch.stack(list(per_view_features))[None])
    return to_images(out)[0]


def repair(s: Reconstructor, views: np.ndarray) -> np.ndarray:
    """Repair one multi-view input ``(R, 64, 64, 3)`` into a single image."""
    if views.ndim != 4 or views.shape[1:] != (SIZE, SIZE, 3):
        raise ValueError(f"expected (R, {SIZE}, {SIZE}, 3) views, got {views.shape}")
    return repair_batch(s, views[None])[0]


@torch.no_grad()
def repair_batch(s: Reconstructor, views: np.ndarray, batch_size: int = 64) -> np.ndarray:
    s.eval()
    out = [to_images(s(views_tensor(views[i:i + batch_size]))) for i in range(0, len(views), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, SIZE, SIZE, 3), np.float32)


def repair_objective(c: Classifier, repaired: torch.Tensor, y: torch.Tensor,
                     clean: torch.Tensor | None = None, fidelity_weight: float = 0.0) -> torch.Tensor:
    """Classifier cross-entropy on repaired images plus optional L1 fidelity to the clean sign."""
    loss = F.cross_entropy(c.logits(repaired), y)
    if fidelity_weight > 0 and clean is not None:
        loss = loss + fidelity_weight * (repaired - clean).abs().mean()
    return loss


@dataclass
class GeneratorThreat:
    """Training-time contamination source: a trained generator plus its mask suite.

    With ``balance_levels`` a segmentation level is drawn uniformly first and a
    mask within it second, so the many small blocks of fine grids do not
    swamp the coarse ones.
    """

    generator: Generator
    masks: Sequence[BinaryMask]
    balance_levels: bool = True

    def _pick_masks(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if not self.balance_levels:
            return rng.integers(0, len(self.masks), size=n)
        levels: dict[int, list[int]] = {}
        for i, m in enumerate(self.masks):
            levels.setdefault(m.grid.h_lines + m.grid.v_lines, []).append(i)
        groups = [levels[k] for k in sorted(levels)]
        which = rng.integers(0, len(groups), size=n)
        return np.array([groups[w][rng.integers(len(groups[w]))] for w in which], dtype=np.int64)

    def contaminate_views(self, views: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Contaminate each view of ``(N, H, W, 3)`` with its own mask and condition slot."""
        n = len(views)
        conds = rng.integers(0, self.generator.num_conditions, size=n)
        picks = self._pick_masks(n, rng)
        noise = generate_noise(self.generator, views, conds)
        bits = np.stack([self.masks[i].bits for i in picks])
        return contaminate(views, noise, bits)


def build_view_sets(images: np.ndarray, views: int, rng: np.random.Generator, jitter: bool = True) -> np.ndarray:
    return np.stack([synthesize_views(img, views, rng, jitter) for img in images])


@dataclass
class ReconstructorRun:
    reconstructor: Reconstructor
    loss_curve: list[dict] = field(default_factory=list)


def train_reconstructor(c: Classifier, clean: Dataset, threat: GeneratorThreat,
                        cfg: ReconstructorConfig | None = None) -> ReconstructorRun:
    """Minimise classifier cross-entropy on repaired multi-view inputs.

    Each batch mixes clean and generator-contaminated view sets according to
    ``cfg.clean_fraction``. Only :class:`GeneratorThreat` is accepted, keeping
    evaluation-only attack families out of training.
    """
    cfg = cfg or ReconstructorConfig()
    if not c.frozen:
        raise FrozenModelError("refusing to train a reconstructor against an unfrozen classifier")
    if not isinstance(threat, GeneratorThreat):
        raise TypeError("reconstructor training accepts only generator-based threats")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    s = Reconstructor(cfg)
    x, y = clean.arrays("train")
    if len(x) == 0:
        raise ValueError("train split is empty")
    opt = torch.optim.Adam(s.parameters(), lr=cfg.lr)
    before = c.param_hash()
    curve = []
    running = 0.0
    for step in range(cfg.steps):
        s.train()
        idx = rng.integers(0, len(x), size=cfg.batch_size)
        sets = build_view_sets(x[idx], cfg.views, rng, cfg.view_jitter)
        dirty = rng.random(cfg.batch_size) >= cfg.clean_fraction
        if dirty.any():
            sub = sets[dirty]
            sets[dirty] = threat.contaminate_views(sub.reshape(-1, SIZE, SIZE, 3), rng).reshape(sub.shape)
        out = s(views_tensor(sets))
        loss = repair_objective(c, out, torch.from_numpy(y[idx]), to_tensor(x[idx]), cfg.fidelity_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        running += loss.item()
        if (step + 1) % 50 == 0 or step + 1 == cfg.steps:
            span = (step % 50) + 1
            curve.append({"step": step + 1, "loss": running / span})
            log.info("reconstructor step %d loss %.4f", step + 1, running / span)
            running = 0.0
    if c.param_hash() != before:
        raise FrozenModelError("classifier parameters changed during reconstructor training")
    s.eval()
    return ReconstructorRun(s, curve)
