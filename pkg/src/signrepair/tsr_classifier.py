"""Frozen surrogate sign classifier, metrics and feature-similarity probes."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .sign_data import SIZE, Dataset, iter_batches

log = logging.getLogger(__name__)

ARCHITECTURES = {
    # conv widths, kernel sizes, hidden FC width
    "small": {"convs": (16, 32, 64), "kernels": (5, 5, 3), "hidden": 128},
    "medium": {"convs": (32, 64, 128), "kernels": (5, 3, 3), "hidden": 256},
}


class FrozenModelError(RuntimeError):
    """Raised when an operation would mutate or requires a frozen model."""


class SurrogateCNN(nn.Module):
    """LeNet-scale network: three conv+pool stages and two fully connected layers."""

    def __init__(self, num_classes: int, arch: str = "small", dropout: float = 0.5):
        super().__init__()
        spec = ARCHITECTURES[arch]
        convs, chans = [], 3
        for width, k in zip(spec["convs"], spec["kernels"]):
            convs.append(nn.Conv2d(chans, width, k, padding=k // 2))
            chans = width
        self.convs = nn.ModuleList(convs)
        flat = chans * (SIZE // 2 ** len(convs)) ** 2
        self.fc1 = nn.Linear(flat, spec["hidden"])
        self.fc2 = nn.Linear(spec["hidden"], num_classes)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, probes: dict | None = None) -> torch.Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if probes is not None:
                probes[f"conv{i + 1}"] = x
            x = F.max_pool2d(F.relu(x), 2)
        x = self.fc1(torch.flatten(x, 1))
        if probes is not None:
            probes["fc1"] = x
        x = self.fc2(self.dropout(F.relu(x)))
        if probes is not None:
            probes["fc2"] = x
        return x


@dataclass
class ClassifierConfig:
    arch: str = "small"
    lr: float = 1e-4
    batch_size: int = 32
    dropout: float = 0.5
    epochs: int = 10
    seed: int = 0


@dataclass
class Classifier:
    net: SurrogateCNN
    class_names: list[str]
    arch: str = "small"
    frozen: bool = False
    config_fingerprint: str = ""
    loss_curve: list[dict] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def freeze(self) -> "Classifier":
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def param_hash(self) -> str:
        return state_hash(self.net)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable logits for NCHW input; gradients flow to ``x`` only when frozen."""
        return self.net(x)

    def to_checkpoint(self) -> dict:
        return {
            "kind": "classifier",
            "architecture": {"name": "SurrogateCNN", "arch": self.arch,
                             "num_classes": self.num_classes, "dropout": self.net.dropout.p},
            "state_dict": {k: v.clone() for k, v in self.net.state_dict().items()},
            "class_names": list(self.class_names),
            "config_fingerprint": self.config_fingerprint,
            "frozen": self.frozen,
            "loss_curve": list(self.loss_curve),
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "Classifier":
        arch = ckpt["architecture"]
        net = SurrogateCNN(arch["num_classes"], arch["arch"], arch["dropout"])
        net.load_state_dict(ckpt["state_dict"])
        c = cls(net, list(ckpt["class_names"]), arch["arch"], False, ckpt.get("config_fingerprint", ""),
                list(ckpt.get("loss_curve", [])))
        return c.freeze() if ckpt.get("frozen") else c


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(N, H, W, 3)`` or ``(H, W, 3)`` array -> NCHW tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)


def train_classifier(d: Dataset, cfg: ClassifierConfig | None = None, fingerprint: str = "") -> Classifier:
    cfg = cfg or ClassifierConfig()
    x, y = d.arrays("train")
    if len(x) == 0:
        raise ValueError("train split is empty")
    present = set(y.tolist())
    missing = set(range(d.num_classes)) - present
    if d.num_classes < 2 or missing:
        raise ValueError(f"every class must appear in the train split (missing: {sorted(missing)}, "
                         f"declared classes: {d.num_classes})")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = SurrogateCNN(d.num_classes, cfg.arch, cfg.dropout)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    xt, yt = to_tensor(x), torch.from_numpy(y)
    curve = []
    for epoch in range(cfg.epochs):
        net.train()
        total = 0.0
        for idx in iter_batches(len(x), cfg.batch_size, rng):
            idx_t = torch.from_numpy(idx)
            loss = F.cross_entropy(net(xt[idx_t]), yt[idx_t])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append({"epoch": epoch + 1, "loss": total / len(x)})
        log.info("classifier epoch %d loss %.4f", epoch + 1, total / len(x))
    return Classifier(net, list(d.class_names), cfg.arch, False, fingerprint, curve).freeze()


@torch.no_grad()
def predict_batch(c: Classifier, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    if images.ndim != 4 or images.shape[1:] != (SIZE, SIZE, 3):
        raise ValueError(f"expected (N, {SIZE}, {SIZE}, 3) images, got {images.shape}")
    c.net.eval()
    probs = []
    for start in range(0, len(images), batch_size):
        logits = c.net(to_tensor(images[start:start + batch_size]).to(next(c.net.parameters()).dtype))
        probs.append(torch.softmax(logits.double(), dim=1).numpy())
    p = np.concatenate(probs) if probs else np.zeros((0, c.num_classes))
    return p.argmax(axis=1), p


def predict(c: Classifier, x: np.ndarray) -> tuple[int, np.ndarray]:
    if x.shape != (SIZE, SIZE, 3):
        raise ValueError(f"expected a ({SIZE}, {SIZE}, 3) image, got {x.shape}")
    labels, probs = predict_batch(c, x[None])
    return int(labels[0]), probs[0]


@dataclass
class Metrics:
    confusion: np.ndarray
    accuracy: float = field(init=False)
    per_class_precision: np.ndarray = field(init=False)
    precision_undefined: np.ndarray = field(init=False)

    def __post_init__(self):
        cm = self.confusion
        self.accuracy = float(np.trace(cm) / cm.sum())
        col = cm.sum(axis=0)
        self.precision_undefined = col == 0
        with np.errstate(invalid="ignore", divide="ignore"):
            self.per_class_precision = np.where(col > 0, np.diag(cm) / np.maximum(col, 1), 0.0)

    @property
    def mean_precision(self) -> float:
        return float(self.per_class_precision.mean())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_precision": self.mean_precision,
            "per_class_precision": [float(v) for v in self.per_class_precision],
            "precision_undefined": [bool(v) for v in self.precision_undefined],
            "confusion": self.confusion.astype(int).tolist(),
        }


def metrics_from_predictions(y_true, y_pred, num_classes: int) -> Metrics:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("cannot compute metrics on an empty sample set")
    cm = np.zeros((num_classes, num_classes), np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return Metrics(cm)


def evaluate(c: Classifier, images: np.ndarray, labels: np.ndarray) -> Metrics:
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    pred, _ = predict_batch(c, np.asarray(images, np.float32))
    return metrics_from_predictions(labels, pred, c.num_classes)


@torch.no_grad()
def feature_profile(c: Classifier, x: np.ndarray) -> dict[str, torch.Tensor]:
    """Pre-activation outputs of every conv stage and FC layer for one image."""
    probes: dict[str, torch.Tensor] = {}
    c.net.eval()
    c.net(to_tensor(x).to(next(c.net.parameters()).dtype), probes)
    return {k: v[0] for k, v in probes.items()}


def feature_similarity(c: Classifier, a: np.ndarray, b: np.ndarray) -> dict[str, float | None]:
    """Per-layer cosine similarity; ``None`` flags a zero-norm feature vector."""
    fa, fb = feature_profile(c, a), feature_profile(c, b)
    out: dict[str, float | None] = {}
    for name in fa:
        u, v = fa[name].double().ravel(), fb[name].double().ravel()
        nu, nv = u.norm().item(), v.norm().item()
        if nu == 0 or nv == 0:
            out[name] = None
        else:
            out[name] = float(np.clip((u @ v).item() / (nu * nv), -1.0, 1.0))
    return out


def input_gradient(c: Classifier, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Gradient of mean cross-entropy with respect to the input batch."""
    x = x.clone().requires_grad_(True)
    loss = F.cross_entropy(c.logits(x), y)
    (g,) = torch.autograd.grad(loss, x)
    return g
