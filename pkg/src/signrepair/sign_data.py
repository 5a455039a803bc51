"""Sign image ingestion, canonicalization and augmentation.

Images are ``float32`` arrays of shape ``(64, 64, 3)`` with values in ``[0, 1]``.
Pixel coordinates follow the ``(x, y)`` = ``(column, row)`` convention, so an
affine translation ``c = (5, 0)`` shifts content five columns to the right.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence, Union

import numpy as np
from PIL import Image

SIZE = 64
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
MANIFEST_COLUMNS = (
    "relative_path", "label_index", "class_name", "view_group", "split",
    "roi_x", "roi_y", "roi_w", "roi_h",
)


class IngestionError(Exception):
    """Raised when a manifest or one of its images cannot be read."""


class ValidationError(ValueError):
    """Raised when ingested data violates a dataset invariant."""


@dataclass
class SignSample:
    image: np.ndarray
    label: int
    class_name: str
    view_group: str
    uid: str
    split: str = "train"


@dataclass
class Dataset:
    samples: list[SignSample]
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def train(self) -> list[SignSample]:
        return [s for s in self.samples if s.split == "train"]

    @property
    def test(self) -> list[SignSample]:
        return [s for s in self.samples if s.split == "test"]

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Stack one split into ``(N, 64, 64, 3)`` images and ``(N,)`` labels."""
        chosen = [s for s in self.samples if s.split == split]
        if not chosen:
            return np.zeros((0, SIZE, SIZE, 3), np.float32), np.zeros(0, np.int64)
        return (np.stack([s.image for s in chosen]).astype(np.float32),
                np.array([s.label for s in chosen], dtype=np.int64))

    def validate(self) -> None:
        uids = set()
        for s in self.samples:
            if s.image.shape != (SIZE, SIZE, 3):
                raise ValidationError(f"{s.uid}: image shape {s.image.shape}")
            if s.image.min() < 0 or s.image.max() > 1:
                raise ValidationError(f"{s.uid}: pixel values outside [0, 1]")
            if not 0 <= s.label < self.num_classes:
                raise ValidationError(
                    f"{s.uid}: label {s.label} outside [0, {self.num_classes})")
            if s.split not in ("train", "test"):
                raise ValidationError(f"{s.uid}: unknown split {s.split!r}")
            if s.uid in uids:
                raise ValidationError(f"duplicate sample id {s.uid}")
            uids.add(s.uid)
        missing = set(range(self.num_classes)) - {s.label for s in self.train}
        if missing:
            raise ValidationError(f"classes absent from train split: {sorted(missing)}")


@dataclass(frozen=True)
class AffineParams:
    """``d = A b + c`` in pixel coordinates."""

    linear: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 1.0)
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if abs(self.det) < 1e-12:
            raise ValueError(f"singular affine matrix {self.linear}")

    @property
    def det(self) -> float:
        a00, a01, a10, a11 = self.linear
        return a00 * a11 - a01 * a10

    def homogeneous(self) -> np.ndarray:
        a00, a01, a10, a11 = self.linear
        c0, c1 = self.translation
        return np.array([[a00, a01, c0], [a10, a11, c1], [0.0, 0.0, 1.0]])

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls()

    @classmethod
    def about_center(cls, linear: Sequence[float], shift=(0.0, 0.0)) -> "AffineParams":
        """Apply ``linear`` about the image center, then translate by ``shift``."""
        a = np.asarray(linear, dtype=np.float64).reshape(2, 2)
        center = np.array([(SIZE - 1) / 2.0] * 2)
        c = center - a @ center + np.asarray(shift, dtype=np.float64)
        return cls(tuple(float(v) for v in a.ravel()), (float(c[0]), float(c[1])))

    @classmethod
    def rotation(cls, degrees: float, shift=(0.0, 0.0)) -> "AffineParams":
        t = math.radians(degrees)
        cos, sin = math.cos(t), math.sin(t)
        # exact values for quarter turns keep nearest-neighbour round trips exact
        if degrees % 90 == 0:
            cos, sin = float(round(cos)), float(round(sin))
        return cls.about_center((cos, -sin, sin, cos), shift)

    @classmethod
    def shear(cls, amount: float) -> "AffineParams":
        return cls.about_center((1.0, amount, 0.0, 1.0))

    @classmethod
    def translation_by(cls, dx: float, dy: float) -> "AffineParams":
        return cls(translation=(float(dx), float(dy)))


@dataclass(frozen=True)
class PhotometricParams:
    brightness: float = 1.0
    saturation: float = 1.0
    contrast: float = 1.0

    def __post_init__(self):
        if self.brightness <= 0:
            raise ValueError(f"brightness must be > 0, got {self.brightness}")
        if self.contrast <= 0:
            raise ValueError(f"contrast must be > 0, got {self.contrast}")
        if self.saturation < 0:
            raise ValueError(f"saturation must be >= 0, got {self.saturation}")


Transform = Union[AffineParams, PhotometricParams]
RecipeEntry = Union[Transform, Callable[[np.random.Generator], Transform]]


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")


def affine_transform(image: np.ndarray, p: AffineParams, interpolation: str = "bilinear") -> np.ndarray:
    """Warp ``image`` by ``p`` using inverse mapping; uncovered pixels become 0."""
    _check_image(image)
    if abs(p.det) < 1e-12:
        raise ValueError("singular affine matrix")
    h, w = image.shape[:2]
    inv = np.linalg.inv(p.homogeneous())
    ys, xs = np.mgrid[0:h, 0:w]
    dest = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)]).astype(np.float64)
    sx, sy, _ = inv @ dest
    src = image.astype(np.float32)
    if interpolation == "nearest":
        ix = np.floor(sx + 0.5).astype(np.int64)
        iy = np.floor(sy + 0.5).astype(np.int64)
        ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.zeros((h * w, 3), np.float32)
        out[ok] = src[iy[ok], ix[ok]]
        return out.reshape(h, w, 3)
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(np.float32)[:, None]
    fy = (sy - y0).astype(np.float32)[:, None]
    padded = np.zeros((h + 2, w + 2, 3), np.float32)
    padded[1:-1, 1:-1] = src

    def tap(yy, xx):
        yy = np.clip(yy + 1, 0, h + 1)
        xx = np.clip(xx + 1, 0, w + 1)
        return padded[yy, xx]

    out = ((1 - fx) * (1 - fy) * tap(y0, x0) + fx * (1 - fy) * tap(y0, x0 + 1)
           + (1 - fx) * fy * tap(y0 + 1, x0) + fx * fy * tap(y0 + 1, x0 + 1))
    return np.clip(out, 0.0, 1.0).reshape(h, w, 3)


def photometric_adjust(image: np.ndarray, p: PhotometricParams) -> np.ndarray:
    """Brightness, then saturation, then contrast; factors of exactly 1 are skipped."""
    _check_image(image)
    if p.brightness <= 0 or p.contrast <= 0 or p.saturation < 0:
        raise ValueError(f"invalid photometric parameters {p}")
    out = image.astype(np.float32, copy=True)
    if p.brightness != 1.0:
        out = out * np.float32(p.brightness)
    if p.saturation != 1.0:
        luma = (out @ LUMA)[..., None]
        out = luma + np.float32(p.saturation) * (out - luma)
    if p.contrast != 1.0:
        mean = np.float32((out @ LUMA).mean())
        out = mean + np.float32(p.contrast) * (out - mean)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_transform(image: np.ndarray, t: Transform, interpolation: str = "bilinear") -> np.ndarray:
    if isinstance(t, AffineParams):
        if t == AffineParams.identity():
            return image.astype(np.float32, copy=True)
        return affine_transform(image, t, interpolation)
    if isinstance(t, PhotometricParams):
        return photometric_adjust(image, t)
    raise TypeError(f"not a transform: {t!r}")


def crop_and_canonicalize(image: np.ndarray, roi: tuple[int, int, int, int] | None = None) -> np.ndarray:
    """Crop ``roi = (x, y, w, h)`` and resize anisotropically to 64x64."""
    _check_image(image)
    if roi is not None:
        x, y, w, h = roi
        if w <= 0 or h <= 0:
            raise ValueError(f"empty ROI {roi}")
        image = image[y:y + h, x:x + w]
        if image.shape[0] != h or image.shape[1] != w:
            raise ValueError(f"ROI {roi} exceeds image bounds")
    image = image.astype(np.float32)
    if image.shape[:2] == (SIZE, SIZE):
        return np.clip(image, 0.0, 1.0)
    channels = [
        np.asarray(Image.fromarray(image[..., k], mode="F").resize((SIZE, SIZE), Image.BILINEAR))
        for k in range(3)
    ]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)


def default_recipe() -> list[Transform]:
    """Identity plus seven geometric and photometric variants (eight in total)."""
    return [
        AffineParams.identity(),
        AffineParams.rotation(15.0),
        AffineParams.rotation(-15.0),
        AffineParams.shear(0.15),
        PhotometricParams(brightness=0.7),
        PhotometricParams(brightness=1.3),
        PhotometricParams(saturation=0.6),
        PhotometricParams(contrast=1.4),
    ]


def augment_dataset(d: Dataset, recipe: Sequence[RecipeEntry] | None = None, seed: int = 0) -> Dataset:
    """Replace each train sample by one derivation per recipe entry.

    Recipe entries are either fixed transforms or callables drawing a transform
    from a seeded generator. The test split is carried over untouched.
    """
    if recipe is None:
        recipe = default_recipe()
    if len(recipe) == 0:
        raise ValueError("augmentation recipe is empty")
    rng = np.random.default_rng(seed)
    out: list[SignSample] = []
    for s in d.samples:
        if s.split != "train":
            out.append(s)
            continue
        for i, entry in enumerate(recipe):
            t = entry(rng) if callable(entry) else entry
            out.append(replace(s, image=apply_transform(s.image, t), uid=f"{s.uid}#aug{i}"))
    return Dataset(out, list(d.class_names))


def random_view_transform(rng: np.random.Generator, max_rotation: float = 5.0, max_shift: float = 2.0,
                          photometric: float = 0.15) -> list[Transform]:
    """Small pose/lighting change used to synthesise one extra camera view."""
    rot = AffineParams.rotation(float(rng.uniform(-max_rotation, max_rotation)),
                                shift=tuple(rng.uniform(-max_shift, max_shift, size=2)))
    photo = PhotometricParams(
        brightness=float(rng.uniform(1 - photometric, 1 + photometric)),
        saturation=float(rng.uniform(1 - photometric, 1 + photometric)),
        contrast=float(rng.uniform(1 - photometric, 1 + photometric)),
    )
    return [rot, photo]


def synthesize_views(image: np.ndarray, count: int, rng: np.random.Generator, jitter: bool = True) -> np.ndarray:
    """``count`` jittered copies of ``image`` as an ``(R, 64, 64, 3)`` array."""
    views = []
    for _ in range(count):
        v = image
        if jitter:
            for t in random_view_transform(rng):
                v = apply_transform(v, t)
        views.append(v.astype(np.float32, copy=True))
    return np.stack(views)


# ---------------------------------------------------------------- manifests

def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError as e:
        raise IngestionError(f"image file not found: {path}") from e
    except (OSError, ValueError) as e:
        raise IngestionError(f"cannot decode image {path}: {e}") from e
    return arr


def write_image(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(image), mode="RGB").save(path)


def _seeded_split(rows: list[dict], seed: int, test_fraction: float) -> list[str]:
    rng = np.random.default_rng(seed)
    splits = ["train"] * len(rows)
    by_label: dict[int, list[int]] = {}
    for i, r in enumerate(rows):
        by_label.setdefault(int(r["label_index"]), []).append(i)
    for label in sorted(by_label):
        idx = np.array(by_label[label])
        rng.shuffle(idx)
        n_test = int(round(len(idx) * test_fraction))
        n_test = min(n_test, len(idx) - 1)
        for i in idx[:n_test]:
            splits[int(i)] = "test"
    return splits


def load_manifest(path: str | Path, seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """Load a manifest-described image directory.

    ``path`` holds ``manifest.json`` (``{"classes": [...], "samples": [...]}``) or
    ``manifest.csv`` with the columns in ``MANIFEST_COLUMNS``; a CSV may be
    accompanied by ``classes.txt`` declaring the class names in index order.
    """
    root = Path(path)
    declared: list[str] | None = None
    if (root / "manifest.json").exists():
        doc = json.loads((root / "manifest.json").read_text())
        rows = [dict(r) for r in doc["samples"]]
        declared = doc.get("classes")
    elif (root / "manifest.csv").exists():
        with open(root / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if (root / "classes.txt").exists():
            declared = [ln.strip() for ln in (root / "classes.txt").read_text().splitlines() if ln.strip()]
    else:
        raise IngestionError(f"no manifest.json or manifest.csv in {root}")
    if not rows:
        raise IngestionError(f"manifest in {root} lists no samples")

    for r in rows:
        r["label_index"] = int(r["label_index"])
    if declared is None:
        names: dict[int, str] = {}
        for r in rows:
            names.setdefault(r["label_index"], str(r.get("class_name") or r["label_index"]))
        declared = [names.get(i, str(i)) for i in range(max(names) + 1)]
    for r in rows:
        if not 0 <= r["label_index"] < len(declared):
            raise ValidationError(
                f"{r['relative_path']}: label {r['label_index']} outside declared "
                f"class count {len(declared)}")

    if all(str(r.get("split") or "") in ("train", "test") for r in rows):
        splits = [str(r["split"]) for r in rows]
    else:
        splits = _seeded_split(rows, seed, test_fraction)

    samples = []
    for r, split in zip(rows, splits):
        image = read_image(root / r["relative_path"])
        roi = None
        if all(str(r.get(k, "")).strip() not in ("", "None") for k in ("roi_x", "roi_y", "roi_w", "roi_h")):
            roi = tuple(int(float(r[k])) for k in ("roi_x", "roi_y", "roi_w", "roi_h"))
        samples.append(SignSample(
            image=crop_and_canonicalize(image, roi),
            label=r["label_index"],
            class_name=str(r.get("class_name") or declared[r["label_index"]]),
            view_group=str(r.get("view_group") or r["relative_path"]),
            uid=str(r["relative_path"]),
            split=split,
        ))
    d = Dataset(samples, list(declared))
    d.validate()
    return d


def write_manifest(d: Dataset, root: str | Path, fmt: str = "csv") -> Path:
    """Write every sample as PNG plus a manifest; the inverse of ``load_manifest``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(d.samples):
        rel = f"images/{s.label:03d}/{i:06d}.png"
        write_image(root / rel, s.image)
        rows.append({"relative_path": rel, "label_index": s.label, "class_name": s.class_name,
                     "view_group": s.view_group, "split": s.split,
                     "roi_x": "", "roi_y": "", "roi_w": "", "roi_h": ""})
    if fmt == "json":
        path = root / "manifest.json"
        path.write_text(json.dumps({"classes": d.class_names, "samples": rows}, indent=1))
    else:
        path = root / "manifest.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        (root / "classes.txt").write_text("\n".join(d.class_names) + "\n")
    return path


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterable[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
