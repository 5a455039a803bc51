"""Parametric renderers for four light-patch attack families.

IS  infrared spot: soft disk blended toward a bright, near-saturated colour.
LL  laser line: anti-aliased stripe blended toward a laser colour.
NLS natural-light shadow: polygon whose pixels are multiplied by a factor < 1.
PG  projected graffiti: low-frequency colour texture blended over a rectangle.

Every renderer leaves pixels outside its footprint bit-identical.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

SIZE = 64
KINDS = ("IS", "LL", "NLS", "PG")

# sampling ranges per kind; calibrated on the toy corpus so each suite fools the
# surrogate classifier
RANGES = {
    "IS": {"radius": (16.0, 22.0), "alpha": (0.95, 1.0), "spread": 18.0,
           "color": ((1.0, 1.0), (0.55, 0.9), (0.85, 1.0))},
    "LL": {"width": (12.0, 18.0), "alpha": (0.95, 1.0), "spread": 14.0},
    "NLS": {"factor": (0.03, 0.12), "vertices": (3, 6), "span": (44.0, 60.0), "spread": 16.0},
    "PG": {"side": (34, 46), "alpha": (0.9, 1.0), "cells": (2, 4), "spread": 18.0},
}
CENTER = (SIZE - 1) / 2.0


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    geometry: dict
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    alpha: float = 1.0
    factor: float | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(d["kind"], dict(d["geometry"]), tuple(d["color"]), d["alpha"], d.get("factor"), d["seed"])


def _disk_alpha(center, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    dist = np.hypot(xs - center[0], ys - center[1])
    return np.clip(radius + 1.0 - dist, 0.0, 1.0)


def _line_alpha(p0, p1, width: float) -> np.ndarray:
    ys, xs = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    a, b = np.asarray(p0, float), np.asarray(p1, float)
    ab = b - a
    t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / (ab @ ab), 0.0, 1.0)
    dist = np.hypot(xs - (a[0] + t * ab[0]), ys - (a[1] + t * ab[1]))
    return np.clip(width / 2.0 + 1.0 - dist, 0.0, 1.0)


def _polygon_mask(vertices) -> np.ndarray:
    canvas = Image.new("L", (SIZE, SIZE), 0)
    ImageDraw.Draw(canvas).polygon([tuple(map(float, v)) for v in vertices], fill=1)
    return np.asarray(canvas, dtype=bool)


def _polygon_area(vertices) -> float:
    v = np.asarray(vertices, float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1)))


def texture_tile(seed: int, cells: int, w: int, h: int) -> np.ndarray:
    """Seeded low-frequency colour noise upsampled bilinearly to ``(h, w, 3)``."""
    coarse = np.random.default_rng(seed).uniform(0.0, 1.0, size=(cells, cells, 3)).astype(np.float32)
    chans = [np.asarray(Image.fromarray(coarse[..., k], mode="F").resize((w, h), Image.BILINEAR))
             for k in range(3)]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def footprint(spec: AttackSpec) -> np.ndarray:
    """Blend weight per pixel in ``[0, 1]``; zero exactly outside the patch."""
    g = spec.geometry
    if spec.kind == "IS":
        if g["radius"] <= 0:
            raise ValueError("infrared spot radius must be positive")
        return _disk_alpha(g["center"], g["radius"])
    if spec.kind == "LL":
        if g["width"] <= 0:
            raise ValueError("laser line width must be positive")
        if np.allclose(g["p0"], g["p1"]):
            raise ValueError("laser line endpoints coincide")
        return _line_alpha(g["p0"], g["p1"], g["width"])
    if spec.kind == "NLS":
        if len(g["vertices"]) < 3 or _polygon_area(g["vertices"]) <= 0:
            raise ValueError("shadow polygon has zero area")
        return _polygon_mask(g["vertices"]).astype(np.float64)
    if spec.kind == "PG":
        x, y, w, h = g["rect"]
        if w <= 0 or h <= 0:
            raise ValueError("graffiti rectangle has zero area")
        out = np.zeros((SIZE, SIZE))
        out[max(y, 0):min(y + h, SIZE), max(x, 0):min(x + w, SIZE)] = 1.0
        return out
    raise ValueError(f"unknown attack kind {spec.kind!r}")


def apply_light_patch(x: np.ndarray, spec: AttackSpec) -> np.ndarray:
    if x.shape != (SIZE, SIZE, 3):
        raise ValueError(f"expected a ({SIZE}, {SIZE}, 3) image, got {x.shape}")
    weight = footprint(spec)
    inside = weight > 0
    out = x.astype(np.float32, copy=True)
    if spec.kind == "NLS":
        if spec.factor is None or not 0 < spec.factor < 1:
            raise ValueError("shadow factor must lie in (0, 1)")
        out[inside] = x[inside] * np.float32(spec.factor)
        return out
    if not 0 < spec.alpha <= 1:
        raise ValueError("blend alpha must lie in (0, 1]")
    a = (weight * spec.alpha).astype(np.float32)[..., None]
    if spec.kind == "PG":
        gx, gy, w, h = spec.geometry["rect"]
        tile = texture_tile(spec.geometry["tile_seed"], spec.geometry["cells"], w, h)
        target = np.zeros_like(out)
        ys, xs = slice(max(gy, 0), min(gy + h, SIZE)), slice(max(gx, 0), min(gx + w, SIZE))
        target[ys, xs] = tile[ys.start - gy:ys.stop - gy, xs.start - gx:xs.stop - gx]
    else:
        target = np.broadcast_to(np.asarray(spec.color, np.float32), out.shape)
    blended = np.clip(x * (1 - a) + target * a, 0.0, 1.0)
    out[inside] = blended[inside]
    return out


def _sample_spec(kind: str, rng: np.random.Generator, seed: int, r: dict) -> AttackSpec:
    if kind == "IS":
        radius = float(rng.uniform(*r["radius"]))
        center = [float(v) for v in CENTER + rng.uniform(-r["spread"], r["spread"], size=2)]
        color = tuple(float(rng.uniform(lo, hi)) for lo, hi in r["color"])
        return AttackSpec(kind, {"center": center, "radius": radius}, color,
                          float(rng.uniform(*r["alpha"])), None, seed)
    if kind == "LL":
        # a line crossing the sign region, entering and leaving on opposite sides
        t0, t1 = CENTER + rng.uniform(-r["spread"], r["spread"], size=2)
        if rng.random() < 0.5:
            p0, p1 = [0.0, float(t0)], [float(SIZE - 1), float(t1)]
        else:
            p0, p1 = [float(t0), 0.0], [float(t1), float(SIZE - 1)]
        hue = int(rng.integers(3))
        color = tuple(1.0 if k == hue else float(rng.uniform(0.0, 0.25)) for k in range(3))
        return AttackSpec(kind, {"p0": p0, "p1": p1, "width": float(rng.uniform(*r["width"]))},
                          color, float(rng.uniform(*r["alpha"])), None, seed)
    if kind == "NLS":
        n = int(rng.integers(r["vertices"][0], r["vertices"][1] + 1))
        span = float(rng.uniform(*r["span"]))
        cx, cy = CENTER + rng.uniform(-r["spread"], r["spread"], size=2)
        # evenly spread vertex angles with jitter keep the polygon convex-ish and fat
        angles = rng.uniform(0, 2 * np.pi) + 2 * np.pi * (np.arange(n) + rng.uniform(-0.3, 0.3, size=n)) / n
        radii = rng.uniform(0.6, 1.0, size=n) * span / 2
        verts = [[float(cx + rr * np.cos(t)), float(cy + rr * np.sin(t))] for rr, t in zip(radii, angles)]
        if _polygon_area(verts) < 1.0:
            verts = [[cx - span / 2, cy - span / 2], [cx + span / 2, cy - span / 2], [cx, cy + span / 2]]
            verts = [[float(a), float(b)] for a, b in verts]
        return AttackSpec(kind, {"vertices": verts}, (0.0, 0.0, 0.0), 1.0,
                          float(rng.uniform(*r["factor"])), seed)
    if kind == "PG":
        w, h = (int(v) for v in rng.integers(r["side"][0], r["side"][1] + 1, size=2))
        x0 = int(round(CENTER - w / 2 + rng.uniform(-r["spread"], r["spread"])))
        y0 = int(round(CENTER - h / 2 + rng.uniform(-r["spread"], r["spread"])))
        geometry = {"rect": [x0, y0, w, h], "tile_seed": int(rng.integers(2**31)),
                    "cells": int(rng.integers(r["cells"][0], r["cells"][1] + 1))}
        return AttackSpec(kind, geometry, (1.0, 1.0, 1.0), float(rng.uniform(*r["alpha"])), None, seed)
    raise ValueError(f"unknown attack kind {kind!r}")


def make_attack_suite(kind: str, count: int, seed: int, ranges: dict | None = None) -> list[AttackSpec]:
    """``count`` seeded specs; ``ranges`` overrides entries of ``RANGES[kind]``."""
    if kind not in KINDS:
        raise ValueError(f"unknown attack kind {kind!r}; expected one of {KINDS}")
    if count < 1:
        raise ValueError("attack suite needs at least one spec")
    r = {**RANGES[kind], **(ranges or {})}
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    return [_sample_spec(kind, rng, seed, r) for _ in range(count)]


def suite_to_json(specs: Sequence[AttackSpec]) -> str:
    return json.dumps([s.to_dict() for s in specs])


def suite_from_json(text: str) -> list[AttackSpec]:
    return [AttackSpec.from_dict(d) for d in json.loads(text)]
