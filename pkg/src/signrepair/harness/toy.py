"""Procedurally rendered sign-like corpus used as a desk-scale dataset."""
from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageDraw

from ..sign_data import SIZE, Dataset, SignSample

SS = 4  # supersampling factor
RED, WHITE, BLUE = (200, 30, 35), (245, 245, 245), (30, 70, 170)
YELLOW, BLACK, GREEN = (245, 200, 30), (20, 20, 20), (30, 140, 70)

# (name, outline shape, fill, border, glyph, glyph colour)
CLASSES = [
    ("stop", "octagon", RED, WHITE, "hbar", WHITE),
    ("yield", "tri_down", WHITE, RED, None, None),
    ("warning", "tri_up", WHITE, RED, "exclaim", BLACK),
    ("speed_limit", "circle", WHITE, RED, "digits", BLACK),
    ("no_overtaking", "circle", WHITE, RED, "twin", BLACK),
    ("no_entry", "circle", RED, None, "hbar", WHITE),
    ("ahead_only", "circle", BLUE, None, "arrow_up", WHITE),
    ("turn_right", "circle", BLUE, None, "arrow_right", WHITE),
    ("roundabout", "circle", BLUE, None, "ring", WHITE),
    ("parking", "square", BLUE, WHITE, "p", WHITE),
    ("priority_road", "diamond", YELLOW, WHITE, None, None),
    ("first_aid", "square", GREEN, WHITE, "cross", WHITE),
]


def _outline(shape: str, r: float) -> list[tuple[float, float]] | None:
    if shape == "octagon":
        return [(r * math.cos(math.pi / 8 + k * math.pi / 4), r * math.sin(math.pi / 8 + k * math.pi / 4))
                for k in range(8)]
    if shape == "tri_up":
        return [(r * math.cos(-math.pi / 2 + k * 2 * math.pi / 3), r * math.sin(-math.pi / 2 + k * 2 * math.pi / 3) + 0.15 * r)
                for k in range(3)]
    if shape == "tri_down":
        return [(r * math.cos(math.pi / 2 + k * 2 * math.pi / 3), r * math.sin(math.pi / 2 + k * 2 * math.pi / 3) - 0.15 * r)
                for k in range(3)]
    if shape == "diamond":
        return [(0, -r), (r, 0), (0, r), (-r, 0)]
    if shape == "square":
        s = r * 0.82
        return [(-s, -s), (s, -s), (s, s), (-s, s)]
    return None


def _glyph(kind: str, r: float) -> list[tuple[str, list]]:
    """Glyph primitives in sign-centred coordinates."""
    u = r
    if kind == "hbar":
        return [("rect", [(-0.6 * u, -0.14 * u), (0.6 * u, 0.14 * u)])]
    if kind == "exclaim":
        return [("rect", [(-0.07 * u, -0.25 * u), (0.07 * u, 0.2 * u)]),
                ("rect", [(-0.07 * u, 0.3 * u), (0.07 * u, 0.42 * u)])]
    if kind == "digits":
        return [("rect", [(-0.4 * u, -0.35 * u), (-0.1 * u, 0.35 * u)]),
                ("rect", [(0.1 * u, -0.35 * u), (0.4 * u, 0.35 * u)])]
    if kind == "arrow_up":
        return [("poly", [(0, -0.6 * u), (0.4 * u, -0.1 * u), (-0.4 * u, -0.1 * u)]),
                ("rect", [(-0.13 * u, -0.15 * u), (0.13 * u, 0.6 * u)])]
    if kind == "arrow_right":
        return [("poly", [(0.6 * u, 0), (0.1 * u, 0.4 * u), (0.1 * u, -0.4 * u)]),
                ("rect", [(-0.6 * u, -0.13 * u), (0.15 * u, 0.13 * u)])]
    if kind == "p":
        return [("rect", [(-0.3 * u, -0.5 * u), (-0.08 * u, 0.5 * u)]),
                ("rect", [(-0.1 * u, -0.5 * u), (0.3 * u, 0.05 * u)])]
    if kind == "cross":
        return [("rect", [(-0.5 * u, -0.14 * u), (0.5 * u, 0.14 * u)]),
                ("rect", [(-0.14 * u, -0.5 * u), (0.14 * u, 0.5 * u)])]
    if kind == "twin":
        return [("ellipse", [(-0.5 * u, -0.2 * u), (-0.1 * u, 0.2 * u)]),
                ("ellipse", [(0.1 * u, -0.2 * u), (0.5 * u, 0.2 * u)])]
    if kind == "ring":
        return [("ring", [(-0.5 * u, -0.5 * u), (0.5 * u, 0.5 * u)])]
    raise ValueError(kind)


def _jitter_colour(rgb, rng, amount=18):
    return tuple(int(np.clip(v + rng.integers(-amount, amount + 1), 0, 255)) for v in rgb)


def render_sign(class_index: int, rng: np.random.Generator) -> np.ndarray:
    """One 64x64 sign with pose, colour and background jitter, quantised to 1/255."""
    _, shape, fill, border, glyph, glyph_col = CLASSES[class_index]
    big = SIZE * SS
    top = rng.uniform(60, 200, size=3)
    bottom = rng.uniform(60, 200, size=3)
    ramp = np.linspace(0, 1, big)[:, None, None]
    bg = (top * (1 - ramp) + bottom * ramp).repeat(big, axis=1)
    canvas = Image.fromarray(np.clip(bg, 0, 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(canvas)

    r = rng.uniform(0.38, 0.46) * big
    cx = big / 2 + rng.uniform(-2.5, 2.5) * SS
    cy = big / 2 + rng.uniform(-2.5, 2.5) * SS
    angle = math.radians(rng.uniform(-8, 8))
    ca, sa = math.cos(angle), math.sin(angle)

    def place(pts):
        return [(cx + x * ca - y * sa, cy + x * sa + y * ca) for x, y in pts]

    fill_c = _jitter_colour(fill, rng)
    outline = _outline(shape, r)
    if border is not None:
        border_c = _jitter_colour(border, rng)
        if outline is None:
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=border_c)
        else:
            draw.polygon(place(outline), fill=border_c)
        inner = r * 0.78
    else:
        inner = r
    if outline is None:
        draw.ellipse([cx - inner, cy - inner, cx + inner, cy + inner], fill=fill_c)
    else:
        draw.polygon(place(_outline(shape, inner)), fill=fill_c)

    if glyph is not None:
        gc = _jitter_colour(glyph_col, rng)
        for prim, pts in _glyph(glyph, inner * 0.85):
            if prim == "rect":
                (x0, y0), (x1, y1) = pts
                draw.polygon(place([(x0, y0), (x1, y0), (x1, y1), (x0, y1)]), fill=gc)
            elif prim == "poly":
                draw.polygon(place(pts), fill=gc)
            else:
                (x0, y0), (x1, y1) = pts
                (px, py), = place([((x0 + x1) / 2, (y0 + y1) / 2)])
                rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
                if prim == "ellipse":
                    draw.ellipse([px - rx, py - ry, px + rx, py + ry], fill=gc)
                else:
                    draw.ellipse([px - rx, py - ry, px + rx, py + ry], outline=gc, width=int(0.2 * rx))
    small = canvas.resize((SIZE, SIZE), Image.LANCZOS)
    return np.asarray(small, dtype=np.float32) / 255.0


def make_toy_dataset(classes: int = 10, per_class: int = 200, seed: int = 0,
                     test_fraction: float = 0.2) -> Dataset:
    """``classes * per_class`` rendered signs with a stratified seeded split."""
    if classes < 2:
        raise ValueError("toy corpus needs at least two classes")
    if classes > len(CLASSES):
        raise ValueError(f"toy corpus supports at most {len(CLASSES)} classes")
    if per_class < 2:
        raise ValueError("need at least two samples per class for a train/test split")
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(per_class * test_fraction)))
    samples = []
    for label in range(classes):
        name = CLASSES[label][0]
        for i in range(per_class):
            samples.append(SignSample(
                image=render_sign(label, rng), label=label, class_name=name,
                view_group=f"{name}-{i:04d}", uid=f"toy/{name}/{i:04d}",
                split="test" if i >= per_class - n_test else "train"))
    return Dataset(samples, [c[0] for c in CLASSES[:classes]])
