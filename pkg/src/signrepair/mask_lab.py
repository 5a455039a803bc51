"""Block masks derived from horizontal/vertical segmentation lines."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SIZE = 64

# number of segmentation lines -> (horizontal, vertical) line counts
LEVEL_GRIDS: dict[int, tuple[tuple[int, int], ...]] = {
    1: ((1, 0), (0, 1)),
    2: ((1, 1),),
    4: ((2, 2),),
    6: ((3, 3),),
}
DEFAULT_LEVELS = (1, 2, 4, 6)


@dataclass(frozen=True)
class MaskGrid:
    h_lines: int
    v_lines: int

    def __post_init__(self):
        if self.h_lines < 0 or self.v_lines < 0:
            raise ValueError("line counts must be non-negative")
        if self.h_lines + self.v_lines < 1:
            raise ValueError("a mask grid needs at least one segmentation line")

    @property
    def rows(self) -> int:
        return self.h_lines + 1

    @property
    def cols(self) -> int:
        return self.v_lines + 1

    @property
    def blocks(self) -> int:
        return self.rows * self.cols

    def row_edges(self) -> list[int]:
        return [SIZE * i // self.rows for i in range(self.rows + 1)]

    def col_edges(self) -> list[int]:
        return [SIZE * j // self.cols for j in range(self.cols + 1)]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray
    grid: MaskGrid
    block_bits: tuple[int, ...]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def to_dict(self) -> dict:
        return {"h_lines": self.grid.h_lines, "v_lines": self.grid.v_lines, "bits": list(self.block_bits)}


def make_grid(h_lines: int, v_lines: int) -> MaskGrid:
    return MaskGrid(h_lines, v_lines)


def enumerate_patterns(grid: MaskGrid, policy: str = "single_block", k: int | None = None) -> list[tuple[int, ...]]:
    """Block bit-vectors for ``grid`` under ``policy``.

    ``single_block`` equals ``k_of_n`` with ``k=1``; ``all_proper_subsets`` is the
    concatenation of ``k_of_n`` for ``k = 1 .. n-1``. Within one ``k`` patterns
    follow ``itertools.combinations`` over row-major block indices.
    """
    n = grid.blocks
    if policy == "single_block":
        ks: Iterable[int] = (1,)
    elif policy == "all_proper_subsets":
        ks = range(1, n)
    elif policy == "k_of_n":
        if k is None or k <= 0 or k >= n:
            raise ValueError(f"k_of_n needs 0 < k < {n}, got {k}")
        ks = (k,)
    else:
        raise ValueError(f"unknown enumeration policy {policy!r}")
    patterns = []
    for kk in ks:
        for on in itertools.combinations(range(n), kk):
            bits = [0] * n
            for i in on:
                bits[i] = 1
            patterns.append(tuple(bits))
    return patterns


def rasterize(grid: MaskGrid, block_bits: Sequence[int]) -> BinaryMask:
    bits = tuple(int(b) for b in block_bits)
    if len(bits) != grid.blocks:
        raise ValueError(f"expected {grid.blocks} block bits, got {len(bits)}")
    if any(b not in (0, 1) for b in bits):
        raise ValueError("block bits must be 0 or 1")
    if not any(bits) or all(bits):
        raise ValueError("mask must select a proper, non-empty subset of blocks")
    out = np.zeros((SIZE, SIZE), np.uint8)
    re, ce = grid.row_edges(), grid.col_edges()
    for idx, b in enumerate(bits):
        if b:
            r, c = divmod(idx, grid.cols)
            out[re[r]:re[r + 1], ce[c]:ce[c + 1]] = 1
    out.setflags(write=False)
    return BinaryMask(out, grid, bits)


def grids_for_levels(levels: Iterable[int]) -> list[MaskGrid]:
    grids = []
    for level in levels:
        if level not in LEVEL_GRIDS:
            raise ValueError(f"unsupported segmentation-line level {level}; choose from {sorted(LEVEL_GRIDS)}")
        grids.extend(MaskGrid(h, v) for h, v in LEVEL_GRIDS[level])
    return grids


def mask_suite(levels: Iterable[int] = DEFAULT_LEVELS, policy: str = "single_block") -> list[BinaryMask]:
    """Rasterised masks for every grid of the requested line levels (33 by default)."""
    return [rasterize(g, p) for g in grids_for_levels(levels) for p in enumerate_patterns(g, policy)]


def masks_to_json(masks: Sequence[BinaryMask]) -> str:
    return json.dumps([m.to_dict() for m in masks])


def masks_from_json(text: str) -> list[BinaryMask]:
    return [rasterize(MaskGrid(d["h_lines"], d["v_lines"]), d["bits"]) for d in json.loads(text)]


def save_mask_png(mask: BinaryMask, path: str | Path) -> None:
    Image.fromarray(mask.bits.astype(bool)).convert("1").save(path)
