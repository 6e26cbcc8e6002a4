"""Labeled samples for the visual pretext tasks.

Four tasks live here: Jigsaw Whole (scrambled 3x3 mosaic, label is the
permutation index), Relative Patches (center patch plus one neighbour,
label is the neighbour's position), Rotations and Flips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imagecore
from .errors import DomainError
from .imagecore import GrayImage, Rect
from .permset import PermutationSet, label_of

JIGSAW = "jigsaw_whole"
RELATIVE = "relative_patches"
ROTATIONS = "rotations"
FLIPS = "flips"
LDA = "lda_topics"
NAT = "nat"

# (row, col) of each neighbour, clockwise from top-left
NEIGHBOURS = ((0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0))

FLIP_CLASSES = ("identity", "horizontal", "vertical", "both")


@dataclass(frozen=True)
class GridSpec:
    image_size: int = 384
    grid: int = 3
    patch: int = 118
    jitter: int = 10

    @property
    def cell(self) -> int:
        return self.image_size // self.grid

    @property
    def canvas(self) -> int:
        return self.grid * self.patch

    def validate(self) -> "GridSpec":
        if self.grid < 1 or self.image_size % self.grid:
            raise DomainError(f"grid {self.grid} does not divide image size {self.image_size}")
        if self.patch < 1 or self.patch > self.cell:
            raise DomainError(f"patch {self.patch} does not fit in cell {self.cell}")
        if self.jitter < 0:
            raise DomainError("jitter must be non-negative")
        return self


@dataclass
class PretextSample:
    inputs: tuple
    target: object
    task: str
    meta: dict | None = None

    @property
    def is_soft(self) -> bool:
        return isinstance(self.target, np.ndarray)


def grid_cells(spec: GridSpec) -> list[Rect]:
    spec.validate()
    c = spec.cell
    return [Rect(j * c, i * c, c, c) for i in range(spec.grid) for j in range(spec.grid)]


def jitter_window(spec: GridSpec) -> tuple[int, int]:
    """Inclusive range of admissible per-axis offsets inside a cell.

    The window has width ``min(jitter, cell - patch)`` and is centred in the
    slack, so ``jitter=0`` yields the centred crop.
    """
    spec.validate()
    slack = spec.cell - spec.patch
    j = min(spec.jitter, slack)
    lo = (slack - j) // 2
    return lo, lo + j


def sample_patch(img: GrayImage, cell: Rect, spec: GridSpec, rng: np.random.Generator) -> GrayImage:
    lo, hi = jitter_window(spec)
    dx, dy = rng.integers(lo, hi + 1, size=2)
    return imagecore.crop(img, Rect(cell.x + int(dx), cell.y + int(dy), spec.patch, spec.patch))


def _check_square(img, size: int):
    if np.shape(img) != (size, size):
        raise DomainError(f"expected a {size}x{size} image, got {np.shape(img)}")


def assemble(tiles, perm, grid: int) -> GrayImage:
    """Place ``tiles[i]`` at destination cell ``perm[i]`` of a square mosaic."""
    p = tiles[0].shape[0]
    out = np.empty((grid * p, grid * p), dtype=tiles[0].dtype)
    for src, dst in enumerate(perm):
        r, c = divmod(dst, grid)
        out[r * p:(r + 1) * p, c * p:(c + 1) * p] = tiles[src]
    return out


def split_tiles(canvas: GrayImage, grid: int) -> list[GrayImage]:
    p = canvas.shape[0] // grid
    return [canvas[r * p:(r + 1) * p, c * p:(c + 1) * p].copy()
            for r in range(grid) for c in range(grid)]


def make_jigsaw_whole(img: GrayImage, pset: PermutationSet, spec: GridSpec,
                      rng: np.random.Generator) -> PretextSample:
    spec.validate()
    _check_square(img, spec.image_size)
    if pset.n_cells != spec.grid ** 2:
        raise DomainError(f"permutation set has {pset.n_cells} cells, grid needs {spec.grid ** 2}")
    label = int(rng.integers(len(pset)))
    perm = pset.perms[label]
    tiles = [sample_patch(img, cell, spec, rng) for cell in grid_cells(spec)]
    return PretextSample((assemble(tiles, perm, spec.grid),), label_of(pset, perm), JIGSAW)


def make_relative_pair(img: GrayImage, spec: GridSpec, rng: np.random.Generator) -> PretextSample:
    if spec.grid != 3:
        raise DomainError("relative patches need a 3x3 grid")
    _check_square(img, spec.image_size)
    cells = grid_cells(spec)
    label = int(rng.integers(len(NEIGHBOURS)))
    r, c = NEIGHBOURS[label]
    center = sample_patch(img, cells[4], spec, rng)
    other = sample_patch(img, cells[r * 3 + c], spec, rng)
    return PretextSample((center, other), label, RELATIVE)


def make_rotation_sample(img: GrayImage, rng: np.random.Generator) -> PretextSample:
    k = int(rng.integers(4))
    return PretextSample((imagecore.rotate90(img, k),), k, ROTATIONS)


def apply_flip_class(img: GrayImage, cls: int) -> GrayImage:
    out = np.array(img)
    if cls & 1:
        out = imagecore.flip(out, imagecore.HORIZONTAL)
    if cls & 2:
        out = imagecore.flip(out, imagecore.VERTICAL)
    return out


def make_flip_sample(img: GrayImage, rng: np.random.Generator) -> PretextSample:
    cls = int(rng.integers(len(FLIP_CLASSES)))
    return PretextSample((apply_flip_class(img, cls),), cls, FLIPS)


LABEL_SPACE = {RELATIVE: len(NEIGHBOURS), ROTATIONS: 4, FLIPS: len(FLIP_CLASSES)}


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def export_shards(images: dict, task: str, seed: int, out_dir, *, pset: PermutationSet | None = None,
                  spec: GridSpec = GridSpec()) -> Path:
    """Write one sample per image as PNG inputs plus ``labels.jsonl``.

    ``images`` maps id to gray image; ids are visited in sorted order and
    sample ``i`` uses ``sample_rng(seed, i)``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, key in enumerate(sorted(images)):
        rng = sample_rng(seed, i)
        img = images[key]
        if task == JIGSAW:
            if pset is None:
                raise DomainError("jigsaw export needs a permutation set")
            s = make_jigsaw_whole(img, pset, spec, rng)
        elif task == RELATIVE:
            s = make_relative_pair(img, spec, rng)
        elif task == ROTATIONS:
            s = make_rotation_sample(img, rng)
        elif task == FLIPS:
            s = make_flip_sample(img, rng)
        else:
            raise DomainError(f"no shard export for task {task!r}")
        for j, inp in enumerate(s.inputs):
            imagecore.save_grayscale(inp, out / f"{key}_{j}.png")
        lines.append(json.dumps({"id": key, "task": task, "target": s.target}))
    (out / "labels.jsonl").write_text("".join(line + "\n" for line in lines))
    return out
