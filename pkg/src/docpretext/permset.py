"""Jigsaw label space: greedy selection of well-separated permutations."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DomainError, UnsupportedError

MAX_CELLS = 9


def hamming(p, q) -> int:
    """Number of positions at which two permutations disagree."""
    if len(p) != len(q):
        raise DomainError(f"length mismatch: {len(p)} vs {len(q)}")
    return sum(a != b for a, b in zip(p, q))


def is_permutation(p) -> bool:
    return sorted(p) == list(range(len(p)))


def invert(p) -> tuple[int, ...]:
    inv = [0] * len(p)
    for i, j in enumerate(p):
        inv[j] = i
    return tuple(inv)


@lru_cache(maxsize=None)
def _all_permutations(n: int) -> np.ndarray:
    # itertools yields lexicographic order, so argmax picks the smallest on ties
    out = np.array(list(itertools.permutations(range(n))), dtype=np.int8)
    out.setflags(write=False)
    return out


@dataclass
class PermutationSet:
    n_cells: int
    seed: int
    perms: list[tuple[int, ...]]
    index_of: dict[tuple[int, ...], int] = field(init=False, repr=False)

    def __post_init__(self):
        self.perms = [tuple(int(v) for v in p) for p in self.perms]
        self.index_of = {p: i for i, p in enumerate(self.perms)}
        if len(self.index_of) != len(self.perms):
            raise DomainError("permutations must be distinct")
        for p in self.perms:
            if len(p) != self.n_cells or not is_permutation(p):
                raise DomainError(f"{p} is not a permutation of {self.n_cells} cells")

    def __len__(self):
        return len(self.perms)

    def to_json(self) -> str:
        return json.dumps(
            {"n_cells": self.n_cells, "seed": self.seed, "perms": [list(p) for p in self.perms]}
        )

    @classmethod
    def from_json(cls, text: str) -> "PermutationSet":
        obj = json.loads(text)
        return cls(n_cells=int(obj["n_cells"]), seed=int(obj["seed"]), perms=obj["perms"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "PermutationSet":
        return cls.from_json(Path(path).read_text())


def select_permutations(n_cells: int = 9, count: int = 100, seed: int = 0) -> PermutationSet:
    """Greedy max-average-Hamming selection.

    Starts from a seeded uniformly random permutation, then repeatedly adds
    the unchosen permutation with the largest summed (equivalently average)
    Hamming distance to everything chosen so far. Ties go to the
    lexicographically smallest candidate.
    """
    if n_cells < 1:
        raise DomainError("n_cells must be positive")
    if n_cells > MAX_CELLS:
        raise UnsupportedError(f"n_cells={n_cells} exceeds the enumerable limit {MAX_CELLS}")
    total = math.factorial(n_cells)
    if not 1 <= count <= total:
        raise DomainError(f"count must be in 1..{total}, got {count}")

    cands = _all_permutations(n_cells)
    rng = np.random.default_rng(seed)
    first = int(rng.integers(total))
    chosen = [first]
    taken = np.zeros(total, dtype=bool)
    taken[first] = True
    dist_sum = np.zeros(total, dtype=np.int64)
    while len(chosen) < count:
        dist_sum += (cands != cands[chosen[-1]]).sum(axis=1)
        score = np.where(taken, -1, dist_sum)
        nxt = int(np.argmax(score))
        chosen.append(nxt)
        taken[nxt] = True
    return PermutationSet(n_cells=n_cells, seed=seed, perms=[tuple(cands[i].tolist()) for i in chosen])


def label_of(pset: PermutationSet, p) -> int:
    key = tuple(int(v) for v in p)
    try:
        return pset.index_of[key]
    except KeyError:
        raise KeyError(f"permutation {key} is not in the set") from None


def mean_pairwise_hamming(perms) -> float:
    arr = np.asarray(perms)
    n = len(arr)
    if n < 2:
        return 0.0
    d = (arr[:, None, :] != arr[None, :, :]).sum(axis=2)
    return float(d.sum()) / (n * (n - 1))
