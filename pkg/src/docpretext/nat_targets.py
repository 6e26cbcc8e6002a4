"""Noise-as-Targets: fixed random unit vectors matched to images.

Each image owns one row of a bank of unit-sphere targets. Within a batch
the rows currently owned by the batch's images are re-matched to the
features by an exact maximum-similarity assignment, then the features are
pulled toward their matched targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import DomainError

MAX_BATCH = 256
_UNIT_TOL = 1e-4


@dataclass
class TargetBank:
    targets: np.ndarray
    seed: int
    # image id (as str) -> target row
    assignment: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.targets.shape[1]

    def row_of(self, key) -> int:
        return self.assignment[str(key)]

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "d": self.d,
            "targets": self.targets.tolist(),
            "assignment": {str(k): int(v) for k, v in self.assignment.items()},
        })

    @classmethod
    def from_json(cls, text: str) -> "TargetBank":
        obj = json.loads(text)
        targets = np.asarray(obj["targets"], dtype=np.float64).reshape(-1, int(obj["d"]))
        assignment = {k: int(v) for k, v in obj["assignment"].items()}
        return cls(targets=targets, seed=int(obj["seed"]), assignment=assignment)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "TargetBank":
        return cls.from_json(Path(path).read_text())


def sample_targets(n: int, d: int, seed: int, ids=None) -> TargetBank:
    """``n`` i.i.d. Gaussian vectors projected onto the unit sphere."""
    if n < 1 or d < 1:
        raise DomainError("n and d must be positive")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, d))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # a zero draw has probability zero, but guard against it anyway
    norms[norms == 0] = 1.0
    keys = [str(k) for k in (range(n) if ids is None else ids)]
    if len(keys) != n:
        raise DomainError(f"{len(keys)} ids for {n} targets")
    return TargetBank(targets=g / norms, seed=seed, assignment={k: i for i, k in enumerate(keys)})


def assign_batch(features, candidate_targets, max_batch: int = MAX_BATCH) -> np.ndarray:
    """Permutation ``s`` maximizing ``sum_i features[i] . targets[s[i]]``."""
    f = np.asarray(features, dtype=np.float64)
    t = np.asarray(candidate_targets, dtype=np.float64)
    if f.ndim != 2 or f.shape != t.shape:
        raise DomainError(f"shape mismatch: {f.shape} vs {t.shape}")
    if f.shape[0] > max_batch:
        raise DomainError(f"batch of {f.shape[0]} exceeds cap {max_batch}")
    rows, cols = linear_sum_assignment(f @ t.T, maximize=True)
    sigma = np.empty(len(rows), dtype=np.int64)
    sigma[rows] = cols
    return sigma


def reassign(bank: TargetBank, ids, features) -> np.ndarray:
    """Re-match the targets owned by ``ids`` to ``features``; returns their rows."""
    keys = [str(k) for k in ids]
    rows = np.array([bank.assignment[k] for k in keys])
    sigma = assign_batch(features, bank.targets[rows])
    new_rows = rows[sigma]
    for k, r in zip(keys, new_rows):
        bank.assignment[k] = int(r)
    return new_rows


def _check_unit(x: torch.Tensor, name: str):
    norms = torch.linalg.vector_norm(x.detach(), dim=-1)
    if torch.any(torch.abs(norms - 1) > _UNIT_TOL):
        raise DomainError(f"rows of {name} must have unit norm")


def nat_loss(features, assigned_targets) -> torch.Tensor:
    """``-(1/m) sum_i features[i] . targets[i]`` for unit-norm rows."""
    f = torch.as_tensor(features)
    t = torch.as_tensor(assigned_targets, dtype=f.dtype)
    if f.shape != t.shape:
        raise DomainError(f"shape mismatch: {tuple(f.shape)} vs {tuple(t.shape)}")
    f2, t2 = f.reshape(-1, f.shape[-1]), t.reshape(-1, t.shape[-1])
    _check_unit(f2, "features")
    _check_unit(t2, "targets")
    return -(f2 * t2).sum(dim=1).mean()
