"""Seed derivation.

Every subsystem gets its own stream derived from ``(root, tag)`` so that
changing how many numbers one subsystem draws never perturbs another.
The derivation is ``int.from_bytes(sha256(f"{root}:{tag}")[:8], "little")``.
"""

import hashlib
import os

import numpy as np

DEFAULT_ROOT_SEED = 0


def derive_seed(root: int, tag: str) -> int:
    digest = hashlib.sha256(f"{int(root)}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(root: int, tag: str | None = None) -> np.random.Generator:
    seed = int(root) if tag is None else derive_seed(root, tag)
    return np.random.default_rng(seed)


def root_seed_from_env(default: int = DEFAULT_ROOT_SEED) -> int:
    value = os.environ.get("DOCPRETEXT_SEED")
    return int(value) if value not in (None, "") else default
