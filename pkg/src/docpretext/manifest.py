"""Corpus manifests: JSON Lines with ``id``, ``image``, ``text`` and ``label``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .imagecore import load_grayscale

FIELDS = ("id", "image", "text", "label")


@dataclass(frozen=True)
class Entry:
    id: str
    image: str
    text: str | None = None
    label: str | None = None


@dataclass
class Manifest:
    entries: list[Entry]
    root: Path | None = None

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DomainError("manifest ids must be unique")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def labels(self) -> list[str]:
        return sorted({e.label for e in self.entries if e.label is not None})

    def subset(self, ids) -> "Manifest":
        keep = set(ids)
        return Manifest([e for e in self.entries if e.id in keep], root=self.root)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e)) + "\n" for e in self.entries)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str, root=None) -> "Manifest":
        entries = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if set(obj) != set(FIELDS):
                raise DomainError(f"line {n}: fields must be exactly {FIELDS}, got {sorted(obj)}")
            entries.append(Entry(**{k: obj[k] for k in FIELDS}))
        return cls(entries, root=None if root is None else Path(root))

    @classmethod
    def load(cls, path, check_files: bool = True) -> "Manifest":
        """Read a manifest; relative paths resolve against its directory."""
        path = Path(path)
        m = cls.from_jsonl(path.read_text(), root=path.parent)
        if check_files:
            for e in m.entries:
                for ref in (e.image, e.text):
                    if ref is not None and not m.resolve(ref).is_file():
                        raise FileNotFoundError(f"{e.id}: missing file {ref}")
        return m


def load_images(manifest: Manifest, size: int = 384) -> dict[str, np.ndarray]:
    return {e.id: load_grayscale(manifest.resolve(e.image), size, size) for e in manifest}


def load_texts(manifest: Manifest) -> dict[str, str]:
    out = {}
    for e in manifest:
        if e.text is not None:
            out[e.id] = manifest.resolve(e.text).read_text(encoding="utf-8")
    return out
