"""OCR text to LDA topic mixtures used as soft labels for images.

Text is cleaned and tokenized, a vocabulary is pruned by document
frequency, an LDA model is fitted by collapsed Gibbs sampling, and each
document's topic mixture becomes the regression target for its image.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np

from .errors import DomainError
from .pretext_geometry import LDA, PretextSample

NUM_TOKEN = "<num>"
_SIMPLEX_TOL = 1e-9


@dataclass
class TokenDoc:
    doc_id: str
    tokens: list[str]


def clean_text(raw: str) -> list[str]:
    """Lowercase, map digit runs to ``<num>``, split on everything non-alphanumeric."""
    out = []
    for i, piece in enumerate(raw.lower().split(NUM_TOKEN)):
        if i:
            out.append(NUM_TOKEN)
        for kind, run in groupby(piece, key=_char_kind):
            if kind == "alpha":
                out.append("".join(run))
            elif kind == "num":
                out.append(NUM_TOKEN)
    return out


def _char_kind(ch: str) -> str:
    if ch.isalpha():
        return "alpha"
    if ch.isnumeric():
        return "num"
    return ""


@dataclass
class Vocabulary:
    terms: list[str]
    min_df: int = 1
    max_size: int = 0
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.terms)}
        if len(self.index) != len(self.terms):
            raise DomainError("vocabulary terms must be distinct")

    def __len__(self):
        return len(self.terms)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        """Word ids of in-vocabulary tokens, in order; unknown tokens are dropped."""
        idx = self.index
        return np.array([idx[t] for t in tokens if t in idx], dtype=np.int64)


def _tokens(doc) -> Sequence[str]:
    return doc.tokens if isinstance(doc, TokenDoc) else doc


def build_vocab(docs, min_df: int = 5, max_size: int = 10000) -> Vocabulary:
    if min_df < 1:
        raise DomainError("min_df must be at least 1")
    df = Counter()
    for doc in docs:
        df.update(set(_tokens(doc)))
    kept = [(t, n) for t, n in df.items() if n >= min_df]
    if max_size and len(kept) > max_size:
        kept.sort(key=lambda tn: (-tn[1], tn[0]))
        kept = kept[:max_size]
    if not kept:
        raise DomainError("no term survives the document-frequency cut")
    return Vocabulary(sorted(t for t, _ in kept), min_df=min_df, max_size=max_size)


@dataclass
class TopicModel:
    K: int
    vocab: Vocabulary
    topic_word_counts: np.ndarray
    alpha: float
    beta: float
    seed: int
    iters: int
    doc_topic_counts: np.ndarray | None = None
    doc_ids: list[str] | None = None

    @property
    def V(self) -> int:
        return len(self.vocab)

    def topic_word(self) -> np.ndarray:
        """Smoothed topic-word distributions, ``K x V``."""
        nkw = self.topic_word_counts.astype(np.float64)
        return (nkw + self.beta) / (nkw.sum(axis=1, keepdims=True) + self.V * self.beta)

    def train_theta(self, i: int) -> np.ndarray:
        """Topic mixture of training document ``i`` from its final sweep counts."""
        if self.doc_topic_counts is None:
            raise DomainError("model carries no training document counts")
        n = self.doc_topic_counts[i].astype(np.float64)
        return (n + self.alpha) / (n.sum() + self.K * self.alpha)

    def to_json(self) -> str:
        obj = {
            "K": self.K,
            "alpha": self.alpha,
            "beta": self.beta,
            "seed": self.seed,
            "iters": self.iters,
            "vocab": self.vocab.terms,
            "min_df": self.vocab.min_df,
            "max_size": self.vocab.max_size,
            "topic_word_counts": self.topic_word_counts.tolist(),
        }
        if self.doc_topic_counts is not None:
            obj["doc_topic_counts"] = self.doc_topic_counts.tolist()
            obj["doc_ids"] = self.doc_ids
        return json.dumps(obj)

    @classmethod
    def from_json(cls, text: str) -> "TopicModel":
        obj = json.loads(text)
        K = int(obj["K"])
        vocab = Vocabulary(list(obj["vocab"]), min_df=int(obj.get("min_df", 1)),
                           max_size=int(obj.get("max_size", 0)))
        nkw = np.asarray(obj["topic_word_counts"], dtype=np.int64).reshape(K, len(vocab))
        ndk = obj.get("doc_topic_counts")
        if ndk is not None:
            ndk = np.asarray(ndk, dtype=np.int64).reshape(-1, K)
        return cls(K=K, vocab=vocab, topic_word_counts=nkw, alpha=float(obj["alpha"]),
                   beta=float(obj["beta"]), seed=int(obj["seed"]), iters=int(obj["iters"]),
                   doc_topic_counts=ndk, doc_ids=obj.get("doc_ids"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "TopicModel":
        return cls.from_json(Path(path).read_text())


@numba.njit(cache=True)
def _draw(p, r):
    k = 0
    last = p.shape[0] - 1
    while k < last and p[k] <= r:
        k += 1
    return k


@numba.njit(cache=True)
def _fit_sweep(words, docs, z, nkw, ndk, nk, u, alpha, beta, vbeta, p):
    K = nk.shape[0]
    for i in range(words.shape[0]):
        w = words[i]
        d = docs[i]
        k = z[i]
        nkw[k, w] -= 1
        ndk[d, k] -= 1
        nk[k] -= 1
        total = 0.0
        for t in range(K):
            total += (ndk[d, t] + alpha) * (nkw[t, w] + beta) / (nk[t] + vbeta)
            p[t] = total
        k = _draw(p, u[i] * total)
        z[i] = k
        nkw[k, w] += 1
        ndk[d, k] += 1
        nk[k] += 1


@numba.njit(cache=True)
def _infer_sweep(words, z, phi, nd, u, alpha, p):
    K = nd.shape[0]
    for i in range(words.shape[0]):
        w = words[i]
        nd[z[i]] -= 1
        total = 0.0
        for t in range(K):
            total += (nd[t] + alpha) * phi[t, w]
            p[t] = total
        k = _draw(p, u[i] * total)
        z[i] = k
        nd[k] += 1


def _flatten(docs) -> tuple[np.ndarray, np.ndarray]:
    words = [np.asarray(d, dtype=np.int64) for d in docs]
    doc_of = [np.full(len(w), i, dtype=np.int64) for i, w in enumerate(words)]
    if not words:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(words), np.concatenate(doc_of)


def lda_fit(docs, vocab: Vocabulary, K: int, alpha: float | None = None, beta: float = 0.01,
            iters: int = 200, seed: int = 0, doc_ids=None,
            callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> TopicModel:
    """Collapsed Gibbs sampling.

    ``docs`` are sequences of word ids over ``vocab``. ``alpha`` defaults to
    ``50 / K``. ``callback(sweep, topic_word_counts, doc_topic_counts)`` runs
    after every sweep.
    """
    if K < 1 or iters < 1 or beta <= 0:
        raise DomainError("need K >= 1, iters >= 1 and beta > 0")
    alpha = 50.0 / K if alpha is None else float(alpha)
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    words, doc_of = _flatten(docs)
    if words.size == 0:
        raise DomainError("corpus has no tokens")
    V = len(vocab)
    if words.max() >= V or words.min() < 0:
        raise DomainError("word id outside the vocabulary")

    rng = np.random.default_rng(seed)
    z = rng.integers(K, size=words.size).astype(np.int64)
    nkw = np.zeros((K, V), dtype=np.int64)
    ndk = np.zeros((len(docs), K), dtype=np.int64)
    np.add.at(nkw, (z, words), 1)
    np.add.at(ndk, (doc_of, z), 1)
    nk = nkw.sum(axis=1)
    p = np.empty(K)
    for sweep in range(iters):
        _fit_sweep(words, doc_of, z, nkw, ndk, nk, rng.random(words.size), alpha, beta, V * beta, p)
        if callback is not None:
            callback(sweep, nkw, ndk)
    ids = None if doc_ids is None else [str(d) for d in doc_ids]
    return TopicModel(K=K, vocab=vocab, topic_word_counts=nkw, alpha=alpha, beta=float(beta),
                      seed=seed, iters=iters, doc_topic_counts=ndk, doc_ids=ids)


def lda_infer(model: TopicModel, doc, iters: int = 50, burn_in: int = 10, seed: int = 0) -> np.ndarray:
    """Fold-in Gibbs with frozen topics; posterior-mean topic mixture."""
    if not 0 <= burn_in < iters:
        raise DomainError("need 0 <= burn_in < iters")
    K = model.K
    words = np.asarray(doc, dtype=np.int64)
    if words.size == 0:
        return np.full(K, 1.0 / K)
    phi = model.topic_word()
    rng = np.random.default_rng(seed)
    z = rng.integers(K, size=words.size).astype(np.int64)
    nd = np.bincount(z, minlength=K).astype(np.int64)
    p = np.empty(K)
    acc = np.zeros(K)
    denom = words.size + K * model.alpha
    for sweep in range(iters):
        _infer_sweep(words, z, phi, nd, rng.random(words.size), model.alpha, p)
        if sweep >= burn_in:
            acc += (nd + model.alpha) / denom
    theta = acc / (iters - burn_in)
    return theta / theta.sum()


def heldout_log_likelihood(model: TopicModel, docs, iters: int = 50, burn_in: int = 10,
                           seed: int = 0) -> float:
    """Mean per-token log-likelihood with fold-in mixtures."""
    phi = model.topic_word()
    total, n = 0.0, 0
    for i, doc in enumerate(docs):
        words = np.asarray(doc, dtype=np.int64)
        if words.size == 0:
            continue
        theta = lda_infer(model, words, iters, burn_in, seed + i)
        total += float(np.log(theta @ phi[:, words]).sum())
        n += words.size
    return total / max(n, 1)


def check_simplex(theta) -> np.ndarray:
    t = np.asarray(theta, dtype=np.float64)
    if t.ndim != 1 or t.size == 0 or np.any(t < 0) or abs(t.sum() - 1.0) > _SIMPLEX_TOL:
        raise DomainError("theta must be a probability vector")
    return t


def make_topic_sample(img, theta, source: str = "fold_in") -> PretextSample:
    return PretextSample((img,), check_simplex(theta), LDA, meta={"theta_source": source})


def write_soft_labels(path, thetas: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(thetas):
            fh.write(json.dumps({"id": key, "theta": np.asarray(thetas[key]).tolist()}) + "\n")


def read_soft_labels(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["id"]] = check_simplex(obj["theta"])
    return out


def tokenize_manifest(manifest) -> list[TokenDoc]:
    """Cleaned token docs for every manifest entry with a text sidecar."""
    from .manifest import load_texts

    texts = load_texts(manifest)
    return [TokenDoc(e.id, clean_text(texts[e.id])) for e in manifest if e.id in texts]


def fit_manifest(manifest, K: int, alpha: float | None = None, beta: float = 0.01, iters: int = 200,
                 seed: int = 0, min_df: int = 5, max_size: int = 10000) -> TopicModel:
    docs = tokenize_manifest(manifest)
    if not docs:
        raise DomainError("manifest has no text sidecars")
    vocab = build_vocab(docs, min_df=min_df, max_size=max_size)
    return lda_fit([vocab.encode(d.tokens) for d in docs], vocab, K, alpha, beta, iters, seed,
                   doc_ids=[d.doc_id for d in docs])


def manifest_thetas(model: TopicModel, manifest, iters: int = 50, burn_in: int = 10, seed: int = 0,
                    reuse_training: bool = True) -> dict[str, np.ndarray]:
    """Soft label per entry with text.

    Documents the model was fitted on reuse their final sweep counts when
    ``reuse_training`` is set; all others are folded in.
    """
    known = {d: i for i, d in enumerate(model.doc_ids or [])}
    out = {}
    for i, doc in enumerate(tokenize_manifest(manifest)):
        if reuse_training and doc.doc_id in known and model.doc_topic_counts is not None:
            out[doc.doc_id] = model.train_theta(known[doc.doc_id])
        else:
            out[doc.doc_id] = lda_infer(model, model.vocab.encode(doc.tokens), iters, burn_in, seed + i)
    return out
