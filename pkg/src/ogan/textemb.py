"""Word vectors and the mean-of-word-vectors sentence embedding."""

from __future__ import annotations

import hashlib
import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "WordVectorTable",
    "TextEmbedding",
    "WordVectorError",
    "load_word_vectors",
    "hashed_table",
    "tokenize",
    "embed_text_average",
]

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


class WordVectorError(ValueError):
    pass


class WordVectorTable:
    """Lookup from lowercase word to a fixed-length vector.

    ``source`` is ``"loaded-file"`` for tables read from GloVe text files and
    ``"hashed-deterministic"`` for the lazily computed hashed table, which
    covers every word.
    """

    def __init__(self, dim: int, entries=None, source="loaded-file", seed=None):
        if dim <= 0:
            raise WordVectorError(f"dimension must be positive, got {dim}")
        self.dim = int(dim)
        self.source = source
        self.seed = seed
        self._entries: dict[str, np.ndarray] = dict(entries or {})
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, word: str) -> bool:
        return self.get(word) is not None

    def get(self, word: str):
        word = word.lower()
        vec = self._entries.get(word)
        if vec is None and self.source == "hashed-deterministic":
            vec = _hashed_vector(word, self.seed, self.dim)
            with self._lock:
                self._entries.setdefault(word, vec)
        return vec

    def __getitem__(self, word: str) -> np.ndarray:
        vec = self.get(word)
        if vec is None:
            raise KeyError(word)
        return vec

    def describe(self) -> dict:
        """JSON-able description sufficient to rebuild a hashed table."""
        if self.source == "hashed-deterministic":
            return {"kind": "hashed", "dim": self.dim, "seed": self.seed}
        return {"kind": "file", "dim": self.dim, "size": len(self)}


def _hashed_vector(word: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x00{word}".encode("utf-8"), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    return v.astype(np.float32)


def hashed_table(dim: int = 50, seed: int = 0) -> WordVectorTable:
    """Deterministic stand-in for pretrained vectors: unit-norm Gaussian per word."""
    return WordVectorTable(dim, source="hashed-deterministic", seed=int(seed))


def load_word_vectors(path) -> WordVectorTable:
    path = Path(path)
    entries: dict[str, np.ndarray] = {}
    dim = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                continue
            word, values = parts[0], parts[1:]
            try:
                vec = np.asarray([float(x) for x in values], dtype=np.float32)
            except ValueError as exc:
                raise WordVectorError(f"{path}:{lineno}: {exc}") from None
            if dim is None:
                dim = len(vec)
                if dim == 0:
                    raise WordVectorError(f"{path}:{lineno}: word {word!r} has no values")
            elif len(vec) != dim:
                raise WordVectorError(
                    f"{path}:{lineno}: dimension mismatch, expected {dim} got {len(vec)}"
                )
            key = word.lower()
            if key in entries:
                log.warning("%s:%d: duplicate word %r, keeping first occurrence", path, lineno, key)
                continue
            entries[key] = vec
    if dim is None:
        raise WordVectorError(f"{path}: empty word-vector file")
    return WordVectorTable(dim, entries, source="loaded-file")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass
class TextEmbedding:
    vector: np.ndarray
    token_count: int
    warnings: list[str] = field(default_factory=list)


def embed_text_average(table: WordVectorTable, text: str) -> TextEmbedding:
    """Mean of the in-vocabulary word vectors; out-of-vocabulary tokens are skipped."""
    vecs = [v for v in (table.get(t) for t in tokenize(text)) if v is not None]
    if not vecs:
        return TextEmbedding(
            np.zeros(table.dim, dtype=np.float32), 0, ["no in-vocabulary tokens"]
        )
    mean = np.mean(np.stack(vecs).astype(np.float64), axis=0)
    return TextEmbedding(mean.astype(np.float32), len(vecs))
