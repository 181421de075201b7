"""Vocabulary, word-vector tables, and input-side erasure."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import DimensionError

log = logging.getLogger(__name__)

UNK = "<unk>"
PAD = "<pad>"
UNK_INDEX = 0
PAD_INDEX = 1


class ParseError(ValueError):
    """Malformed input file; the message names the offending line."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class Vocabulary:
    """Bijective token <-> index map with UNK at 0 and PAD at 1."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = [UNK, PAD]
        self._index: dict[str, int] = {UNK: UNK_INDEX, PAD: PAD_INDEX}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self._index.get(token)
        if idx is None:
            idx = len(self._tokens)
            self._tokens.append(token)
            self._index[token] = idx
        return idx

    def index(self, token: str) -> int:
        """Index of ``token``; out-of-vocabulary tokens map to UNK."""
        return self._index.get(token, UNK_INDEX)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, UNK_INDEX) for t in tokens]

    def token(self, index: int) -> str:
        return self._tokens[index]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    @classmethod
    def from_index_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        if list(tokens[:2]) != [UNK, PAD]:
            raise ParseError("vocabulary must start with the UNK and PAD tokens")
        vocab = cls()
        for tok in tokens[2:]:
            if tok in vocab:
                raise ParseError(f"duplicate vocabulary token {tok!r}")
            vocab.add(tok)
        return vocab


@dataclass
class EmbeddingTable:
    vocab: Vocabulary
    matrix: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.vocab):
            raise DimensionError(
                f"embedding matrix {self.matrix.shape} does not match vocabulary size {len(self.vocab)}"
            )
        if np.any(self.matrix[PAD_INDEX] != 0.0):
            raise ValueError("PAD row must be all zeros")
        self.matrix.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def vector(self, token: str) -> np.ndarray:
        return self.matrix[self.vocab.index(token)]

    @classmethod
    def from_vectors(
        cls, tokens: Sequence[str], vectors: np.ndarray, trainable: bool = False
    ) -> "EmbeddingTable":
        """Build a table from real tokens; UNK is their mean vector and PAD is zero."""
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(tokens):
            raise DimensionError(f"{len(tokens)} tokens for vector block {vectors.shape}")
        vocab = Vocabulary()
        rows = []
        for tok, vec in zip(tokens, vectors):
            if tok in vocab:
                log.warning("duplicate embedding token %r ignored", tok)
                continue
            vocab.add(tok)
            rows.append(vec)
        dim = vectors.shape[1]
        body = np.array(rows).reshape(len(rows), dim)
        unk = body.mean(axis=0) if len(rows) else np.zeros(dim)
        matrix = np.vstack([unk[None, :], np.zeros((1, dim)), body])
        return cls(vocab, matrix, trainable)


def _is_header(fields: list[str]) -> bool:
    if len(fields) != 2:
        return False
    try:
        int(fields[0]), int(fields[1])
    except ValueError:
        return False
    return True


def load_text_embeddings(path, expected_dim: int | None = None) -> EmbeddingTable:
    """Read ``token v1 ... vd`` lines (word2vec/GloVe text format).

    A first line holding exactly two integers (``count dim``) is treated as
    a header and skipped.
    """
    tokens: list[str] = []
    rows: list[list[float]] = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.rstrip("\n").rstrip("\r").split(" ")
            fields = [f for f in fields if f != ""]
            if not fields:
                continue
            if lineno == 1 and _is_header(fields):
                continue
            width = len(fields) - 1
            if dim is None:
                if width < 1:
                    raise ParseError(f"{path}:{lineno}: line has a token but no vector values")
                dim = width
            elif width != dim:
                raise ParseError(f"{path}:{lineno}: expected {dim} values, found {width}")
            try:
                rows.append([float(v) for v in fields[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            tokens.append(fields[0])
    if dim is None:
        raise ParseError(f"{path}: no embedding rows found")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionError(f"{path}: vectors have dim {dim}, expected {expected_dim}")
    return EmbeddingTable.from_vectors(tokens, np.array(rows, dtype=np.float64))


def save_text_embeddings(table: EmbeddingTable, path, header: bool = False) -> None:
    """Write the real (non UNK/PAD) rows using 17 significant digits."""
    path = Path(path)
    lines = []
    n = len(table.vocab) - 2
    if header:
        lines.append(f"{n} {table.dim}")
    for idx in range(2, len(table.vocab)):
        vals = " ".join(format(float(v), ".17g") for v in table.matrix[idx])
        lines.append(f"{table.vocab.token(idx)} {vals}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def window_indices(token_ids: Sequence[int], center: int, window: int) -> list[int]:
    """Vocabulary indices for the window around ``center``; PAD outside the sentence."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be a positive odd integer, got {window}")
    if not 0 <= center < len(token_ids):
        raise IndexError(f"center {center} outside sentence of length {len(token_ids)}")
    half = window // 2
    n = len(token_ids)
    return [
        token_ids[p] if 0 <= p < n else PAD_INDEX for p in range(center - half, center + half + 1)
    ]


def window_features(
    table: EmbeddingTable, token_ids: Sequence[int], center: int, window: int
) -> np.ndarray:
    """Concatenated vectors of the ``window`` tokens centred on ``center``."""
    return table.matrix[window_indices(token_ids, center, window)].reshape(-1)


def erase_dimension(x: np.ndarray, dims: Iterable[int], width: int | None = None) -> np.ndarray:
    """Return a copy of ``x`` with the given per-word dimensions set to zero.

    ``width`` is the word-vector size; when ``x`` is a concatenation of
    several word vectors (window features), dimension ``d`` is zeroed in
    every slot. Works on a single vector or a batch of row vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    width = x.shape[-1] if width is None else width
    if x.shape[-1] % width:
        raise DimensionError(f"feature width {x.shape[-1]} is not a multiple of {width}")
    dims = sorted(set(int(d) for d in dims))
    for d in dims:
        if not 0 <= d < width:
            raise IndexError(f"dimension {d} out of range for vectors of width {width}")
    out = x.copy()
    if dims:
        slots = out.reshape(out.shape[:-1] + (-1, width))
        slots[..., dims] = 0.0
    return out
