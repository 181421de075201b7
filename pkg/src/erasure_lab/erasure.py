"""Importance by erasure over input dimensions, hidden units and words.

For each evaluated example the contribution of an erasure is the relative
increase of the gold-label negative log-likelihood,
``(S_erased - S) / max(S, eps)``; the importance ``I`` of a target is the
mean contribution. Erasing something the model relies on therefore gives a
positive score, and an erasure that makes the model more confident in the
gold label gives a negative one.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import DimensionError
from .data import Dataset
from .embeddings import ConfigError, EmbeddingTable, Vocabulary
from .models import Item, TrainedModel, apply_word_erasure, batch_nll

EPS = 1e-6
LOG_TAU = 1e-3
SIGN_CONVENTION = (
    "I = mean over examples of (S_erased - S) / max(S, 1e-6) with S the gold-label NLL; "
    "positive I means erasing the target hurts the model"
)
LEVELS = ("input_dim", "hidden_unit", "word_positions", "word_type")
WORD_MODES = ("delete", "zero")
THREADS_ENV = "ERASURE_LAB_THREADS"


class EmptyPopulationError(ValueError):
    """No example is left to score for the requested erasure."""


class DegenerateFitError(ValueError):
    """A regression input or target has zero variance."""


@dataclass(frozen=True)
class ErasureSpec:
    level: str
    dims: frozenset[int] = frozenset()
    layer: int = 0
    units: frozenset[int] = frozenset()
    positions: frozenset[int] = frozenset()
    token: str | None = None
    word_mode: str = "delete"
    per_occurrence: bool = False

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"unknown erasure level {self.level!r}")
        if self.word_mode not in WORD_MODES:
            raise ConfigError(f"unknown word erasure mode {self.word_mode!r}")
        populated = {
            "input_dim": bool(self.dims),
            "hidden_unit": bool(self.units),
            "word_positions": bool(self.positions),
            "word_type": self.token is not None,
        }
        others = [lvl for lvl, on in populated.items() if on and lvl != self.level]
        if others:
            raise ConfigError(f"{self.level} erasure must not also set {others}")

    @classmethod
    def input_dim(cls, *dims: int) -> "ErasureSpec":
        return cls("input_dim", dims=frozenset(int(d) for d in dims))

    @classmethod
    def hidden_unit(cls, layer: int, *units: int) -> "ErasureSpec":
        return cls("hidden_unit", layer=int(layer), units=frozenset(int(u) for u in units))

    @classmethod
    def word_positions(cls, positions: Iterable[int], mode: str = "delete") -> "ErasureSpec":
        return cls("word_positions", positions=frozenset(int(p) for p in positions), word_mode=mode)

    @classmethod
    def word_type(cls, token: str, mode: str = "delete", per_occurrence: bool = False) -> "ErasureSpec":
        return cls("word_type", token=token, word_mode=mode, per_occurrence=per_occurrence)

    @property
    def is_word_level(self) -> bool:
        return self.level in ("word_positions", "word_type")

    def describe(self) -> str:
        if self.level == "input_dim":
            return "dim:" + "+".join(str(d) for d in sorted(self.dims))
        if self.level == "hidden_unit":
            return f"layer{self.layer}:" + "+".join(str(u) for u in sorted(self.units))
        if self.level == "word_positions":
            return "positions:" + "+".join(str(p) for p in sorted(self.positions))
        return f"word:{self.token}"

    def validate(self, model: TrainedModel) -> None:
        cfg = model.config
        if self.level == "input_dim":
            bad = [d for d in self.dims if not 0 <= d < cfg.embedding_dim]
            if bad:
                raise IndexError(f"dimensions {bad} out of range for embedding dim {cfg.embedding_dim}")
        elif self.level == "hidden_unit":
            width = cfg.layer_width(self.layer)
            bad = [u for u in self.units if not 0 <= u < width]
            if bad:
                raise IndexError(f"units {bad} out of range for layer {self.layer} of width {width}")

    def positions_in(self, vocab: Vocabulary, token_ids: Sequence[int], tokens: Sequence[str] = ()) -> set[int]:
        """Positions this word-level spec erases in one sentence."""
        if self.level == "word_positions":
            return {p for p in self.positions if 0 <= p < len(token_ids)}
        if self.level == "word_type":
            if tokens:
                return {i for i, t in enumerate(tokens) if t == self.token}
            idx = vocab.index(self.token)
            return {i for i, t in enumerate(token_ids) if t == idx}
        return set()

    def masks(self) -> dict:
        if self.level == "input_dim":
            return {"dims": self.dims}
        if self.level == "hidden_unit":
            return {"units": {self.layer: self.units}}
        return {}


@dataclass(frozen=True)
class ExampleScore:
    id: str
    S: float
    S_erased: float
    contribution: float


@dataclass
class ImportanceReport:
    target: str
    I: float
    per_example: list[ExampleScore]
    n_examples: int
    skipped_examples: int
    metadata: dict = field(default_factory=lambda: {"sign_convention": SIGN_CONVENTION, "eps": EPS})


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        try:
            workers = int(os.environ.get(THREADS_ENV, "0") or 0)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    return max(1, workers)


@dataclass
class _Job:
    item: Item
    seq: list[int]
    center: int
    erased_seq: list[int]
    erased_center: int
    id: str


def _jobs(model: TrainedModel, items: Sequence[Item], spec: ErasureSpec) -> tuple[list[_Job], int, int]:
    """Erased inputs per example; returns (jobs, skipped, population)."""
    if not spec.is_word_level:
        return [_Job(it, list(it.token_ids), it.center, list(it.token_ids), it.center, it.id) for it in items], 0, len(items)
    window = model.config.architecture == "window_mlp"
    jobs, skipped, population = [], 0, 0
    for it in items:
        positions = spec.positions_in(model.vocab, it.token_ids, it.tokens)
        if not positions:
            continue
        population += 1
        groups = [{p} for p in sorted(positions)] if spec.per_occurrence else [positions]
        for group in groups:
            erased = apply_word_erasure(it.token_ids, group, spec.word_mode)
            center = it.center
            if spec.word_mode == "delete":
                if not erased or (window and center in group):
                    skipped += 1
                    continue
                if window:
                    center -= sum(1 for p in group if p < center)
            job_id = it.id if not spec.per_occurrence else f"{it.id}@{min(group)}"
            jobs.append(_Job(it, list(it.token_ids), it.center, erased, center, job_id))
    return jobs, skipped, population


def _score_chunk(model: TrainedModel, jobs: Sequence[_Job], masks: dict) -> tuple[np.ndarray, np.ndarray]:
    items = [j.item for j in jobs]
    s = batch_nll(model, items, [j.seq for j in jobs], [j.center for j in jobs])
    s_e = batch_nll(model, items, [j.erased_seq for j in jobs], [j.erased_center for j in jobs], **masks)
    return s, s_e


def importance(
    model: TrainedModel,
    dataset: Dataset | Sequence[Item],
    spec: ErasureSpec,
    *,
    eps: float = EPS,
    workers: int | None = None,
    chunk_size: int = 256,
) -> ImportanceReport:
    """Mean relative NLL increase caused by ``spec`` over the dataset.

    Word-type specs only score examples containing the token. Examples left
    empty by delete-mode erasure are skipped and counted. Evaluation is
    chunked identically for any worker count and reduced in example order,
    so the report does not depend on ``workers``.
    """
    items = model.items(dataset) if isinstance(dataset, Dataset) else list(dataset)
    if not items:
        raise EmptyPopulationError("dataset is empty")
    spec.validate(model)
    jobs, skipped, population = _jobs(model, items, spec)
    if not jobs:
        what = f"token {spec.token!r} does not occur" if spec.level == "word_type" else "no example can be erased"
        raise EmptyPopulationError(f"{spec.describe()}: {what} ({skipped} skipped)")
    masks = spec.masks()
    chunks = [jobs[i : i + chunk_size] for i in range(0, len(jobs), chunk_size)]
    n_workers = min(worker_count(workers), len(chunks))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(lambda c: _score_chunk(model, c, masks), chunks))
    else:
        results = [_score_chunk(model, c, masks) for c in chunks]
    s = np.concatenate([r[0] for r in results])
    s_e = np.concatenate([r[1] for r in results])
    contrib = (s_e - s) / np.maximum(s, eps)
    per = [ExampleScore(j.id, float(a), float(b), float(c)) for j, a, b, c in zip(jobs, s, s_e, contrib)]
    value = float(contrib.mean())
    return ImportanceReport(spec.describe(), value, per, len(per), skipped)


def scan(model: TrainedModel, dataset, specs: Sequence[ErasureSpec], **kw) -> list[ImportanceReport]:
    items = model.items(dataset) if isinstance(dataset, Dataset) else list(dataset)
    return [importance(model, items, s, **kw) for s in specs]


def dimension_importance(model: TrainedModel, dataset, **kw) -> np.ndarray:
    reports = scan(model, dataset, [ErasureSpec.input_dim(d) for d in range(model.config.embedding_dim)], **kw)
    return np.array([r.I for r in reports])


def unit_importance(model: TrainedModel, dataset, layer: int, **kw) -> np.ndarray:
    width = model.config.layer_width(layer)
    reports = scan(model, dataset, [ErasureSpec.hidden_unit(layer, u) for u in range(width)], **kw)
    return np.array([r.I for r in reports])


def layer_importance(model: TrainedModel, dataset, **kw) -> dict[str, np.ndarray]:
    """Per-unit importance for the input dimensions and every hidden layer."""
    items = model.items(dataset) if isinstance(dataset, Dataset) else list(dataset)
    out = {"input": dimension_importance(model, items, **kw)}
    for layer in range(1, model.config.hidden_layers + 1):
        out[f"layer{layer}"] = unit_importance(model, items, layer, **kw)
    return out


def importance_matrix(
    entries: Sequence[tuple[str, TrainedModel, Dataset]],
    level: str = "input_dim",
    layer: int = 1,
    **kw,
) -> tuple[list[str], list[str], np.ndarray]:
    """Task-by-target importance grid (rows are tasks)."""
    if not entries:
        raise EmptyPopulationError("no models given")
    rows, vectors = [], []
    for name, model, data in entries:
        if level == "input_dim":
            vec = dimension_importance(model, data, **kw)
        elif level == "hidden_unit":
            vec = unit_importance(model, data, layer, **kw)
        else:
            raise ConfigError(f"importance_matrix supports input_dim and hidden_unit, not {level!r}")
        if vectors and vec.shape != vectors[0].shape:
            raise DimensionError(f"task {name!r} has {vec.size} targets, expected {vectors[0].size}")
        rows.append(name)
        vectors.append(vec)
    prefix = "d" if level == "input_dim" else "u"
    cols = [f"{prefix}{j}" for j in range(vectors[0].size)]
    return rows, cols, np.vstack(vectors)


def concentration(values: Sequence[float], eps: float = EPS) -> float:
    """max_j I_j / (mean_j |I_j| + eps)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.max() / (np.abs(v).mean() + eps))


def signed_log(x, tau: float = LOG_TAU):
    """sign(x) * ln(1 + |x| / tau), for log-space heatmaps."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x) / tau)


@dataclass(frozen=True)
class WordImportance:
    token: str
    importance: float
    support: int


def word_type_importances(
    model: TrainedModel,
    dataset: Dataset,
    *,
    min_support: int = 1,
    word_mode: str = "delete",
    per_occurrence: bool = False,
    **kw,
) -> list[WordImportance]:
    """Importance of every word type in the dataset (unsorted, by first appearance)."""
    items = model.items(dataset)
    seen: dict[str, None] = {}
    for it in items:
        for tok in it.tokens:
            seen.setdefault(tok, None)
    out = []
    for tok in seen:
        spec = ErasureSpec.word_type(tok, word_mode, per_occurrence)
        try:
            rep = importance(model, items, spec, **kw)
        except EmptyPopulationError:
            continue
        support = len({s.id.split("@")[0] for s in rep.per_example})
        if support >= min_support:
            out.append(WordImportance(tok, rep.I, support))
    return out


def word_type_ranking(
    model: TrainedModel,
    dataset: Dataset,
    top_k: int | None = 10,
    sign: str = "positive",
    *,
    min_support: int = 1,
    word_mode: str = "delete",
    per_occurrence: bool = False,
    **kw,
) -> list[WordImportance]:
    """Word types ordered by mean importance, descending for ``sign='positive'``
    and ascending for ``sign='negative'``; ties break lexicographically."""
    if sign not in ("positive", "negative"):
        raise ConfigError(f"sign must be 'positive' or 'negative', got {sign!r}")
    words = word_type_importances(
        model, dataset, min_support=min_support, word_mode=word_mode, per_occurrence=per_occurrence, **kw
    )
    if sign == "positive":
        words.sort(key=lambda w: (-w.importance, w.token))
    else:
        words.sort(key=lambda w: (w.importance, w.token))
    return words if top_k is None else words[:top_k]


def importance_histogram(values: Iterable[float], edges: Sequence[float]) -> list[int]:
    """Counts per half-open bucket ``[edges[i], edges[i+1])``.

    Values below the first edge land in the first bucket and values at or
    above the last edge in the last one.
    """
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigError(f"bucket edges must be strictly increasing with at least two entries: {edges}")
    inner = np.asarray(edges[1:-1])
    counts = [0] * (len(edges) - 1)
    for v in values:
        if isinstance(v, ImportanceReport):
            v = v.I
        counts[int(np.searchsorted(inner, float(v), side="right"))] += 1
    return counts


@dataclass(frozen=True)
class FrequencyFit:
    slope: float
    intercept: float
    r_squared: float
    n: int


def frequency_correlation(table: EmbeddingTable, dim: int, log_frequencies: Mapping[str, float]) -> FrequencyFit:
    """Least-squares fit of log frequency on one embedding dimension."""
    if not 0 <= dim < table.dim:
        raise IndexError(f"dimension {dim} out of range for width {table.dim}")
    words = [w for w in log_frequencies if w in table.vocab]
    if len(words) < 3:
        raise ValueError(f"need at least 3 words with known frequency, got {len(words)}")
    x = np.array([table.vector(w)[dim] for w in words])
    y = np.array([float(log_frequencies[w]) for w in words])
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateFitError("zero variance in dimension values or log frequencies")
    slope = float(xc @ yc) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    r2 = 1.0 - float(resid @ resid) / syy
    return FrequencyFit(slope, intercept, r2, len(words))
