"""Corpus loaders, writers, splits, and synthetic tasks with planted structure."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import ConfigError, EmbeddingTable, ParseError

log = logging.getLogger(__name__)

SENTENCE_END = frozenset({".", "!", "?"})
TASK_KINDS = ("tagging", "text_classification", "word_classification", "word_regression")


@dataclass(frozen=True)
class Example:
    id: str
    tokens: tuple[str, ...]
    gold: int | float | None = None
    tags: tuple[int, ...] | None = None
    sentence_spans: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.tags is not None:
            object.__setattr__(self, "tags", tuple(self.tags))
            if len(self.tags) != len(self.tokens):
                raise ValueError(f"example {self.id}: {len(self.tags)} tags for {len(self.tokens)} tokens")
        if not self.sentence_spans:
            object.__setattr__(self, "sentence_spans", segment_sentences(self.tokens))
        else:
            spans = tuple(tuple(s) for s in self.sentence_spans)
            check_spans(spans, len(self.tokens))
            object.__setattr__(self, "sentence_spans", spans)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Dataset:
    examples: list[Example]
    label_names: list[str] = field(default_factory=list)
    task_kind: str = "text_classification"

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind != "word_regression":
            k = len(self.label_names)
            for ex in self.examples:
                labels = ex.tags if self.task_kind == "tagging" else (ex.gold,)
                for lab in labels or ():
                    if not (isinstance(lab, (int, np.integer)) and 0 <= lab < k):
                        raise ValueError(f"example {ex.id}: label {lab!r} outside {k} classes")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def subset(self, examples: Sequence[Example]) -> "Dataset":
        return Dataset(list(examples), list(self.label_names), self.task_kind)


def segment_sentences(tokens: Sequence[str]) -> tuple[tuple[int, int], ...]:
    """Split after ".", "!" and "?" tokens; the spans partition the token range."""
    spans = []
    start = 0
    for i, tok in enumerate(tokens):
        if tok in SENTENCE_END:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return tuple(spans)


def check_spans(spans: Sequence[tuple[int, int]], n: int) -> None:
    """Raise unless ``spans`` partition ``[0, n)`` in order."""
    pos = 0
    for start, end in spans:
        if start != pos or end <= start:
            raise ValueError(f"sentence spans {list(spans)} do not partition [0, {n})")
        pos = end
    if pos != n:
        raise ValueError(f"sentence spans {list(spans)} do not partition [0, {n})")


def _sorted_labels(labels) -> list[str]:
    labels = set(labels)
    try:
        return sorted(labels, key=lambda s: (float(s), s))
    except ValueError:
        return sorted(labels)


# ------------------------------------------------------------------ loaders


def load_conll(path, token_col: int = 0, tag_col: int = -1) -> Dataset:
    """Column-format tagging corpus; blank lines separate sentences."""
    sentences: list[list[tuple[str, str]]] = []
    current: list[tuple[str, str]] = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            cols = line.split()
            if not cols:
                if current:
                    sentences.append(current)
                    current = []
                continue
            if width is None:
                width = len(cols)
            elif len(cols) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} columns, found {len(cols)}")
            try:
                current.append((cols[token_col], cols[tag_col]))
            except IndexError:
                raise ParseError(f"{path}:{lineno}: missing column") from None
    if current:
        sentences.append(current)
    if not sentences:
        log.warning("%s contains no sentences", path)
    names = sorted({tag for sent in sentences for _, tag in sent})
    index = {name: i for i, name in enumerate(names)}
    examples = [
        Example(
            id=f"s{i:06d}",
            tokens=tuple(tok for tok, _ in sent),
            tags=tuple(index[tag] for _, tag in sent),
        )
        for i, sent in enumerate(sentences)
    ]
    return Dataset(examples, names, "tagging")


def write_conll(dataset: Dataset, path) -> None:
    blocks = []
    for ex in dataset:
        blocks.append(
            "\n".join(f"{tok} {dataset.label_names[t]}" for tok, t in zip(ex.tokens, ex.tags))
        )
    Path(path).write_text("\n\n".join(blocks) + ("\n" if blocks else ""), encoding="utf-8")


def load_labeled_text(
    path, label_names: Sequence[str] | None = None, regression: bool = False
) -> Dataset:
    """``label<TAB>text`` rows, text whitespace-tokenized.

    Label names are inferred and sorted (numerically when they all parse as
    numbers) unless given. With ``regression`` the label column is a float
    target.
    """
    rows: list[tuple[str, tuple[str, ...]]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError(f"{path}:{lineno}: missing tab between label and text")
            label, text = line.split("\t", 1)
            tokens = tuple(text.split())
            if not tokens:
                raise ParseError(f"{path}:{lineno}: empty text")
            rows.append((label.strip(), tokens))
    single = bool(rows) and all(len(toks) == 1 for _, toks in rows)
    if regression:
        examples = []
        for i, (label, toks) in enumerate(rows):
            try:
                gold = float(label)
            except ValueError:
                raise ParseError(f"{path}: row {i + 1}: regression target {label!r} is not a number") from None
            examples.append(Example(id=f"e{i:06d}", tokens=toks, gold=gold))
        return Dataset(examples, [], "word_regression")
    names = list(label_names) if label_names is not None else _sorted_labels(l for l, _ in rows)
    index = {name: i for i, name in enumerate(names)}
    examples = []
    for i, (label, toks) in enumerate(rows):
        if label not in index:
            raise ParseError(f"{path}: row {i + 1}: unknown label {label!r}")
        examples.append(Example(id=f"e{i:06d}", tokens=toks, gold=index[label]))
    return Dataset(examples, names, "word_classification" if single else "text_classification")


def write_labeled_text(dataset: Dataset, path) -> None:
    lines = []
    for ex in dataset:
        if dataset.task_kind == "word_regression":
            label = format(float(ex.gold), ".17g")
        else:
            label = dataset.label_names[ex.gold]
        lines.append(f"{label}\t{' '.join(ex.tokens)}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def split(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle, then contiguous cuts; returns one Dataset per ratio."""
    ratios = [float(r) for r in ratios]
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be positive and sum to 1, got {ratios}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    sizes = [int(round(r * n)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise ConfigError(f"split ratios {ratios} do not fit {n} examples")
    parts, start = [], 0
    for size in sizes:
        parts.append(dataset.subset([dataset.examples[i] for i in order[start : start + size]]))
        start += size
    return tuple(parts)


# --------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str
    vocab_size: int = 2000
    dim: int = 50
    noise_sigma: float = 0.0
    seed: int = 0
    # planted_dims
    planted: tuple[int, ...] = (31, 26)
    margin: float = 0.5
    # sentiment
    n_examples: int = 1000
    min_len: int = 5
    max_len: int = 20
    n_polar: int = 10
    n_scope: int = 40
    n_negators: int = 2
    n_filler: int = 40
    polar_rate: float = 0.3
    negation_rate: float = 0.0
    scope_rate: float = 0.1
    polarity_strength: float = 2.0
    max_sentences: int = 1
    five_class: bool = False
    # frequency
    zipf_exponent: float = 1.0
    total_count: float = 1e6

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["planted"] = list(self.planted)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        if "planted" in d:
            d["planted"] = tuple(d["planted"])
        return cls(**d)


def gen_planted_dims(spec: SyntheticSpec) -> tuple[EmbeddingTable, Dataset]:
    """Words whose label is the XOR of the signs of two planted dimensions.

    Every planted coordinate has magnitude at least ``spec.margin``; other
    coordinates are N(0, 1) and carry no label information. With a nonzero
    ``noise_sigma`` the signs are read after adding N(0, sigma) noise.
    """
    if spec.kind != "planted_dims":
        raise ConfigError(f"spec kind {spec.kind!r} is not planted_dims")
    if len(spec.planted) != 2 or spec.planted[0] == spec.planted[1]:
        raise ConfigError(f"need two distinct planted dimensions, got {spec.planted}")
    if any(not 0 <= p < spec.dim for p in spec.planted):
        raise ConfigError(f"planted dimensions {spec.planted} out of range for dim {spec.dim}")
    rng = np.random.default_rng(spec.seed)
    vectors = rng.standard_normal((spec.vocab_size, spec.dim))
    for p in spec.planted:
        signs = np.where(rng.random(spec.vocab_size) < 0.5, -1.0, 1.0)
        vectors[:, p] = signs * (spec.margin + np.abs(rng.standard_normal(spec.vocab_size)))
    noisy = vectors[:, list(spec.planted)]
    if spec.noise_sigma > 0:
        noisy = noisy + rng.normal(0.0, spec.noise_sigma, noisy.shape)
    labels = ((noisy[:, 0] > 0) ^ (noisy[:, 1] > 0)).astype(int)
    tokens = [f"w{i:05d}" for i in range(spec.vocab_size)]
    table = EmbeddingTable.from_vectors(tokens, vectors)
    examples = [Example(id=f"e{i:06d}", tokens=(tok,), gold=int(lab)) for i, (tok, lab) in enumerate(zip(tokens, labels))]
    return table, Dataset(examples, ["0", "1"], "word_classification")


@dataclass(frozen=True)
class SentimentLexicon:
    positive: frozenset[str]
    negative: frozenset[str]
    negators: frozenset[str]
    filler: frozenset[str]
    scope_positive: frozenset[str] = frozenset()
    scope_negative: frozenset[str] = frozenset()

    def polarity(self, token: str) -> int:
        if token in self.positive or token in self.scope_positive:
            return 1
        if token in self.negative or token in self.scope_negative:
            return -1
        return 0

    @property
    def scope_tokens(self) -> frozenset[str]:
        return self.scope_positive | self.scope_negative

    @property
    def polar_tokens(self) -> frozenset[str]:
        return self.positive | self.negative


def sentiment_lexicon(spec: SyntheticSpec) -> SentimentLexicon:
    return SentimentLexicon(
        positive=frozenset(f"pos{i:02d}" for i in range(spec.n_polar)),
        negative=frozenset(f"neg{i:02d}" for i in range(spec.n_polar)),
        negators=frozenset(f"not{i}" for i in range(spec.n_negators)),
        filler=frozenset(f"f{i:03d}" for i in range(spec.n_filler)),
        scope_positive=frozenset(f"spos{i:02d}" for i in range(spec.n_scope)),
        scope_negative=frozenset(f"sneg{i:02d}" for i in range(spec.n_scope)),
    )


def net_polarity(tokens: Sequence[str], lexicon: SentimentLexicon) -> int:
    """Sum of token polarities; a negator flips the token right after it."""
    net = 0
    for i, tok in enumerate(tokens):
        pol = lexicon.polarity(tok)
        if pol and i > 0 and tokens[i - 1] in lexicon.negators:
            pol = -pol
        net += pol
    return net


def sentiment_label(net: int, five_class: bool) -> int:
    if five_class:
        if net <= -3:
            return 0
        if net < 0:
            return 1
        if net == 0:
            return 2
        return 3 if net < 3 else 4
    return int(net > 0)


def gen_synthetic_sentiment(spec: SyntheticSpec) -> tuple[EmbeddingTable, Dataset]:
    """Documents of polarity, negator and filler tokens labelled by net polarity.

    A negator flips the polarity of the token immediately after it. Some
    documents carry a scope phrase: a negator, then a scope token whose
    lexical polarity is opposite to the document's sign (so its flipped
    polarity supports the label), then a filler. Scope tokens never occur
    outside such phrases.

    Word vectors are N(0, 1) plus ``polarity_strength`` times the lexical
    polarity along one shared random direction, so polarity is readable
    from the vector alone. A model that reads scope tokens by their vector
    and misses the negation is pushed away from the gold label by them.
    """
    if spec.kind != "sentiment":
        raise ConfigError(f"spec kind {spec.kind!r} is not sentiment")
    if min(spec.n_polar, spec.n_negators, spec.n_filler) < 1:
        raise ConfigError("sentiment spec needs non-empty polar, negator and filler partitions")
    if not 3 <= spec.min_len <= spec.max_len:
        raise ConfigError(f"bad length range [{spec.min_len}, {spec.max_len}]")
    lex = sentiment_lexicon(spec)
    rng = np.random.default_rng(spec.seed)
    pos, neg = sorted(lex.positive), sorted(lex.negative)
    spos, sneg = sorted(lex.scope_positive), sorted(lex.scope_negative)
    negs, fill = sorted(lex.negators), sorted(lex.filler)

    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    examples = []
    while len(examples) < spec.n_examples:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        n_sent = int(rng.integers(1, spec.max_sentences + 1)) if spec.max_sentences > 1 else 1
        n_sent = min(n_sent, length // 3)
        content = length - (n_sent if spec.max_sentences > 1 else 0)
        scoped = spec.n_scope > 0 and rng.random() < spec.scope_rate
        body: list[str] = []
        budget = content - (3 if scoped else 0)
        while len(body) < budget:
            if rng.random() < spec.polar_rate:
                if budget - len(body) >= 2 and rng.random() < spec.negation_rate:
                    body.append(pick(negs))
                body.append(pick(pos if rng.random() < 0.5 else neg))
            elif budget - len(body) >= 2 and rng.random() < spec.negation_rate:
                body.extend([pick(negs), pick(fill)])
            else:
                body.append(pick(fill))
        net = net_polarity(body, lex)
        if scoped:
            sign = net if net != 0 else (1 if rng.random() < 0.5 else -1)
            # negated, so a lexically negative scope token counts as positive
            phrase = [pick(negs), pick(sneg if sign > 0 else spos), pick(fill)]
            at = int(rng.integers(0, len(body) + 1))
            while at > 0 and body[at - 1] in lex.negators:
                at -= 1
            body[at:at] = phrase
            net = net_polarity(body, lex)
        if net == 0 and not spec.five_class:
            continue
        tokens = _insert_periods(body, n_sent, rng) if spec.max_sentences > 1 else body
        if net_polarity(tokens, lex) != net:
            continue
        examples.append(
            Example(id=f"d{len(examples):06d}", tokens=tuple(tokens), gold=sentiment_label(net, spec.five_class))
        )
    all_tokens = pos + neg + spos + sneg + negs + fill + (["."] if spec.max_sentences > 1 else [])
    vrng = np.random.default_rng(spec.seed + 7919)
    vectors = vrng.standard_normal((len(all_tokens), spec.dim))
    direction = vrng.standard_normal(spec.dim)
    direction /= np.linalg.norm(direction)
    lexical = np.array([1.0 if t in lex.positive or t in lex.scope_positive else
                        -1.0 if t in lex.negative or t in lex.scope_negative else 0.0 for t in all_tokens])
    vectors += spec.polarity_strength * lexical[:, None] * direction[None, :]
    names = ["0", "1", "2", "3", "4"] if spec.five_class else ["negative", "positive"]
    return EmbeddingTable.from_vectors(all_tokens, vectors), Dataset(examples, names, "text_classification")


def _insert_periods(body: list[str], n_sent: int, rng) -> list[str]:
    if n_sent <= 1:
        return body + ["."]
    cuts = sorted(rng.choice(np.arange(1, len(body)), size=n_sent - 1, replace=False).tolist())
    out, prev = [], 0
    for c in cuts + [len(body)]:
        out.extend(body[prev:c])
        out.append(".")
        prev = c
    return out


def gen_frequency_task(spec: SyntheticSpec) -> tuple[EmbeddingTable, Dataset]:
    """Zipfian word frequencies; the target is the natural-log frequency.

    Dimension ``spec.planted[0]`` holds the centred log frequency plus
    N(0, noise_sigma); every other dimension is independent N(0, 1).
    """
    if spec.kind != "frequency":
        raise ConfigError(f"spec kind {spec.kind!r} is not frequency")
    planted = spec.planted[0]
    if not 0 <= planted < spec.dim:
        raise ConfigError(f"planted dimension {planted} out of range for dim {spec.dim}")
    rng = np.random.default_rng(spec.seed)
    ranks = np.arange(1, spec.vocab_size + 1, dtype=np.float64)
    log_freq = math.log(spec.total_count) - spec.zipf_exponent * np.log(ranks)
    vectors = rng.standard_normal((spec.vocab_size, spec.dim))
    noise = rng.normal(0.0, spec.noise_sigma, spec.vocab_size) if spec.noise_sigma > 0 else 0.0
    vectors[:, planted] = log_freq - log_freq.mean() + noise
    order = rng.permutation(spec.vocab_size)
    tokens = [f"w{i:05d}" for i in range(spec.vocab_size)]
    table = EmbeddingTable.from_vectors([tokens[i] for i in order], vectors[order])
    examples = [
        Example(id=f"e{i:06d}", tokens=(tokens[i],), gold=float(log_freq[i])) for i in order
    ]
    return table, Dataset(examples, [], "word_regression")


GENERATORS = {
    "planted_dims": gen_planted_dims,
    "sentiment": gen_synthetic_sentiment,
    "frequency": gen_frequency_task,
}


def generate(spec: SyntheticSpec) -> tuple[EmbeddingTable, Dataset]:
    try:
        gen = GENERATORS[spec.kind]
    except KeyError:
        raise ConfigError(f"unknown synthetic kind {spec.kind!r}") from None
    return gen(spec)


def with_seed(spec: SyntheticSpec, seed: int) -> SyntheticSpec:
    return replace(spec, seed=seed)
