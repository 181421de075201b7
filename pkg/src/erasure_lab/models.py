"""Window-MLP, RNN, LSTM and Bi-LSTM models with erasure-aware forward passes.

All forward passes are batched: a batch is a list of token-id sequences
(plus a centre position per row for the window tagger). Word erasure is
expressed by the caller in the sequences themselves: deleted tokens are
dropped, zeroed tokens are replaced by the PAD id whose vector is fixed at
zero. Dimension and hidden-unit erasure are masks applied inside the pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import serialization
from .autodiff import ContractError, Tensor
from .data import Dataset, Example
from .embeddings import PAD_INDEX, ConfigError, EmbeddingTable, Vocabulary, window_indices

if TYPE_CHECKING:
    from .erasure import ErasureSpec

log = logging.getLogger(__name__)

ARCHITECTURES = ("window_mlp", "rnn", "lstm", "bilstm")
HEADS = ("classifier", "regressor")
DROPOUT_SITES = ("hidden", "input+hidden")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    embedding_dim: int
    num_classes: int = 2
    head: str = "classifier"
    hidden_size: int = 50
    intermediate_layers: int = 2
    window: int = 5
    dropout_prob: float = 0.0
    dropout_sites: str = "input+hidden"
    trainable_embeddings: bool = False
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    clip_norm: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if self.hidden_size < 1 or self.embedding_dim < 1:
            raise ConfigError("hidden_size and embedding_dim must be positive")
        if self.head == "classifier" and self.num_classes < 2:
            raise ConfigError("a classifier needs at least 2 classes")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")
        if self.dropout_sites not in DROPOUT_SITES:
            raise ConfigError(f"dropout_sites must be one of {DROPOUT_SITES}")
        if self.architecture == "window_mlp":
            if self.window < 1 or self.window % 2 == 0:
                raise ConfigError(f"window must be a positive odd integer, got {self.window}")
            if self.intermediate_layers < 1:
                raise ConfigError("window_mlp needs at least one intermediate layer")

    @property
    def output_size(self) -> int:
        return self.num_classes if self.head == "classifier" else 1

    @property
    def is_recurrent(self) -> bool:
        return self.architecture != "window_mlp"

    @property
    def hidden_layers(self) -> int:
        """Number of erasable hidden layers (numbered from 1)."""
        return self.intermediate_layers if self.architecture == "window_mlp" else 1

    def layer_width(self, layer: int) -> int:
        if not 1 <= layer <= self.hidden_layers:
            raise IndexError(f"layer {layer} out of range 1..{self.hidden_layers}")
        return 2 * self.hidden_size if self.architecture == "bilstm" else self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Prediction:
    label: int
    probabilities: np.ndarray
    logits: np.ndarray

    def nll_of(self, c: int) -> float:
        return float(ad.softmax_nll(self.logits, c).data)


@dataclass(frozen=True)
class Item:
    """One evaluation unit: a sentence (sequence models) or a window instance."""

    id: str
    token_ids: tuple[int, ...]
    gold: int | float | None
    center: int = 0
    tokens: tuple[str, ...] = ()
    spans: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class TrainedModel:
    config: ModelConfig
    params: Mapping[str, np.ndarray]
    embedding: EmbeddingTable
    history: tuple = ()
    format_version: int = serialization.FORMAT_VERSION
    label_names: tuple[str, ...] = ()

    def __post_init__(self):
        frozen = {}
        for name, arr in self.params.items():
            a = np.array(arr, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name} has non-finite values")
            a.setflags(write=False)
            frozen[name] = a
        object.__setattr__(self, "params", frozen)

    @property
    def vocab(self) -> Vocabulary:
        return self.embedding.vocab

    def items(self, dataset: Dataset) -> list[Item]:
        return encode_items(self.config, self.vocab, dataset)


# ------------------------------------------------------------ parameters


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights and biases; LSTM forget bias 1."""

    def uni(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    d, h = config.embedding_dim, config.hidden_size
    p: dict[str, np.ndarray] = {}
    arch = config.architecture
    if arch == "window_mlp":
        width = config.window * d
        for layer in range(1, config.intermediate_layers + 1):
            p[f"W{layer}"] = uni(width, (width, h))
            p[f"b{layer}"] = uni(width, (h,))
            width = h
        rep = h
    elif arch == "rnn":
        p["W_x"] = uni(d + h, (d, h))
        p["W_h"] = uni(d + h, (h, h))
        p["b"] = uni(d + h, (h,))
        rep = h
    else:
        for suffix in ("_f", "_b") if arch == "bilstm" else ("",):
            p["W_x" + suffix] = uni(d + h, (d, 4 * h))
            p["W_h" + suffix] = uni(d + h, (h, 4 * h))
            b = uni(d + h, (4 * h,))
            b[h : 2 * h] = 1.0
            p["b" + suffix] = b
        rep = 2 * h if arch == "bilstm" else h
    p["W_out"] = uni(rep, (rep, config.output_size))
    p["b_out"] = uni(rep, (config.output_size,))
    return p


# --------------------------------------------------------------- forward


def _dropout(x: Tensor, prob: float, rng: np.random.Generator) -> Tensor:
    keep = (rng.random(x.shape) >= prob) / (1.0 - prob)
    return x * keep


def _unit_mask(units: frozenset[int], width: int) -> np.ndarray:
    mask = np.ones(width)
    for u in units:
        if not 0 <= u < width:
            raise IndexError(f"hidden unit {u} out of range for layer width {width}")
        mask[u] = 0.0
    return mask


def _dim_mask(dims: frozenset[int], width: int) -> np.ndarray | None:
    if not dims:
        return None
    mask = np.ones(width)
    for d in dims:
        if not 0 <= d < width:
            raise IndexError(f"dimension {d} out of range for vectors of width {width}")
        mask[d] = 0.0
    return mask


def _check_units(config: ModelConfig, units: Mapping[int, frozenset[int]]) -> dict[int, np.ndarray]:
    masks = {}
    for layer, us in units.items():
        width = config.layer_width(layer)
        masks[layer] = _unit_mask(frozenset(us), width)
    return masks


class _Ctx:
    """Per-pass state: parameter tensors, embedding lookup, masks, dropout."""

    def __init__(self, model_or_config, params, embedding_matrix, dims, units, train, rng):
        self.config: ModelConfig = model_or_config
        self.p = params
        self.E = embedding_matrix
        self.dim_mask = _dim_mask(frozenset(dims), self.config.embedding_dim)
        self.unit_masks = _check_units(self.config, units or {})
        self.train = train and self.config.dropout_prob > 0
        self.rng = rng

    def embed(self, ids: np.ndarray):
        if isinstance(self.E, Tensor):
            x = ad.take_rows(self.E, ids)
            if self.dim_mask is not None:
                x = x * self.dim_mask
            return x
        x = self.E[ids]
        if self.dim_mask is not None:
            x = x * self.dim_mask
        return Tensor(x)

    def drop(self, x: Tensor) -> Tensor:
        return _dropout(x, self.config.dropout_prob, self.rng) if self.train else x


def _mlp_forward(ctx: _Ctx, seqs: Sequence[Sequence[int]], centers: Sequence[int]) -> Tensor:
    cfg = ctx.config
    idx = np.array([window_indices(s, c, cfg.window) for s, c in zip(seqs, centers)], dtype=np.int64)
    x = ctx.embed(idx)
    h = ad.reshape(x, (len(seqs), cfg.window * cfg.embedding_dim))
    if cfg.dropout_sites == "input+hidden":
        h = ctx.drop(h)
    for layer in range(1, cfg.intermediate_layers + 1):
        h = ad.tanh(h @ ctx.p[f"W{layer}"] + ctx.p[f"b{layer}"])
        if layer in ctx.unit_masks:
            h = h * ctx.unit_masks[layer]
        h = ctx.drop(h)
    return h


def _pad(seqs: Sequence[Sequence[int]], reverse: bool = False) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if np.any(lengths == 0):
        raise ContractError("sequence models need at least one token per input")
    ids = np.full((len(seqs), int(lengths.max())), PAD_INDEX, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s[::-1] if reverse else s
    return ids, lengths


def _run_direction(ctx: _Ctx, ids, lengths, suffix: str, unit_mask, collect: bool):
    cfg = ctx.config
    h_size = cfg.hidden_size
    batch, steps = ids.shape
    lstm = cfg.architecture != "rnn"
    W_x, W_h, b = ctx.p["W_x" + suffix], ctx.p["W_h" + suffix], ctx.p["b" + suffix]
    h = Tensor(np.zeros((batch, h_size)))
    c = Tensor(np.zeros((batch, h_size)))
    states = []
    for t in range(steps):
        x_t = ctx.embed(ids[:, t])
        z = x_t @ W_x + h @ W_h + b
        if lstm:
            i_g = ad.sigmoid(ad.columns(z, 0, h_size))
            f_g = ad.sigmoid(ad.columns(z, h_size, 2 * h_size))
            o_g = ad.sigmoid(ad.columns(z, 2 * h_size, 3 * h_size))
            g = ad.tanh(ad.columns(z, 3 * h_size, 4 * h_size))
            c_new = f_g * c + i_g * g
            h_new = o_g * ad.tanh(c_new)
        else:
            h_new = ad.tanh(z)
        if unit_mask is not None:
            h_new = h_new * unit_mask
        live = (t < lengths).astype(np.float64)[:, None]
        if live.all():
            h = h_new
            if lstm:
                c = c_new
        else:
            h = h_new * live + h * (1.0 - live)
            if lstm:
                c = c_new * live + c * (1.0 - live)
        if collect:
            states.append(h.data.copy())
    return h, states


def _seq_forward(ctx: _Ctx, seqs: Sequence[Sequence[int]]) -> Tensor:
    cfg = ctx.config
    ids, lengths = _pad(seqs)
    mask = ctx.unit_masks.get(1)
    if cfg.architecture != "bilstm":
        h, _ = _run_direction(ctx, ids, lengths, "", mask, False)
        return ctx.drop(h)
    hs = cfg.hidden_size
    fmask = None if mask is None else mask[:hs]
    bmask = None if mask is None else mask[hs:]
    h_f, _ = _run_direction(ctx, ids, lengths, "_f", fmask, False)
    rev, _ = _pad(seqs, reverse=True)
    h_b, _ = _run_direction(ctx, rev, lengths, "_b", bmask, False)
    return ctx.drop(ad.concat([h_f, h_b], axis=1))


def batch_forward(
    model: "TrainedModel | ModelConfig",
    seqs: Sequence[Sequence[int]],
    centers: Sequence[int] | None = None,
    *,
    dims=frozenset(),
    units: Mapping[int, frozenset[int]] | None = None,
    params: Mapping[str, Tensor] | None = None,
    embedding_matrix=None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Raw head outputs for a batch: ``[B, K]`` logits or ``[B, 1]`` predictions."""
    if isinstance(model, TrainedModel):
        config = model.config
        params = params or {k: Tensor(v) for k, v in model.params.items()}
        embedding_matrix = model.embedding.matrix if embedding_matrix is None else embedding_matrix
    else:
        config = model
    ctx = _Ctx(config, params, embedding_matrix, dims, units, train, rng)
    if config.architecture == "window_mlp":
        if centers is None:
            raise ContractError("window_mlp needs a centre position per row")
        rep = _mlp_forward(ctx, seqs, centers)
    else:
        rep = _seq_forward(ctx, seqs)
    return rep @ params["W_out"] + params["b_out"]


def token_representations(model: TrainedModel, token_ids: Sequence[int]) -> np.ndarray:
    """Per-token hidden states ``[N, rep]`` of a recurrent model.

    For a Bi-LSTM row ``t`` concatenates the forward state after reading
    token ``t`` and the backward state after reading tokens ``N-1 .. t``.
    """
    cfg = model.config
    if not cfg.is_recurrent:
        raise ContractError("token representations need a recurrent model")
    params = {k: Tensor(v) for k, v in model.params.items()}
    ctx = _Ctx(cfg, params, model.embedding.matrix, (), None, False, None)
    ids, lengths = _pad([token_ids])
    if cfg.architecture != "bilstm":
        _, states = _run_direction(ctx, ids, lengths, "", None, True)
        return np.vstack(states)
    _, fw = _run_direction(ctx, ids, lengths, "_f", None, True)
    rev, _ = _pad([token_ids], reverse=True)
    _, bw = _run_direction(ctx, rev, lengths, "_b", None, True)
    fw, bw = np.vstack(fw), np.vstack(bw)[::-1]
    return np.hstack([fw, bw])


def batch_nll(model: TrainedModel, items: Sequence[Item], seqs=None, centers=None, **erase) -> np.ndarray:
    """Per-item loss: NLL of the gold class, or squared error for regressors."""
    seqs = [it.token_ids for it in items] if seqs is None else seqs
    centers = [it.center for it in items] if centers is None else centers
    out = batch_forward(model, seqs, centers, **erase).data
    gold = [it.gold for it in items]
    if model.config.head == "classifier":
        return ad.softmax_nll(out, np.array(gold, dtype=np.int64), reduction="none").data.copy()
    return (out[:, 0] - np.array(gold, dtype=np.float64)) ** 2


def predict_batch(model: TrainedModel, items: Sequence[Item], **erase) -> np.ndarray:
    """Predicted labels (classifier) or values (regressor)."""
    out = batch_forward(model, [it.token_ids for it in items], [it.center for it in items], **erase).data
    if model.config.head == "classifier":
        return out.argmax(axis=1)
    return out[:, 0]


def _prediction(out: np.ndarray) -> Prediction:
    probs = ad.softmax(out)
    return Prediction(int(np.argmax(probs)), probs, out.copy())


def _erasure_masks(spec) -> dict:
    if spec is None:
        return {}
    if spec.level == "input_dim":
        return {"dims": frozenset(spec.dims)}
    if spec.level == "hidden_unit":
        return {"units": {spec.layer: frozenset(spec.units)}}
    raise ContractError(f"erasure level {spec.level!r} is applied to token sequences, not masks")


def forward_window_mlp(model: TrainedModel, feature: np.ndarray, erasure: "ErasureSpec | None" = None):
    """Forward one window feature vector (``window * dim`` wide).

    Returns a :class:`Prediction` for classifiers and a float for regressors.
    """
    cfg = model.config
    feature = np.asarray(feature, dtype=np.float64)
    width = cfg.window * cfg.embedding_dim
    if cfg.architecture != "window_mlp" or feature.shape != (width,):
        raise ad.DimensionError(f"expected a window feature of width {width}, got shape {feature.shape}")
    masks = _erasure_masks(erasure)
    # route the raw feature through a one-row table so the batched path is reused
    table = np.vstack([feature.reshape(cfg.window, cfg.embedding_dim), np.zeros((1, cfg.embedding_dim))])
    seq = list(range(cfg.window))
    out = batch_forward(model, [seq], [cfg.window // 2], embedding_matrix=table, **masks).data[0]
    if cfg.head == "regressor":
        return float(out[0])
    return _prediction(out)


def forward_sequence(model: TrainedModel, token_ids: Sequence[int], erasure: "ErasureSpec | None" = None) -> Prediction:
    """Classify one token sequence, applying any erasure first."""
    seq = list(token_ids)
    masks = {}
    if erasure is not None and erasure.level in ("word_positions", "word_type"):
        seq = apply_word_erasure(seq, erasure.positions_in(model.vocab, seq), erasure.word_mode)
    else:
        masks = _erasure_masks(erasure)
    if not seq:
        raise ContractError("sequence is empty after word deletion")
    out = batch_forward(model, [seq], **masks).data[0]
    return _prediction(out)


def apply_word_erasure(seq: Sequence[int], positions, mode: str) -> list[int]:
    positions = set(positions)
    if mode == "delete":
        return [tok for i, tok in enumerate(seq) if i not in positions]
    if mode == "zero":
        return [PAD_INDEX if i in positions else tok for i, tok in enumerate(seq)]
    raise ConfigError(f"unknown word erasure mode {mode!r}")


def nll(model: TrainedModel, example: "Item | Example", erasure: "ErasureSpec | None" = None) -> float:
    """S(e, c): negative log-probability of the gold label, optionally after erasure."""
    item = example if isinstance(example, Item) else _single_item(model, example)
    if item.gold is None:
        raise ContractError(f"example {item.id} has no gold label")
    if model.config.head != "classifier":
        raise ContractError("nll is defined for classifier heads")
    seq, center = list(item.token_ids), item.center
    masks = {}
    if erasure is not None and erasure.level in ("word_positions", "word_type"):
        positions = erasure.positions_in(model.vocab, seq)
        if model.config.architecture == "window_mlp" and erasure.word_mode == "delete":
            if center in positions:
                raise ContractError("cannot delete the centre word of a window instance")
            center -= sum(1 for p in positions if p < center)
        seq = apply_word_erasure(seq, positions, erasure.word_mode)
    else:
        masks = _erasure_masks(erasure)
    return float(batch_nll(model, [item], [seq], [center], **masks)[0])


def _single_item(model: TrainedModel, example: Example) -> Item:
    if example.tags is not None:
        raise ContractError("tagging examples expand to several window instances; pass an Item")
    return Item(example.id, tuple(model.vocab.encode(example.tokens)), example.gold, 0, example.tokens, example.sentence_spans)


def encode_items(config: ModelConfig, vocab: Vocabulary, dataset: Dataset) -> list[Item]:
    items = []
    for ex in dataset:
        ids = tuple(vocab.encode(ex.tokens))
        if dataset.task_kind == "tagging":
            if config.is_recurrent:
                raise ConfigError("tagging datasets need the window_mlp architecture")
            for t, tag in enumerate(ex.tags):
                items.append(Item(f"{ex.id}:{t}", ids, tag, t, ex.tokens, ex.sentence_spans))
        else:
            if not config.is_recurrent and len(ids) != 1:
                raise ConfigError(
                    f"window_mlp classifies single words or tagged positions; example {ex.id} has {len(ids)} tokens"
                )
            items.append(Item(ex.id, ids, ex.gold, 0, ex.tokens, ex.sentence_spans))
    return items


# -------------------------------------------------------------- training


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def training_loss(config: ModelConfig, params: Mapping[str, Tensor], embedding_matrix, items: Sequence[Item], train=False, rng=None) -> Tensor:
    out = batch_forward(
        config,
        [it.token_ids for it in items],
        [it.center for it in items],
        params=params,
        embedding_matrix=embedding_matrix,
        train=train,
        rng=rng,
    )
    if config.head == "classifier":
        return ad.softmax_nll(out, np.array([it.gold for it in items], dtype=np.int64))
    return ad.mse(ad.reshape(out, (len(items),)), np.array([it.gold for it in items], dtype=np.float64))


def _dev_score(model: TrainedModel, items: Sequence[Item]) -> float:
    """Negative mean dev loss (NLL or squared error); higher is better."""
    return -float(np.mean(_chunked(batch_nll, model, items)))


def _chunked(fn, model, items, size: int = 512):
    parts = [fn(model, items[i : i + size]) for i in range(0, len(items), size)]
    return np.concatenate(parts) if parts else np.zeros(0)


def train(
    config: ModelConfig,
    embedding: EmbeddingTable,
    train_set: Dataset,
    dev_set: Dataset,
) -> TrainedModel:
    """Mini-batch Adam with global-norm clipping and early stopping on the dev metric."""
    if embedding.dim != config.embedding_dim:
        raise ConfigError(f"embedding dim {embedding.dim} != config embedding_dim {config.embedding_dim}")
    if config.head == "classifier" and train_set.task_kind != "word_regression" and train_set.num_classes > config.num_classes:
        raise ConfigError(f"dataset has {train_set.num_classes} classes, model has {config.num_classes}")
    items = encode_items(config, embedding.vocab, train_set)
    dev_items = encode_items(config, embedding.vocab, dev_set)
    if not items or not dev_items:
        raise ContractError("training and dev sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    values = init_params(config, rng)
    if config.head == "regressor":
        values["b_out"][:] = np.mean([it.gold for it in items])
    if config.trainable_embeddings:
        values["E"] = embedding.matrix.copy()
    opt = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def snapshot(vals) -> TrainedModel:
        p = {k: v for k, v in vals.items() if k != "E"}
        emb = embedding
        if config.trainable_embeddings:
            emb = EmbeddingTable(embedding.vocab, vals["E"], trainable=True)
        return TrainedModel(config, p, emb)

    best_score, best, since_best = -math.inf, None, 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(items))
        losses = []
        for bi, start in enumerate(range(0, len(items), config.batch_size)):
            batch = [items[i] for i in order[start : start + config.batch_size]]
            tensors = {k: Tensor(v, requires_grad=True) for k, v in values.items()}
            emb = tensors.pop("E", None)
            matrix = emb if emb is not None else embedding.matrix
            with ad.Tape() as tape:
                loss = training_loss(config, tensors, matrix, batch, train=True, rng=rng)
                lv = float(loss.data)
                if not math.isfinite(lv):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
                tape.backward(loss)
            grads = {k: tape.grad(t) for k, t in tensors.items()}
            if emb is not None:
                grads["E"] = tape.grad(emb).copy()
                grads["E"][PAD_INDEX] = 0.0
            clip_by_global_norm(grads, config.clip_norm)
            opt.step(values, grads)
            if "E" in values:
                values["E"][PAD_INDEX] = 0.0
            losses.append(lv)
        current = snapshot(values)
        score = _dev_score(current, dev_items)
        history.append((epoch, float(np.mean(losses)), -score))
        log.debug("epoch %d loss %.5f dev loss %.5f", epoch, history[-1][1], -score)
        if score > best_score:
            best_score, best, since_best = score, current, 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return replace(best, history=tuple(history), label_names=tuple(train_set.label_names))


def evaluate(model: TrainedModel, dataset: Dataset) -> dict:
    items = model.items(dataset)
    preds = _chunked(predict_batch, model, items)
    gold = np.array([it.gold for it in items])
    if model.config.head == "classifier":
        return {"n": len(items), "accuracy": float(np.mean(preds == gold))}
    return {"n": len(items), "mse": float(np.mean((preds - gold) ** 2)), "label_variance": float(np.var(gold))}


# ---------------------------------------------------------------- files


def model_body(model: TrainedModel) -> dict:
    return {
        "config": model.config.to_dict(),
        "vocabulary": model.vocab.tokens,
        "embedding": serialization.encode_array(model.embedding.matrix),
        "embedding_trainable": model.embedding.trainable,
        "parameters": {k: serialization.encode_array(v) for k, v in sorted(model.params.items())},
        "history": [list(h) for h in model.history],
        "label_names": list(model.label_names),
    }


def model_from_body(doc: dict) -> TrainedModel:
    config = ModelConfig.from_dict(doc["config"])
    vocab = Vocabulary.from_index_list(doc["vocabulary"])
    table = EmbeddingTable(vocab, serialization.decode_array(doc["embedding"]), doc.get("embedding_trainable", False))
    params = {k: serialization.decode_array(v) for k, v in doc["parameters"].items()}
    expected = init_params(config, np.random.default_rng(0))
    if set(params) != set(expected):
        raise serialization.ModelFileError(f"parameter names {sorted(params)} do not match {config.architecture}")
    for k, v in params.items():
        if v.shape != expected[k].shape:
            raise serialization.ModelFileError(f"parameter {k} has shape {v.shape}, expected {expected[k].shape}")
    history = tuple(tuple(h) for h in doc.get("history", []))
    return TrainedModel(config, params, table, history, label_names=tuple(doc.get("label_names", [])))


def save(model: TrainedModel, path) -> None:
    serialization.write(path, "model", model_body(model))


def load(path) -> TrainedModel:
    return model_from_body(serialization.read(path, "model"))
