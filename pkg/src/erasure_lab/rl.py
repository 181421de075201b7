"""Minimal decision-flipping word sets.

An exhaustive solver finds the smallest set of token positions whose
deletion changes a fixed classifier's predicted label. A REINFORCE policy
learns to propose such sets: each token is removed independently with
probability sigmoid(w[L] . h_t + b[L]), where h_t is the classifier's
hidden state at token t and L its label on the full input. Rewards are
1/|D| for a flip, minus a penalty on keep/remove switches inside a
sentence. A small tanh network estimates the expected reward of an
example and serves as the baseline.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import re
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import serialization
from .autodiff import ContractError, Tensor
from .data import Dataset, Example
from .embeddings import ConfigError
from .models import Adam, Item, TrainedModel, batch_forward, token_representations

log = logging.getLogger(__name__)

POLICY_KIND = "rl-policy"


class BudgetError(ValueError):
    """Exhaustive search was asked for an input longer than its budget."""


class PolicyDiverged(RuntimeError):
    """A policy or baseline gradient became non-finite."""


@dataclass(frozen=True)
class RLConfig:
    gamma: float = 0.01
    rollouts_per_example: int = 4
    policy_lr: float = 0.05
    baseline_lr: float = 0.01
    epochs: int = 10
    batch_size: int = 16
    baseline_hidden: int = 32
    # tokens that close a sentence when an example carries no spans
    sentence_terminators: tuple[str, ...] = (".", "!", "?")
    seed: int = 0

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.rollouts_per_example < 1:
            raise ConfigError("rollouts_per_example must be at least 1")
        if self.epochs < 0 or self.batch_size < 1 or self.baseline_hidden < 1:
            raise ConfigError("epochs, batch_size and baseline_hidden must be positive")
        if self.policy_lr <= 0 or self.baseline_lr <= 0:
            raise ConfigError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["sentence_terminators"] = list(self.sentence_terminators)
        return d

    @classmethod
    def from_dict(cls, d) -> "RLConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown RL config keys: {sorted(unknown)}")
        if "sentence_terminators" in d:
            d["sentence_terminators"] = tuple(d["sentence_terminators"])
        return cls(**d)


@dataclass(frozen=True)
class PolicyParams:
    """One logistic removal unit per model label: ``W[L] . h_t + b[L]``."""

    W: np.ndarray
    b: np.ndarray
    seed: int = 0

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ad.DimensionError(f"policy weights {W.shape} and bias {b.shape} disagree")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("policy parameters must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @classmethod
    def init(cls, num_classes: int, rep_size: int, seed: int = 0, bias: float = -1.0) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        W = rng.uniform(-0.01, 0.01, size=(num_classes, rep_size))
        return cls(W, np.full(num_classes, bias), seed)


@dataclass(frozen=True)
class BaselineParams:
    """``b(e) = w2 . tanh(W1 x + b1) + b2`` with ``x`` the mean hidden state and a label one-hot."""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def __post_init__(self):
        for name in ("W1", "b1", "w2"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"baseline {name} has non-finite values")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not math.isfinite(self.b2):
            raise ValueError("baseline bias must be finite")
        object.__setattr__(self, "b2", float(self.b2))

    @classmethod
    def init(cls, in_size: int, hidden: int = 32, seed: int = 0) -> "BaselineParams":
        rng = np.random.default_rng(seed + 1)
        s = 1.0 / math.sqrt(in_size)
        return cls(
            rng.uniform(-s, s, (in_size, hidden)),
            np.zeros(hidden),
            rng.uniform(-1 / math.sqrt(hidden), 1 / math.sqrt(hidden), hidden),
            0.0,
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "w2": self.w2, "b2": np.array(self.b2)}


@dataclass(frozen=True)
class RLExample:
    """An input prepared for the policy: ids, sentence spans, model label, hidden states."""

    id: str
    tokens: tuple[str, ...]
    token_ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]
    label: int
    reps: np.ndarray

    @property
    def n(self) -> int:
        return len(self.token_ids)

    def features(self, num_classes: int) -> np.ndarray:
        onehot = np.zeros(num_classes)
        onehot[self.label] = 1.0
        return np.concatenate([self.reps.mean(axis=0), onehot])


@dataclass(frozen=True)
class Rollout:
    z: tuple[int, ...]
    D: tuple[int, ...]
    label_before: int
    label_after: int
    L_term: float
    Omega_term: float
    R: float
    log_prob: float = 0.0

    @property
    def flipped(self) -> bool:
        return self.label_after != self.label_before and 0 < len(self.D) < len(self.z)


@dataclass(frozen=True)
class StepInfo:
    mean_reward: float
    mean_advantage: float
    grad_norm: float
    baseline_loss: float


@dataclass
class _Optimizers:
    policy: Adam
    baseline: Adam


@dataclass(frozen=True)
class PolicyTrainingResult:
    policy: PolicyParams
    baseline: BaselineParams
    config: RLConfig
    curve: tuple[tuple[int, float, float], ...] = ()


@dataclass(frozen=True)
class ErasureResult:
    id: str
    label_before: int
    label_after: int
    removed: tuple[int, ...]
    removed_tokens: tuple[str, ...]
    R: float
    size: int
    flipped: bool
    tokens: tuple[str, ...] = ()

    def record(self) -> dict:
        return {
            "id": self.id,
            "label_before": self.label_before,
            "label_after": self.label_after,
            "removed": list(self.removed),
            "removed_tokens": list(self.removed_tokens),
            "R": self.R,
            "size": self.size,
            "flipped": self.flipped,
        }


# ------------------------------------------------------------ preparation


def sentence_spans_of(tokens: Sequence[str], terminators: Iterable[str] = (".", "!", "?")) -> tuple[tuple[int, int], ...]:
    ends = set(terminators)
    spans, start = [], 0
    for i, tok in enumerate(tokens):
        if tok in ends:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return tuple(spans)


def model_labels(model: TrainedModel, seqs: Sequence[Sequence[int]], chunk: int = 512) -> np.ndarray:
    if model.config.head != "classifier":
        raise ContractError("decision flipping needs a classifier head")
    out = []
    for i in range(0, len(seqs), chunk):
        out.append(batch_forward(model, seqs[i : i + chunk]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def prepare(model: TrainedModel, examples, config: RLConfig | None = None) -> list[RLExample]:
    """Encode examples and attach the model's label and per-token hidden states."""
    config = config or RLConfig()
    if isinstance(examples, Dataset):
        examples = list(examples)
    rows = []
    for ex in examples:
        if isinstance(ex, RLExample):
            rows.append(ex)
            continue
        if isinstance(ex, Item):
            ids, tokens, spans = tuple(ex.token_ids), tuple(ex.tokens), tuple(ex.spans)
        elif isinstance(ex, Example):
            ids, tokens, spans = tuple(model.vocab.encode(ex.tokens)), ex.tokens, ex.sentence_spans
        else:
            raise TypeError(f"cannot prepare {type(ex).__name__}")
        if not ids:
            raise ContractError(f"example {ex.id} is empty")
        tokens = tokens or tuple(model.vocab.token(i) for i in ids)
        spans = spans or sentence_spans_of(tokens, config.sentence_terminators)
        rows.append(RLExample(ex.id, tokens, ids, spans, -1, token_representations(model, ids)))
    pending = [i for i, r in enumerate(rows) if r.label < 0]
    labels = model_labels(model, [rows[i].token_ids for i in pending])
    for i, lab in zip(pending, labels):
        rows[i] = replace(rows[i], label=int(lab))
    return rows


# ---------------------------------------------------------------- reward


def _check_spans(spans, n: int) -> None:
    pos = 0
    for start, stop in spans:
        if start != pos or stop <= start:
            raise ContractError(f"sentence spans {list(spans)} do not partition [0, {n})")
        pos = stop
    if pos != n:
        raise ContractError(f"sentence spans {list(spans)} do not partition [0, {n})")


def transitions(z: Sequence[int], spans) -> int:
    """Keep/remove switches between adjacent tokens of the same sentence."""
    z = [int(v) for v in z]
    if any(v not in (0, 1) for v in z):
        raise ContractError("z must be binary")
    _check_spans(spans, len(z))
    return sum(abs(z[t] - z[t - 1]) for start, stop in spans for t in range(start + 1, stop))


def omega(z: Sequence[int], sentence_spans, gamma: float) -> float:
    return gamma * transitions(z, sentence_spans)


def _erase(ids: Sequence[int], z: Sequence[int]) -> list[int]:
    return [tok for tok, zt in zip(ids, z) if not zt]


def _rollouts(model: TrainedModel, ex: RLExample, zs: Sequence[Sequence[int]], gamma: float, log_probs=None) -> list[Rollout]:
    zs = [tuple(int(v) for v in z) for z in zs]
    for z in zs:
        if len(z) != ex.n:
            raise ContractError(f"z has length {len(z)} for an example of {ex.n} tokens")
    valid = [i for i, z in enumerate(zs) if 0 < sum(z) < ex.n]
    after = np.full(len(zs), ex.label, dtype=np.int64)
    if valid:
        after[valid] = model_labels(model, [_erase(ex.token_ids, zs[i]) for i in valid])
    out = []
    for i, z in enumerate(zs):
        D = tuple(t for t, v in enumerate(z) if v)
        L = 1.0 / len(D) if 0 < len(D) < ex.n and after[i] != ex.label else 0.0
        om = omega(z, ex.spans, gamma)
        lp = 0.0 if log_probs is None else float(log_probs[i])
        out.append(Rollout(z, D, ex.label, int(after[i]), L, om, L - om, lp))
    return out


def reward(model: TrainedModel, example: RLExample, z: Sequence[int], gamma: float) -> Rollout:
    return _rollouts(model, example, [z], gamma)[0]


# ---------------------------------------------------------------- policy


def removal_probabilities(policy: PolicyParams, ex: RLExample) -> np.ndarray:
    logits = ex.reps @ policy.W[ex.label] + policy.b[ex.label]
    return ad._sigmoid(logits)


def log_prob(policy: PolicyParams, ex: RLExample, z: Sequence[int]) -> float:
    logits = ex.reps @ policy.W[ex.label] + policy.b[ex.label]
    z = np.asarray(z, dtype=np.float64)
    # log sigmoid(x) = -log(1 + e^-x)
    return float(np.sum(-np.logaddexp(0.0, -logits) * z - np.logaddexp(0.0, logits) * (1.0 - z)))


def _sample_z(policy: PolicyParams, ex: RLExample, rng: np.random.Generator, k: int) -> np.ndarray:
    p = removal_probabilities(policy, ex)
    return (rng.random((k, ex.n)) < p[None, :]).astype(np.int64)


def sample_rollouts(policy, model, ex: RLExample, rng, k: int, gamma: float) -> list[Rollout]:
    zs = _sample_z(policy, ex, rng, k)
    return _rollouts(model, ex, zs, gamma, [log_prob(policy, ex, z) for z in zs])


def sample_rollout(policy: PolicyParams, model: TrainedModel, example: RLExample, rng, gamma: float = 0.01) -> Rollout:
    return sample_rollouts(policy, model, example, rng, 1, gamma)[0]


def score_function(policy: PolicyParams, ex: RLExample, z: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of log pi(z) with respect to ``(W, b)``."""
    g = np.asarray(z, dtype=np.float64) - removal_probabilities(policy, ex)
    gW = np.zeros_like(policy.W)
    gb = np.zeros_like(policy.b)
    gW[ex.label] = g @ ex.reps
    gb[ex.label] = g.sum()
    return gW, gb


def baseline_value(baseline: BaselineParams, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.tanh(x @ baseline.W1 + baseline.b1) @ baseline.w2 + baseline.b2


def _baseline_grads(baseline: BaselineParams, X: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
    params = {k: Tensor(v, requires_grad=True) for k, v in baseline.as_dict().items()}
    with ad.Tape() as tape:
        h = ad.tanh(Tensor(X) @ params["W1"] + params["b1"])
        pred = ad.reshape(h @ ad.reshape(params["w2"], (-1, 1)), (len(y),)) + params["b2"]
        loss = ad.mse(pred, y)
        tape.backward(loss)
    return float(loss.data), {k: tape.grad(t).reshape(t.shape) for k, t in params.items()}


def policy_gradient_step(
    policy: PolicyParams,
    baseline: BaselineParams,
    rollouts: Sequence[tuple[RLExample, Sequence[Rollout]]],
    config: RLConfig,
    optimizers: _Optimizers | None = None,
) -> tuple[PolicyParams, BaselineParams, StepInfo]:
    """One REINFORCE ascent step on ``mean log pi(z) (R - b(e))`` plus a baseline regression step.

    All rollouts of one example share the baseline value b(e), computed
    before the baseline is updated.
    """
    pairs = [(ex, rs) for ex, rs in rollouts if len(rs)]
    if not pairs:
        raise ContractError("policy_gradient_step needs at least one rollout")
    optimizers = optimizers or _Optimizers(Adam(config.policy_lr), Adam(config.baseline_lr))
    num_classes = policy.W.shape[0]
    X = np.vstack([ex.features(num_classes) for ex, _ in pairs])
    b_e = baseline_value(baseline, X)
    gW = np.zeros_like(policy.W)
    gb = np.zeros_like(policy.b)
    advantages, rewards, targets, rows = [], [], [], []
    for (ex, rs), b in zip(pairs, b_e):
        for r in rs:
            adv = r.R - b
            sW, sb = score_function(policy, ex, r.z)
            gW += adv * sW
            gb += adv * sb
            advantages.append(adv)
            rewards.append(r.R)
            targets.append(r.R)
            rows.append(ex.features(num_classes))
    n = len(advantages)
    gW /= n
    gb /= n
    norm = math.sqrt(float((gW * gW).sum() + (gb * gb).sum()))
    if not math.isfinite(norm):
        raise PolicyDiverged("non-finite policy gradient")
    values = {"W": policy.W.copy(), "b": policy.b.copy()}
    # Adam minimises, so hand it the negated ascent direction
    optimizers.policy.step(values, {"W": -gW, "b": -gb})
    new_policy = PolicyParams(values["W"], values["b"], policy.seed)

    bl_loss, bl_grads = _baseline_grads(baseline, np.vstack(rows), np.array(targets))
    if not all(np.all(np.isfinite(g)) for g in bl_grads.values()):
        raise PolicyDiverged("non-finite baseline gradient")
    bvals = {k: np.array(v, dtype=np.float64) for k, v in baseline.as_dict().items()}
    optimizers.baseline.step(bvals, bl_grads)
    new_baseline = BaselineParams(bvals["W1"], bvals["b1"], bvals["w2"], float(bvals["b2"]))
    info = StepInfo(float(np.mean(rewards)), float(np.mean(advantages)), norm, bl_loss)
    return new_policy, new_baseline, info


def train_policy(model: TrainedModel, dataset, config: RLConfig | None = None) -> PolicyTrainingResult:
    """REINFORCE over the dataset; the classifier itself is never changed."""
    config = config or RLConfig()
    examples = prepare(model, dataset, config)
    if not examples:
        raise ContractError("train_policy needs at least one example")
    rng = np.random.default_rng(config.seed)
    num_classes = model.config.num_classes
    rep = examples[0].reps.shape[1]
    policy = PolicyParams.init(num_classes, rep, config.seed)
    baseline = BaselineParams.init(rep + num_classes, config.baseline_hidden, config.seed)
    opts = _Optimizers(Adam(config.policy_lr), Adam(config.baseline_lr))
    curve = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        rewards, flips = [], []
        for start in range(0, len(order), config.batch_size):
            batch = []
            for i in order[start : start + config.batch_size]:
                ex = examples[i]
                rs = sample_rollouts(policy, model, ex, rng, config.rollouts_per_example, config.gamma)
                batch.append((ex, rs))
                rewards.extend(r.R for r in rs)
                flips.extend(r.flipped for r in rs)
            policy, baseline, info = policy_gradient_step(policy, baseline, batch, config, opts)
        curve.append((epoch, float(np.mean(rewards)), float(np.mean(flips))))
        log.debug("rl epoch %d mean reward %.4f flip rate %.3f", *curve[-1])
    return PolicyTrainingResult(policy, baseline, config, tuple(curve))


def expected_reward(policy: PolicyParams, model: TrainedModel, ex: RLExample, gamma: float) -> float:
    """Exact ``E_pi[R]`` by enumerating all 2^N removal vectors (small N only)."""
    zs = list(itertools.product((0, 1), repeat=ex.n))
    rs = _rollouts(model, ex, zs, gamma)
    return float(sum(math.exp(log_prob(policy, ex, z)) * r.R for z, r in zip(zs, rs)))


def reinforce_estimate(
    policy: PolicyParams, model: TrainedModel, ex: RLExample, n_samples: int, rng, gamma: float, baseline: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo ``mean grad log pi(z) (R - b)`` over ``n_samples`` draws, for ``(W, b)``."""
    zs = _sample_z(policy, ex, rng, n_samples)
    # reward depends only on z: score each distinct vector once
    uniq, inverse = np.unique(zs, axis=0, return_inverse=True)
    R = np.array([r.R for r in _rollouts(model, ex, uniq, gamma)])[np.asarray(inverse).reshape(-1)]
    p = removal_probabilities(policy, ex)
    coef = (zs - p[None, :]) * (R - baseline)[:, None]
    gW = np.zeros_like(policy.W)
    gb = np.zeros_like(policy.b)
    gW[ex.label] = coef.sum(axis=0) @ ex.reps / n_samples
    gb[ex.label] = coef.sum() / n_samples
    return gW, gb


# ------------------------------------------------------------ inference


def parse_mode(mode: str, samples: int | None = None) -> tuple[str, int]:
    m = re.fullmatch(r"sample_best(?:\((\d+)\))?", mode)
    if mode == "greedy":
        return "greedy", 1
    if m:
        k = int(m.group(1)) if m.group(1) else (samples or 64)
        if k < 1:
            raise ConfigError("sample_best needs at least one sample")
        return "sample_best", k
    raise ConfigError(f"unknown policy mode {mode!r}; use 'greedy' or 'sample_best(k)'")


def _result(ex: RLExample, r: Rollout) -> ErasureResult:
    return ErasureResult(
        ex.id, r.label_before, r.label_after, r.D, tuple(ex.tokens[t] for t in r.D),
        r.R, len(r.D), r.flipped, ex.tokens,
    )


def _rank(ex: RLExample, r: Rollout):
    return (len(r.D), transitions(r.z, ex.spans), r.D)


def apply_policy(
    policy: PolicyParams,
    model: TrainedModel,
    example: RLExample,
    mode: str = "greedy",
    *,
    samples: int | None = None,
    gamma: float = 0.01,
    rng: np.random.Generator | int | None = 0,
) -> ErasureResult:
    """Propose a removal set.

    ``greedy`` removes every token whose removal probability exceeds 0.5.
    ``sample_best(k)`` draws k rollouts and keeps the flipping one with the
    fewest removals (then fewest sentence switches, then the smallest index
    tuple). Without any flip the best-rewarded draw is reported instead.
    """
    mode, k = parse_mode(mode, samples)
    if mode == "greedy":
        z = (removal_probabilities(policy, example) > 0.5).astype(np.int64)
        return _result(example, _rollouts(model, example, [z], gamma)[0])
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    rs = _rollouts(model, example, _sample_z(policy, example, rng, k), gamma)
    flipping = [r for r in rs if r.flipped]
    if flipping:
        best = min(flipping, key=lambda r: _rank(example, r))
    else:
        best = min(rs, key=lambda r: (-r.R,) + _rank(example, r))
    return _result(example, best)


@dataclass(frozen=True)
class MinimalSet:
    id: str
    D: tuple[int, ...]
    label_before: int
    label_after: int
    forwards: int


def brute_force_minimal(model: TrainedModel, example: RLExample, max_n: int = 14, chunk: int = 1024) -> MinimalSet | None:
    """Smallest flipping deletion set by exhaustive search.

    Sizes are tried in increasing order and, within a size, index tuples in
    lexicographic order; the first flip found is returned. Deleting every
    token is not a valid answer.
    """
    n = example.n
    if n > max_n:
        raise BudgetError(f"example {example.id} has {n} tokens > max_n={max_n}; use the learned policy instead")
    forwards = 0
    for size in range(1, n):
        combos = list(itertools.combinations(range(n), size))
        for start in range(0, len(combos), chunk):
            part = combos[start : start + chunk]
            seqs = []
            for D in part:
                drop = set(D)
                seqs.append([tok for t, tok in enumerate(example.token_ids) if t not in drop])
            labels = model_labels(model, seqs, chunk)
            forwards += len(part)
            hits = np.flatnonzero(labels != example.label)
            if hits.size:
                i = int(hits[0])
                return MinimalSet(example.id, part[i], example.label, int(labels[i]), forwards)
    return None


# ------------------------------------------------------------------ files


def policy_body(result: PolicyTrainingResult) -> dict:
    enc = serialization.encode_array
    return {
        "rl_config": result.config.to_dict(),
        "policy": {"W": enc(result.policy.W), "b": enc(result.policy.b), "seed": result.policy.seed},
        "baseline": {k: enc(v) for k, v in result.baseline.as_dict().items()},
        "curve": [list(c) for c in result.curve],
    }


def policy_from_body(doc: dict) -> PolicyTrainingResult:
    dec = serialization.decode_array
    try:
        p, b = doc["policy"], doc["baseline"]
        policy = PolicyParams(dec(p["W"]), dec(p["b"]), int(p["seed"]))
        baseline = BaselineParams(dec(b["W1"]), dec(b["b1"]), dec(b["w2"]), float(dec(b["b2"])))
        config = RLConfig.from_dict(doc["rl_config"])
        curve = tuple((int(e), float(r), float(f)) for e, r, f in doc.get("curve", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise serialization.ModelFileError(f"malformed policy file: {exc}") from None
    return PolicyTrainingResult(policy, baseline, config, curve)


def save_policy(result: PolicyTrainingResult, path) -> None:
    serialization.write(path, POLICY_KIND, policy_body(result))


def load_policy(path) -> PolicyTrainingResult:
    return policy_from_body(serialization.read(path, POLICY_KIND))


def records_text(results: Iterable[ErasureResult]) -> str:
    """One JSON object per line."""
    return "".join(json.dumps(r.record(), sort_keys=True) + "\n" for r in results)
