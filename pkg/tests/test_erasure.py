import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erasure_lab.autodiff import DimensionError
from erasure_lab.data import Dataset, Example, SyntheticSpec, gen_frequency_task
from erasure_lab.embeddings import ConfigError, EmbeddingTable
from erasure_lab.erasure import (
    EPS,
    DegenerateFitError,
    EmptyPopulationError,
    ErasureSpec,
    concentration,
    dimension_importance,
    frequency_correlation,
    importance,
    importance_histogram,
    importance_matrix,
    layer_importance,
    scan,
    signed_log,
    unit_importance,
    word_type_importances,
    word_type_ranking,
)
from erasure_lab.models import Item, ModelConfig, TrainedModel, init_params, nll

from conftest import tiny_table


def handset_model():
    """Window-1 MLP whose gold NLL is exactly 2 and becomes 3 when dim 0 is erased."""
    cfg = ModelConfig("window_mlp", 2, window=1, hidden_size=1, intermediate_layers=1)
    table = EmbeddingTable.from_vectors(["w"], np.array([[0.5, 0.0]]))
    h = math.tanh(0.5)
    c = math.log(math.expm1(3.0))
    k = (math.log(math.expm1(2.0)) - c) / h
    params = {
        "W1": np.array([[1.0], [0.0]]),
        "b1": np.zeros(1),
        "W_out": np.array([[k, 0.0]]),
        "b_out": np.array([c, 0.0]),
    }
    return TrainedModel(cfg, params, table), Dataset([Example("e", ("w",), gold=1)], ["0", "1"])


def random_model(arch="lstm", seed=0, tokens=("a", "b", "c", "d"), dim=4, hidden=3):
    cfg = ModelConfig(arch, dim, hidden_size=hidden, window=1, seed=seed)
    return TrainedModel(cfg, init_params(cfg, np.random.default_rng(seed)), tiny_table(tokens, dim, seed))


def random_dataset(n, seed=0, tokens=("a", "b", "c", "d"), min_len=1, max_len=5):
    rng = np.random.default_rng(seed)
    exs = []
    for i in range(n):
        k = int(rng.integers(min_len, max_len + 1))
        exs.append(Example(f"e{i:03d}", tuple(str(t) for t in rng.choice(tokens, k)), gold=int(rng.integers(2))))
    return Dataset(exs, ["0", "1"])


def test_direct_substitution_example():
    m, ds = handset_model()
    assert nll(m, ds.examples[0]) == pytest.approx(2.0, abs=1e-12)
    rep = importance(m, ds, ErasureSpec.input_dim(0))
    assert rep.per_example[0].S_erased == pytest.approx(3.0, abs=1e-12)
    assert rep.I == pytest.approx(0.5, abs=1e-12)


def test_zero_column_gives_exactly_zero():
    table = tiny_table(["a", "b", "c", "d"], 4, 1)
    mat = table.matrix.copy()
    mat[:, 2] = 0.0
    table = EmbeddingTable(table.vocab, mat)
    cfg = ModelConfig("bilstm", 4, hidden_size=3)
    m = TrainedModel(cfg, init_params(cfg, np.random.default_rng(1)), table)
    rep = importance(m, random_dataset(20), ErasureSpec.input_dim(2))
    assert rep.I == 0.0
    assert all(s.contribution == 0.0 for s in rep.per_example)


@pytest.mark.parametrize("arch", ["window_mlp", "rnn"])
def test_unit_without_outgoing_weight_is_zero(arch):
    m = random_model(arch)
    params = {k: v.copy() for k, v in m.params.items()}
    # a recurrent unit also feeds the next step
    for name in ("W_out", "W_h", "W2"):
        if name in params:
            params[name][1] = 0.0
    m = TrainedModel(m.config, params, m.embedding)
    layer = m.config.hidden_layers
    max_len = 1 if arch == "window_mlp" else 5
    imp = unit_importance(m, random_dataset(15, min_len=max_len, max_len=max_len), layer=layer)
    assert imp[1] == 0.0 and np.count_nonzero(imp) >= 1


def test_empty_spec_matches_plain_forward():
    m = random_model()
    ds = random_dataset(10)
    rep = importance(m, ds, ErasureSpec("input_dim"))
    assert all(s.S == s.S_erased for s in rep.per_example)


def test_report_invariants():
    m = random_model("lstm", 2)
    rep = importance(m, random_dataset(40, 2), ErasureSpec.input_dim(1))
    contribs = [s.contribution for s in rep.per_example]
    assert abs(rep.I - np.mean(contribs)) <= 1e-12
    assert all(s.S >= 0 and s.S_erased >= 0 for s in rep.per_example)
    for s in rep.per_example:
        assert s.contribution == (s.S_erased - s.S) / max(s.S, EPS)
    assert rep.metadata["eps"] == EPS and "positive" in rep.metadata["sign_convention"]


def test_single_token_examples_skipped_under_delete():
    m = random_model()
    ds = Dataset([Example("one", ("a",), 0), Example("two", ("a", "b"), 1)], ["0", "1"])
    rep = importance(m, ds, ErasureSpec.word_type("a"))
    assert rep.n_examples == 1 and rep.skipped_examples == 1
    rep = importance(m, ds, ErasureSpec.word_type("a", mode="zero"))
    assert rep.n_examples == 2 and rep.skipped_examples == 0
    with pytest.raises(EmptyPopulationError):
        importance(m, Dataset([Example("one", ("a",), 0)], ["0", "1"]), ErasureSpec.word_type("a"))


def test_absent_token_and_empty_dataset():
    m = random_model()
    with pytest.raises(EmptyPopulationError):
        importance(m, random_dataset(5), ErasureSpec.word_type("zzz"))
    with pytest.raises(EmptyPopulationError):
        importance(m, Dataset([], ["0", "1"]), ErasureSpec.input_dim(0))


def test_word_type_erases_every_occurrence():
    m = random_model()
    ds = Dataset([Example("x", ("a", "b", "a", "c"), 1)], ["0", "1"])
    rep = importance(m, ds, ErasureSpec.word_type("a"))
    assert rep.per_example[0].S_erased == nll(m, ds.examples[0], ErasureSpec.word_positions([0, 2]))


def test_spec_validation():
    m = random_model()
    with pytest.raises(ConfigError):
        ErasureSpec("input_dim", dims=frozenset({0}), token="a")
    with pytest.raises(ConfigError):
        ErasureSpec("pixels")
    with pytest.raises(IndexError):
        importance(m, random_dataset(3), ErasureSpec.input_dim(4))
    with pytest.raises(IndexError):
        importance(m, random_dataset(3), ErasureSpec.hidden_unit(1, 3))


def test_parallel_matches_serial_bitwise(monkeypatch):
    m = random_model("bilstm", 3)
    ds = random_dataset(300, 3)
    serial = importance(m, ds, ErasureSpec.input_dim(0), workers=1, chunk_size=32)
    par = importance(m, ds, ErasureSpec.input_dim(0), workers=4, chunk_size=32)
    assert serial == par
    monkeypatch.setenv("ERASURE_LAB_THREADS", "3")
    assert importance(m, ds, ErasureSpec.input_dim(0), chunk_size=32) == serial
    monkeypatch.setenv("ERASURE_LAB_THREADS", "many")
    with pytest.raises(ConfigError):
        importance(m, ds, ErasureSpec.input_dim(0))


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(12))))
def test_importance_is_order_invariant(perm):
    m = random_model("rnn", 4)
    ds = random_dataset(12, 4)
    base = importance(m, ds, ErasureSpec.input_dim(3)).I
    shuffled = Dataset([ds.examples[i] for i in perm], ds.label_names)
    assert importance(m, shuffled, ErasureSpec.input_dim(3)).I == pytest.approx(base, rel=1e-12, abs=1e-15)


def test_scan_and_layer_importance_shapes():
    cfg = ModelConfig("window_mlp", 4, window=1, hidden_size=3, intermediate_layers=2)
    m = TrainedModel(cfg, init_params(cfg, np.random.default_rng(0)), tiny_table("abcd", 4))
    ds = random_dataset(10, min_len=1, max_len=1)
    li = layer_importance(m, ds)
    assert list(li) == ["input", "layer1", "layer2"]
    assert [v.shape for v in li.values()] == [(4,), (3,), (3,)]
    np.testing.assert_array_equal(li["input"], dimension_importance(m, ds))
    reps = scan(m, ds, [ErasureSpec.input_dim(0), ErasureSpec.hidden_unit(2, 1)])
    assert [r.target for r in reps] == ["dim:0", "layer2:1"]


def test_importance_matrix():
    m1, m2 = random_model(seed=1), random_model(seed=2)
    ds = random_dataset(8)
    rows, cols, mat = importance_matrix([("t1", m1, ds), ("t2", m2, ds)])
    assert rows == ["t1", "t2"] and cols == ["d0", "d1", "d2", "d3"] and mat.shape == (2, 4)
    wide = random_model(seed=3, dim=5)
    with pytest.raises(DimensionError):
        importance_matrix([("t1", m1, ds), ("t3", wide, ds)])
    with pytest.raises(EmptyPopulationError):
        importance_matrix([])


# ----------------------------------------------------------- statistics


def test_concentration():
    assert concentration([1.0, 1.0, 1.0]) == pytest.approx(1.0, rel=1e-5)
    assert concentration([4.0, 0.0, 0.0, 0.0]) == pytest.approx(4.0, rel=1e-5)
    assert concentration([2.0, -2.0]) == pytest.approx(1.0, rel=1e-5)


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_signed_log_odd_and_monotone(x):
    assert signed_log(-x) == -signed_log(x)
    assert signed_log(x + 1.0) >= signed_log(x)


def test_signed_log_values():
    assert signed_log(0.0) == 0.0
    assert signed_log(1e-3) == pytest.approx(math.log(2.0))
    np.testing.assert_allclose(signed_log([-1e-3, 1.0]), [-math.log(2.0), math.log(1001.0)])


def test_histogram_buckets_and_clamping():
    assert importance_histogram([-5, 0.0, 0.5, 1.0, 2.0, 10], [0, 1, 2]) == [3, 3]
    assert importance_histogram([], [0, 1]) == [0]
    for edges in ([0], [0, 0], [1, 0]):
        with pytest.raises(ConfigError):
            importance_histogram([0.5], edges)


@given(st.lists(st.floats(-100, 100), max_size=50))
def test_histogram_counts_everything(values):
    assert sum(importance_histogram(values, [-1, 0, 1, 5])) == len(values)


def test_frequency_fit_perfect_and_noise():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(1000)]
    logf = {w: float(v) for w, v in zip(words, rng.normal(size=1000))}
    vecs = rng.normal(size=(1000, 3))
    vecs[:, 1] = [logf[w] for w in words]
    table = EmbeddingTable.from_vectors(words, vecs)
    fit = frequency_correlation(table, 1, logf)
    assert fit.r_squared == pytest.approx(1.0) and fit.slope == pytest.approx(1.0) and fit.n == 1000
    assert frequency_correlation(table, 0, logf).r_squared < 0.1
    with pytest.raises(ValueError):
        frequency_correlation(table, 0, {"w0": 1.0, "w1": 2.0})
    with pytest.raises(DegenerateFitError):
        frequency_correlation(table, 0, {w: 1.0 for w in words[:10]})
    with pytest.raises(IndexError):
        frequency_correlation(table, 3, logf)


def test_frequency_planted_dimension():
    spec = SyntheticSpec("frequency", vocab_size=1000, noise_sigma=0.3, planted=(7, 0), seed=1)
    table, ds = gen_frequency_task(spec)
    logf = {e.tokens[0]: e.gold for e in ds}
    assert frequency_correlation(table, 7, logf).r_squared > 0.5


# -------------------------------------------------------------- rankings


def twin_model():
    """'x' and 'y' share a vector, so they tie whenever their contexts match."""
    vecs = np.array([[1.0, 0.0], [-1.0, 0.5], [0.3, 0.3], [0.3, 0.3]])
    table = EmbeddingTable.from_vectors(["good", "bad", "x", "y"], vecs)
    cfg = ModelConfig("lstm", 2, hidden_size=3, seed=5)
    m = TrainedModel(cfg, init_params(cfg, np.random.default_rng(5)), table)
    ds = Dataset(
        [Example("1", ("x", "good"), 1), Example("2", ("y", "good"), 1), Example("3", ("bad", "good"), 0)],
        ["0", "1"],
    )
    return m, ds


def test_ranking_ties_break_lexicographically():
    m, ds = twin_model()
    for sign in ("positive", "negative"):
        ranked = word_type_ranking(m, ds, top_k=None, sign=sign)
        names = [w.token for w in ranked]
        assert names.index("x") + 1 == names.index("y")
        vals = [w.importance for w in ranked]
        assert vals == sorted(vals, reverse=(sign == "positive"))
    with pytest.raises(ConfigError):
        word_type_ranking(m, ds, sign="both")


def test_ranking_support_and_absent_tokens():
    m, ds = twin_model()
    ranked = word_type_ranking(m, ds, top_k=None)
    assert {w.token for w in ranked} == {"x", "y", "good", "bad"}
    assert {w.token: w.support for w in ranked}["good"] == 3
    assert sum(w.support for w in ranked) <= sum(len(set(e.tokens)) for e in ds)
    assert len(word_type_ranking(m, ds, top_k=2)) == 2
    assert {w.token for w in word_type_importances(m, ds, min_support=2)} == {"good"}


def test_ranking_separates_signal_on_trained_model():
    from test_models import _toy_sentiment
    from erasure_lab.data import split
    from erasure_lab.models import train

    table, ds = _toy_sentiment()
    tr, dv, te = split(ds, (0.6, 0.2, 0.2), 0)
    m = train(ModelConfig("lstm", 6, hidden_size=8, learning_rate=0.05, max_epochs=15, patience=15), table, tr, dv)
    ranked = word_type_ranking(m, te, top_k=None)
    assert {w.token for w in ranked[:2]} == {"good", "bad"}
