import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradcheck import fd_gradients, max_rel_err
from piann import autodiff as ad
from piann import layers
from piann.layers import (
    AdditiveScorer,
    DenseLayer,
    GruCell,
    LinearScorer,
    ParamRegistry,
    attention_scores,
    init_params,
    xavier_limit,
)


def _registry_with(seed=1):
    reg = ParamRegistry()
    return reg, seed


# ---------------------------------------------------------------------------
# registry and initialization


def test_registry_preserves_insertion_order_and_rejects_duplicates():
    reg = ParamRegistry()
    reg.register("a.W", (2, 2), "weight")
    reg.register("b.W", (2, 2), "weight")
    assert reg.names() == ["a.W", "b.W"]
    with pytest.raises(ValueError):
        reg.register("a.W", (2, 2), "weight")


def test_registry_load_values_checks_names_and_shapes():
    reg = ParamRegistry()
    reg.register("a.W", (2, 3), "weight")
    with pytest.raises(KeyError):
        reg.load_values({})
    with pytest.raises(ValueError):
        reg.load_values({"a.W": np.zeros((3, 2))})
    reg.load_values({"a.W": np.ones((2, 3))})
    np.testing.assert_array_equal(reg.get("a.W").value, np.ones((2, 3)))


def test_init_fills_weights_within_xavier_window_and_zeroes_biases():
    reg = ParamRegistry()
    layer = DenseLayer(reg, "d", 30, 20)
    init_params(reg, seed=7)
    limit = xavier_limit(30, 20)
    assert np.all(np.abs(layer.W.value) <= limit)
    assert np.any(layer.W.value != 0.0)
    np.testing.assert_array_equal(layer.b.value, np.zeros(20))


def test_init_is_reproducible_and_seed_sensitive():
    values = []
    for seed in (3, 3, 4):
        reg = ParamRegistry()
        GruCell(reg, "g", 4, 8)
        init_params(reg, seed=seed)
        values.append(np.concatenate([t.value.ravel() for t in reg.tensors()]))
    np.testing.assert_array_equal(values[0], values[1])
    assert np.any(values[0] != values[2])


def test_init_sample_mean_is_near_zero():
    reg = ParamRegistry()
    layer = DenseLayer(reg, "d", 40, 25, bias=False)  # 1000 entries
    init_params(reg, seed=11)
    limit = xavier_limit(40, 25)
    sigma_mean = limit / np.sqrt(3.0 * 1000.0)
    assert abs(layer.W.value.mean()) < 3.0 * sigma_mean


def test_init_rejects_unknown_scheme():
    reg = ParamRegistry()
    with pytest.raises(ValueError):
        init_params(reg, scheme="he_normal", seed=0)


# ---------------------------------------------------------------------------
# dense layer


def test_dense_matches_manual_affine(rng):
    reg = ParamRegistry()
    layer = DenseLayer(reg, "d", 5, 3)
    init_params(reg, seed=2)
    x = rng.uniform(-1, 1, 5)
    out = layer(ad.constant(x))
    np.testing.assert_allclose(out.value, layer.W.value @ x + layer.b.value, atol=1e-14)


def test_dense_rows_agree_with_vector_path(rng):
    reg = ParamRegistry()
    layer = DenseLayer(reg, "d", 4, 6)
    init_params(reg, seed=3)
    xs = rng.uniform(-1, 1, (5, 4))
    batched = layer.rows(ad.constant(xs)).value
    for i, x in enumerate(xs):
        np.testing.assert_allclose(batched[i], layer(ad.constant(x)).value, atol=1e-13)


# ---------------------------------------------------------------------------
# GRU cell


def test_gru_zero_weights_halve_the_state():
    reg = ParamRegistry()
    cell = GruCell(reg, "g", 3, 4)  # all parameters stay zero
    h = np.array([0.4, -1.0, 2.0, 0.0])
    out = cell.step(ad.constant(np.ones(3)), ad.constant(h))
    np.testing.assert_allclose(out.value, 0.5 * h, atol=1e-15)


def test_gru_step_rows_agree_with_vector_path(rng):
    reg = ParamRegistry()
    cell = GruCell(reg, "g", 3, 5)
    init_params(reg, seed=5)
    xs = rng.uniform(-1, 1, (4, 3))
    hs = rng.uniform(-1, 1, (4, 5))
    batched = cell.prepare().step_rows(ad.constant(xs), ad.constant(hs)).value
    for i in range(4):
        single = cell.step(ad.constant(xs[i]), ad.constant(hs[i])).value
        np.testing.assert_allclose(batched[i], single, atol=1e-13)


@given(
    x=hnp.arrays(np.float64, (3,), elements=st.floats(-5, 5)),
    h=hnp.arrays(np.float64, (4,), elements=st.floats(-3, 3)),
    seed=st.integers(0, 50),
)
@settings(max_examples=50, deadline=None)
def test_gru_state_stays_in_hull(x, h, seed):
    """Each component of h' lies between h and the tanh candidate in [-1, 1]."""
    reg = ParamRegistry()
    cell = GruCell(reg, "g", 3, 4)
    init_params(reg, seed=seed)
    out = cell.step(ad.constant(x), ad.constant(h)).value
    bound = np.maximum(np.abs(h), 1.0)
    assert np.all(np.abs(out) <= bound + 1e-12)


def test_gru_gradients_match_finite_differences(rng):
    reg = ParamRegistry()
    cell = GruCell(reg, "g", 2, 3)
    init_params(reg, seed=9)
    x, h = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 3)
    probe = rng.uniform(-1, 1, 3)
    names = reg.names()
    arrays = [reg.get(n).value.copy() for n in names]

    def objective(values) -> float:
        reg.load_values(dict(zip(names, values)))
        out = cell.step(ad.constant(x), ad.constant(h))
        return float(out.value @ probe)

    with ad.Tape() as tape:
        out = cell.step(ad.constant(x), ad.constant(h))
        loss = ad.matmul(out, ad.constant(probe))
        grads = tape.gradient(loss, reg.tensors())
    fd = fd_gradients(objective, arrays)
    for got, want in zip(grads, fd):
        assert max_rel_err(got, want) < 1e-6


# ---------------------------------------------------------------------------
# attention scorers


@pytest.mark.parametrize("kind", ["additive", "linear"])
def test_scorer_list_path_matches_batched_path(kind, rng):
    reg = ParamRegistry()
    scorer = layers.make_scorer(reg, "att", kind, n_hidden=4, n_attn=3)
    init_params(reg, seed=13)
    n, b_rows = 6, 1
    d = rng.uniform(-1, 1, 4)
    ys = [rng.uniform(-1, 1, 4) for _ in range(n)]
    listed = attention_scores(scorer, ad.constant(d), [ad.constant(y) for y in ys]).value

    prep = scorer.prepare()
    ystack = ad.constant(np.stack(ys))  # [n x hid] == [n*B x hid] for B = 1
    keys = prep.keys(ystack)
    batched = prep.scores_rows(ad.constant(d.reshape(1, 4)), keys).value
    np.testing.assert_allclose(batched[0], listed, atol=1e-12)


@pytest.mark.parametrize("kind", ["additive", "linear"])
def test_scores_are_deterministic_and_permutation_equivariant(kind, rng):
    reg = ParamRegistry()
    scorer = layers.make_scorer(reg, "att", kind, n_hidden=3, n_attn=2)
    init_params(reg, seed=17)
    d = ad.constant(rng.uniform(-1, 1, 3))
    ys = [ad.constant(rng.uniform(-1, 1, 3)) for _ in range(5)]
    base = attention_scores(scorer, d, ys).value
    again = attention_scores(scorer, d, ys).value
    np.testing.assert_array_equal(base, again)
    perm = [3, 0, 4, 1, 2]
    shuffled = attention_scores(scorer, d, [ys[i] for i in perm]).value
    np.testing.assert_array_equal(shuffled, base[perm])


def test_additive_scorer_gradients_through_batched_path(rng):
    reg = ParamRegistry()
    scorer = AdditiveScorer(reg, "att", n_hidden=3, n_attn=4)
    init_params(reg, seed=19)
    n, b_rows = 4, 2
    d_rows = rng.uniform(-1, 1, (b_rows, 3))
    ys = rng.uniform(-1, 1, (n * b_rows, 3))
    probe = rng.uniform(-1, 1, (b_rows, n))
    names = reg.names()
    arrays = [reg.get(nm).value.copy() for nm in names]

    def objective(values) -> float:
        reg.load_values(dict(zip(names, values)))
        prep = scorer.prepare()
        scores = prep.scores_rows(ad.constant(d_rows), prep.keys(ad.constant(ys)))
        return float(np.sum(scores.value * probe))

    with ad.Tape() as tape:
        prep = scorer.prepare()
        scores = prep.scores_rows(ad.constant(d_rows), prep.keys(ad.constant(ys)))
        loss = ad.sum_all(ad.mul(scores, ad.constant(probe)))
        grads = tape.gradient(loss, reg.tensors())
    fd = fd_gradients(objective, arrays)
    for got, want in zip(grads, fd):
        assert max_rel_err(got, want) < 1e-6


def test_make_scorer_rejects_unknown_kind():
    reg = ParamRegistry()
    with pytest.raises(ValueError):
        layers.make_scorer(reg, "att", "cosine", 4, 4)
