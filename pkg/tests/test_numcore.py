import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdnas import numcore as nc
from cdnas.operators import ALL_OPERATORS, OperatorKind as K


def scalar(tape, *xs):
    return tape.input(np.array(xs, dtype=float))


def vector(tape, *rows):
    return tape.input(np.array(rows, dtype=float))


def test_inv_at_zero():
    t = nc.Tape()
    out = nc.apply_primitive(K.INV, [scalar(t, 0.0)])
    assert out.data[0] == pytest.approx(1e6, rel=1e-12)


def test_add_broadcasts_scalar_over_vector():
    t = nc.Tape()
    out = nc.apply_primitive(K.ADD, [scalar(t, 2.0), vector(t, [1, 2, 3])])
    np.testing.assert_array_equal(out.data, [[3, 4, 5]])
    assert out.is_vector and out.shape == (1, 3)


def test_signed_sqrt_of_negative():
    t = nc.Tape()
    out = nc.apply_primitive(K.SQRT, [scalar(t, -4.0)])
    assert out.data[0] == pytest.approx(-np.sqrt(4 + 1e-6), abs=1e-15)
    assert out.data[0] == pytest.approx(-2.00000025, abs=1e-9)


def test_mean_of_vector():
    t = nc.Tape()
    assert nc.apply_primitive(K.MEAN, [vector(t, [1, 2, 3])]).data[0] == 2.0


def test_ffn_shapes():
    t = nc.Tape()
    store = nc.ParamStore()
    store.add("w1", np.ones((3, 1)))
    store.add("wd", np.eye(3))
    store.add("wc", np.ones((6, 3)))
    x = vector(t, [1, 2, 3], [0, 0, 1])
    assert nc.apply_primitive(K.FFN, [x], {"W": t.param(store, "w1")}).shape == (2,)
    assert nc.apply_primitive(K.FFN_D, [x], {"W": t.param(store, "wd")}).shape == (2, 3)
    assert nc.apply_primitive(K.CONCAT, [x, x], {"W": t.param(store, "wc")}).shape == (2, 3)


@pytest.mark.parametrize("kind", [K.SUM, K.MEAN, K.FFN, K.FFN_D])
def test_vector_only_unary_rejects_scalar(kind):
    t = nc.Tape()
    store = nc.ParamStore()
    store.add("w", np.ones((3, 3)))
    with pytest.raises(nc.InfeasibleShapeError):
        nc.apply_primitive(kind, [scalar(t, 1.0)], {"W": t.param(store, "w")})


def test_concat_rejects_scalar():
    t = nc.Tape()
    with pytest.raises(nc.InfeasibleShapeError):
        nc.apply_primitive(K.CONCAT, [scalar(t, 1.0), vector(t, [1, 2])])


def test_arity_mismatch():
    t = nc.Tape()
    with pytest.raises(ValueError):
        nc.apply_primitive(K.ADD, [scalar(t, 1.0)])


def test_overflow_guard():
    t = nc.Tape()
    with pytest.raises(nc.NumericOverflowError):
        nc.apply_primitive(K.SQUARE, [scalar(t, 1e7)])
    with pytest.raises(nc.NumericOverflowError):
        nc.apply_primitive(K.INV, [scalar(t, -1e-6)])


def test_backward_square():
    t = nc.Tape()
    x = scalar(t, 3.0)
    grads = nc.backward(t, nc.apply_primitive(K.SQUARE, [x]))
    assert grads[x][0] == 6.0


def test_backward_bilinear():
    t = nc.Tape()
    a, b = vector(t, [1, 2]), vector(t, [3, 4])
    loss = nc.apply_primitive(K.SUM, [nc.apply_primitive(K.MUL, [a, b])])
    grads = nc.backward(t, loss)
    np.testing.assert_array_equal(grads[a], [[3, 4]])
    np.testing.assert_array_equal(grads[b], [[1, 2]])


def test_backward_sigmoid_at_zero():
    t = nc.Tape()
    x = scalar(t, 0.0)
    assert nc.backward(t, nc.apply_primitive(K.SIGMOID, [x]))[x][0] == 0.25


@pytest.mark.parametrize("kind", [K.ABS, K.SQRT])
def test_subgradient_zero_at_origin(kind):
    t = nc.Tape()
    x = scalar(t, 0.0)
    assert nc.backward(t, nc.apply_primitive(kind, [x]))[x][0] == 0.0


def test_gather_scatters_into_rows():
    t = nc.Tape()
    store = nc.ParamStore()
    store.add("E", np.arange(6.0).reshape(3, 2))
    table = t.param(store, "E")
    rows = nc.gather(table, np.array([2, 0, 2]))
    grads = nc.param_grads(t, nc.backward(t, nc.apply_primitive(K.SUM, [rows])))
    np.testing.assert_array_equal(grads["E"], [[1, 1], [0, 0], [2, 2]])


def test_backward_rejects_bad_seed():
    t = nc.Tape()
    x = scalar(t, 1.0, 2.0)
    with pytest.raises(ValueError):
        nc.backward(t, x, seed=np.ones(3))


def test_tape_is_topologically_ordered():
    t = nc.Tape()
    a, b = vector(t, [1, 2]), vector(t, [3, 4])
    nc.apply_primitive(K.TANH, [nc.apply_primitive(K.ADD, [a, b])])
    for entry in t.entries:
        assert all(inp.index < entry.value.index for inp in entry.inputs)


@pytest.mark.parametrize("kind", [K.ADD, K.MUL])
@pytest.mark.parametrize("shapes", [("s", "s"), ("s", "v"), ("v", "s"), ("v", "v")])
def test_broadcast_symmetry(kind, shapes, rng):
    t = nc.Tape()
    make = {"s": lambda: t.input(rng.normal(size=4)), "v": lambda: t.input(rng.normal(size=(4, 3)))}
    x, y = make[shapes[0]](), make[shapes[1]]()
    np.testing.assert_array_equal(nc.apply_primitive(kind, [x, y]).data, nc.apply_primitive(kind, [y, x]).data)


def test_replay_is_bit_identical(rng):
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(8, 4))

    def run():
        t = nc.Tape()
        store = nc.ParamStore()
        store.add("W", w)
        a = t.input(x)
        c = nc.apply_primitive(K.CONCAT, [a, nc.apply_primitive(K.TANH, [a])], {"W": t.param(store, "W")})
        return nc.apply_primitive(K.SOFTPLUS, [c]).data

    assert np.array_equal(run(), run())


# --- Adam ------------------------------------------------------------------------


def test_adam_first_step_is_lr_sign():
    store = nc.ParamStore()
    store.add("p", np.array([1.0, -2.0]))
    nc.adam_step(store, {"p": np.array([1.0, -3.0])}, lr=0.001)
    np.testing.assert_allclose(store["p"], [1.0 - 0.001, -2.0 + 0.001], atol=1e-10)


def test_adam_projects_monotonic():
    store = nc.ParamStore()
    store.add("p", np.array([0.0005]), monotonic=True)
    nc.adam_step(store, {"p": np.array([1.0])}, lr=0.001)
    assert store["p"][0] == 0.0
    store.add("q", np.array([-0.5]), monotonic=True)
    assert store["q"][0] == 0.0


def test_adam_zero_gradient_leaves_parameter():
    store = nc.ParamStore()
    store.add("p", np.array([0.7, -0.1]))
    nc.adam_step(store, {"p": np.zeros(2)}, lr=0.001)
    np.testing.assert_array_equal(store["p"], [0.7, -0.1])


def test_param_buffers_match_shapes():
    store = nc.ParamStore()
    store.add("a", np.zeros((3, 2)))
    p = store.params["a"]
    assert p.m.shape == p.v.shape == p.data.shape
    with pytest.raises(KeyError):
        store.add("a", np.zeros(1))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (6,), elements=st.floats(-5, 5)),
    arrays(np.float64, (6,), elements=st.floats(-5, 5)),
)
def test_projection_after_any_step(init, grad):
    store = nc.ParamStore()
    store.add("w", init, monotonic=True)
    for _ in range(3):
        nc.adam_step(store, {"w": grad}, lr=0.5)
        assert np.all(store["w"] >= 0)


def test_bce_with_logits_matches_definition(rng):
    z = rng.normal(size=20)
    y = rng.integers(0, 2, size=20).astype(float)
    t = nc.Tape()
    loss = nc.bce_with_logits(t.input(z), y)
    p = 1 / (1 + np.exp(-z))
    assert float(loss.data) == pytest.approx(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)), rel=1e-12)


def test_every_operator_has_a_primitive(rng):
    store = nc.ParamStore()
    store.add("W1", rng.normal(size=(3, 1)))
    store.add("WD", rng.normal(size=(3, 3)))
    store.add("WC", rng.normal(size=(6, 3)))
    names = {K.FFN: "W1", K.FFN_D: "WD", K.CONCAT: "WC"}
    for kind in ALL_OPERATORS:
        t = nc.Tape()
        xs = [t.input(rng.normal(size=(4, 3))) for _ in range(kind.arity)]
        params = {"W": t.param(store, names[kind])} if kind in names else None
        out = nc.apply_primitive(kind, xs, params)
        assert np.all(np.isfinite(out.data))
