import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualkbqa import autodiff as ad
from dualkbqa.autodiff import ShapeError, Tape, Tensor


def param(arr, name="w"):
    return Tensor(np.asarray(arr, dtype=float), name=name, requires_grad=True)


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def check_op(build, *arrays, tol=1e-6):
    """Reverse-mode vs central differences for a scalar-reduced op."""
    params = [param(a, name=f"x{i}") for i, a in enumerate(arrays)]
    weights = None

    def scalar():
        nonlocal weights
        out = build(*params)
        if weights is None:
            weights = np.random.default_rng(7).normal(size=out.shape)
        return ad.sum(out * Tensor(weights)) if out.shape else out

    with Tape() as tape:
        loss = scalar()
    grads = tape.backward(loss)
    for p in params:
        num = numeric_grad(lambda: scalar().item(), p.data)
        ana = grads[p.name]
        diff = np.abs(ana - num)
        # entries within finite-difference noise of each other count as exact
        err = np.where(diff > 1e-10, diff / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-300), 0.0)
        assert err.max() <= tol, (p.name, ana, num)


# ---------------------------------------------------------------- examples


def test_softmax_single_element():
    assert ad.softmax(Tensor([3.7])).data.tolist() == [1.0]


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, a.data)


def test_sum_gradient_is_ones():
    w = param([0.3, -1.0, 2.0])
    with Tape() as tape:
        loss = ad.sum(w)
    np.testing.assert_array_equal(tape.backward(loss)["w"], [1.0, 1.0, 1.0])


def test_square_gradient():
    w = param([1.0, 2.0])
    with Tape() as tape:
        loss = ad.sum(w * w)
    np.testing.assert_array_equal(tape.backward(loss)["w"], [2.0, 4.0])


def test_nonscalar_loss_rejected():
    w = param([1.0, 2.0])
    with Tape() as tape:
        out = w * 2.0
    with pytest.raises(ShapeError):
        tape.backward(out)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(3, 2\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError, match="mul"):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((2,))))


def test_allowed_broadcasts():
    m = Tensor(np.ones((2, 3)))
    assert (m + Tensor(np.arange(3.0))).shape == (2, 3)
    assert (m * Tensor(np.ones((2, 1)))).shape == (2, 3)


def test_untouched_store_parameters_get_zero_gradient():
    from dualkbqa.optim import ParameterStore

    store = ParameterStore()
    a = store.add("a", [1.0, 2.0])
    store.add("unused", np.ones((2, 2)))
    with Tape() as tape:
        loss = ad.sum(a * a)
    grads = tape.backward(loss, store)
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_no_tape_means_no_recording():
    w = param([1.0])
    out = w * 3.0
    assert out.node_id is None


def test_debug_mode_flags_nonfinite():
    ad.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            ad.log(Tensor([-1.0]))
    finally:
        ad.set_debug(False)


def test_masked_softmax_zeroes_masked_entries():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 9.0]]))
    mask = np.array([[True, False, True], [True, True, False]])
    out = ad.softmax(x, axis=1, mask=mask).data
    assert out[0, 1] == 0.0 and out[1, 2] == 0.0
    np.testing.assert_allclose(out.sum(axis=1), 1.0)
    np.testing.assert_allclose(out[1, :2], [0.5, 0.5])


def test_scatter_add_and_row_select():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(ad.row_select(x, [2, 0, 2]).data, [[4, 5], [0, 1], [4, 5]])
    np.testing.assert_array_equal(ad.row_select(x, 1).data, [2, 3])
    out = ad.scatter_add(x, [1, 1, 0], 3).data
    np.testing.assert_array_equal(out, [[4, 5], [2, 4], [0, 0]])


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))

    def run():
        pa, pb = param(a, "a"), param(b, "b")
        with Tape() as tape:
            loss = ad.sum(ad.softmax(ad.sigmoid(pa @ pb), axis=1) * ad.tanh(pa @ pb))
        return tape.backward(loss)

    g1, g2 = run(), run()
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_shared_leaf_gradients_accumulate():
    w = param([1.5, -2.0])
    with Tape() as tape:
        loss = ad.sum(w * w + w * 3.0)
    np.testing.assert_allclose(tape.backward(loss)["w"], 2 * w.data + 3.0)


def test_parameter_reused_across_tapes():
    w = param([2.0])
    for _ in range(2):
        with Tape() as tape:
            loss = ad.sum(w * w)
        assert tape.backward(loss)["w"].tolist() == [4.0]


# ---------------------------------------------------------------- per-op gradient checks

RNG = np.random.default_rng(11)


def rand(*shape):
    return RNG.normal(size=shape)


OPS = {
    "add": (lambda a, b: a + b, (rand(3, 4), rand(3, 4))),
    "add_bias": (lambda a, b: a + b, (rand(3, 4), rand(4))),
    "sub": (lambda a, b: a - b, (rand(2, 3), rand(2, 3))),
    "mul": (lambda a, b: a * b, (rand(2, 3), rand(2, 3))),
    "mul_rowscale": (lambda a, b: a * b, (rand(3, 4), rand(3, 1))),
    "mul_trailing": (lambda a, b: a * b, (rand(3, 4), rand(4))),
    "scale": (lambda a: a * 2.5, (rand(5),)),
    "add_scalar": (lambda a: a + 1.5, (rand(5),)),
    "rsub_scalar": (lambda a: 1.0 - a, (rand(5),)),
    "power": (lambda a: ad.power(a, 2.0), (rand(4),)),
    "power_frac": (lambda a: ad.power(a, 1.5), (np.abs(rand(4)) + 0.5,)),
    "sigmoid": (ad.sigmoid, (rand(3, 3),)),
    "tanh": (ad.tanh, (rand(3, 3),)),
    "relu": (ad.relu, (rand(4, 3) + 0.05,)),
    "exp": (ad.exp, (rand(6),)),
    "log": (ad.log, (np.abs(rand(6)) + 0.5,)),
    "matmul_mm": (lambda a, b: a @ b, (rand(3, 4), rand(4, 2))),
    "matmul_vm": (lambda a, b: a @ b, (rand(4), rand(4, 3))),
    "matmul_mv": (lambda a, b: a @ b, (rand(3, 4), rand(4))),
    "matmul_vv": (lambda a, b: a @ b, (rand(4), rand(4))),
    "transpose": (ad.transpose, (rand(2, 5),)),
    "reshape": (lambda a: ad.reshape(a, (6, 1)), (rand(6),)),
    "concat0": (lambda a, b: ad.concat([a, b], axis=0), (rand(2, 3), rand(1, 3))),
    "concat1": (lambda a, b: ad.concat([a, b], axis=1), (rand(2, 3), rand(2, 2))),
    "concat_vec": (lambda a, b: ad.concat([a, b]), (rand(3), rand(2))),
    "stack": (lambda a, b: ad.stack([a, b]), (rand(3), rand(3))),
    "sum_all": (ad.sum, (rand(3, 4),)),
    "sum_axis0": (lambda a: ad.sum(a, axis=0), (rand(3, 4),)),
    "sum_axis1": (lambda a: ad.sum(a, axis=1), (rand(3, 4),)),
    "mean": (lambda a: ad.mean(a, axis=1), (rand(3, 4),)),
    "softmax_vec": (ad.softmax, (rand(5),)),
    "softmax_rows": (lambda a: ad.softmax(a, axis=1), (rand(3, 4),)),
    "softmax_masked": (
        lambda a: ad.softmax(a, axis=1, mask=np.array([[1, 0, 1], [0, 1, 1]], dtype=bool)),
        (rand(2, 3),),
    ),
    "row_select": (lambda a: ad.row_select(a, [0, 2, 2, 1]), (rand(3, 2),)),
    "row_select_int": (lambda a: ad.row_select(a, 1), (rand(3, 2),)),
    "scatter_add": (lambda a: ad.scatter_add(a, [2, 0, 2, 1], 4), (rand(4, 3),)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    build, arrays = OPS[name]
    check_op(build, *[a.copy() for a in arrays])


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_random_composite_gradients(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a, w = rng.normal(size=(rows, cols)), rng.normal(size=(cols, cols))
    check_op(lambda x, y: ad.softmax(ad.tanh(x @ y), axis=1) * ad.sigmoid(x), a, w)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=16),
)
def test_softmax_rows_are_distributions(values):
    out = ad.softmax(Tensor(values)).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) <= 1e-9
