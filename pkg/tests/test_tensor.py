import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pagkd import archive
from pagkd import tensor as T
from pagkd.gradcheck import check
from pagkd.tensor import (SENTINEL_NEG_INF, AdamState, DegenerateRowError, DimensionError,
                          OptimizerError, Tape, TapeError, Tensor)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_hand_case():
    eye = np.eye(2)
    np.testing.assert_array_equal(T.matmul(eye, eye).data, eye)
    out = T.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_fd():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = rng.normal(size=(3, 2))
    assert check(lambda: T.sum(T.matmul(a, b) * w), [a, b]) < 1e-6


def test_masked_softmax_examples():
    np.testing.assert_allclose(T.masked_softmax(np.zeros((1, 3)), np.zeros((1, 3))).data, [[1 / 3] * 3])
    out = T.masked_softmax(np.array([[5.0, 1.0]]), np.array([[0.0, SENTINEL_NEG_INF]])).data
    assert out[0, 0] == 1.0 and out[0, 1] == 0.0


def test_masked_softmax_degenerate_row():
    with pytest.raises(DegenerateRowError):
        T.masked_softmax(np.zeros((2, 2)), np.array([[0.0, 0.0], [SENTINEL_NEG_INF] * 2]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_masked_softmax_rows_and_zeros(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 4)) * 10
    bias = np.where(rng.random((4, 4)) < 0.5, SENTINEL_NEG_INF, 0.0)
    bias[np.arange(4), rng.integers(0, 4, 4)] = 0.0
    y = T.masked_softmax(logits, bias).data
    assert np.abs(y.sum(axis=1) - 1).max() < 1e-12
    assert np.all(y[bias == SENTINEL_NEG_INF] == 0.0)
    a = Tensor(logits / 10, requires_grad=True)
    w = rng.normal(size=(4, 4))
    assert check(lambda: T.sum(T.masked_softmax(a, bias) * w), [a]) < 1e-5


def test_small_op_examples():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert T.global_avg_pool(np.full((1, 1, 4, 4), 7.0)).data[0, 0] == 7.0
    assert T.cross_entropy(np.zeros((1, 2)), [0]).data[0] == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(IndexError):
        T.cross_entropy(np.zeros((1, 2)), [2])


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 3, 3, 3)))


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 5))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(5):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(T.conv2d(x, w, b).data, ref, atol=1e-12)


def test_layer_norm_and_l2_norm_values():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    y = T.layer_norm(x).data
    assert abs(y.mean()) < 1e-12 and y.std() == pytest.approx(1.0, rel=1e-4)
    assert T.l2_norm(np.array([[3.0, 4.0]]), axis=1).data[0] == 5.0


def test_l2_norm_gradient_at_zero_is_zero():
    a = Tensor(np.zeros((1, 3)), requires_grad=True)
    with Tape() as tape:
        out = T.sum(T.l2_norm(a, axis=1))
    tape.backward(out)
    np.testing.assert_array_equal(a.grad, 0.0)


def test_backward_twice_is_an_error():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(a * a)
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, 2.0)
    with pytest.raises(TapeError):
        tape.backward(loss)
    tape.reset()
    with pytest.raises(TapeError):   # nothing recorded after reset
        tape.backward(Tensor(1.0))


def test_no_tape_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    out = T.sum(a * 2.0)
    assert not out.requires_grad


def test_gradients_accumulate_over_reuse():
    a = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(a * a + a)
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, [5.0])


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        with Tape():
            y = T.global_avg_pool(T.relu(T.conv2d(x, w)))
        return y.data
    assert run().tobytes() == run().tobytes()


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_grad_no_decay_leaves_params():
    p = T.parameter(np.array([1.0, -2.0]), "p")
    p.grad = np.zeros(2)
    T.adam_step([p], AdamState(weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert p.grad is None


def test_adam_first_step_is_minus_lr():
    p = T.parameter(np.array([0.5]), "p")
    p.grad = np.array([1.0])
    st_ = AdamState(weight_decay=0.0)
    T.adam_step([p], st_)
    assert p.data[0] - 0.5 == pytest.approx(-1e-4, rel=1e-6)
    assert st_.step == 1 and st_.m["p"].shape == (1,)


def test_adam_missing_grad_names_param():
    p = T.parameter(np.zeros(2), "student.fc.weight")
    with pytest.raises(OptimizerError, match="student.fc.weight"):
        T.adam_step([p], AdamState())


def test_adam_skips_frozen():
    p = T.parameter(np.ones(2), "teacher.w")
    p.requires_grad = False
    T.adam_step([p], AdamState())
    np.testing.assert_array_equal(p.data, 1.0)


def test_adam_descends_quadratic():
    x = T.parameter(np.array([1.0]), "x")
    st_ = AdamState(lr=0.1, weight_decay=0.0)
    trace = []
    for _ in range(100):
        with Tape() as tape:
            loss = T.sum(x * x)
        tape.backward(loss)
        T.adam_step([x], st_)
        trace.append(abs(x.data[0]))
    # monotone while far from the optimum; Adam then oscillates at lr scale
    warm = trace[:8]
    assert all(b < a for a, b in zip(warm, warm[1:]))
    assert trace[-1] < 0.2


# -- archive ------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                  elements=st.floats(allow_nan=False)),
                       max_size=4))
def test_archive_roundtrip_bit_exact(tensors):
    back = archive.loads(archive.dumps(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == np.shape(tensors[k])
        assert back[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()


def test_archive_header_layout():
    blob = archive.dumps({"w": np.array([[1.0, 2.0]])})
    assert blob[:4] == b"PGKD"
    assert blob[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert blob[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


@pytest.mark.parametrize("blob", [b"NOPE", archive.dumps({"a": np.ones(3)})[:-4],
                                  archive.dumps({"a": np.ones(3)}) + b"x"])
def test_archive_rejects_corrupt(blob):
    with pytest.raises(archive.ArchiveError):
        archive.loads(blob)


# -- invariants ---------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_softmax_rows_and_finiteness(x):
    y = T.softmax(x).data
    assert np.all(np.isfinite(y))
    assert np.abs(y.sum(axis=1) - 1).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 5)), elements=finite))
def test_grad_shapes_match(x):
    a = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.logsumexp(a, axis=1)) + T.mean(T.relu(a))
    tape.backward(loss)
    assert a.grad.shape == a.shape and np.all(np.isfinite(a.grad))
