import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdoc import tensor as T
from oracles import fd_check, matmul_triple_loop, max_rel_err, softmax_direct

N_GRAD_SEEDS = 20


def rnd(seed):
    return T.Rng(seed)


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    a = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_row_times_column():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_matmul_vs_triple_loop_oracle():
    rng = rnd(7)
    a, b = rng.normal((3, 4)), rng.normal((4, 2))
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    assert np.max(np.abs(got - matmul_triple_loop(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 2))))


def test_matmul_batched_broadcast():
    rng = rnd(3)
    a, b = rng.normal((5, 2, 3)), rng.normal((3, 4))
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    assert np.allclose(got, a @ b)


# ---------------------------------------------------------------------------
# softmax

def test_softmax_uniform_on_equal_scores():
    out = T.softmax_rows(T.Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_mask_zeroes_masked_entries_exactly():
    out = T.softmax_rows(T.Tensor([10.0, 10.0, 123.0]), mask=np.array([True, True, False]))
    assert out.data[2] == 0.0
    assert np.allclose(out.data[:2], [0.5, 0.5])


def test_softmax_matches_direct_formula():
    row = np.array([1.0, 2.0, 3.0])
    got = T.softmax_rows(T.Tensor(row)).data
    assert np.max(np.abs(got - softmax_direct(row))) < 1e-12


def test_softmax_fully_masked_row_is_error_not_nan():
    with pytest.raises(ValueError, match="masked"):
        T.softmax_rows(T.Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))


@settings(max_examples=50)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    out = T.softmax_rows(T.Tensor([row])).data
    assert abs(out.sum() - 1.0) < 1e-9
    assert (out > 0).all()


# ---------------------------------------------------------------------------
# backward mechanics

def test_backward_sum_of_squares():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape():
        loss = T.sum(T.mul(x, x))
        T.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_constant_graph_gives_zero_grads():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape():
        loss = T.sum(T.mul(x, T.Tensor([0.0, 0.0])))
        T.backward(loss)
    assert np.allclose(x.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape():
        y = T.mul(x, x)
        with pytest.raises(T.ShapeError):
            T.backward(y)


def test_backward_rejects_detached_loss():
    x = T.Tensor(3.0, requires_grad=True)
    with T.Tape():
        with pytest.raises(T.TapeError, match="detached"):
            T.backward(x)


def test_double_backward_without_reset_is_error():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(T.TapeError):
            T.backward(loss)
        tape.reset()
    with T.Tape():
        loss = T.sum(T.mul(x, x))
        T.backward(loss)  # fresh tape: fine


def test_grad_accumulates_across_tapes_until_zeroed():
    x = T.Tensor([1.0], requires_grad=True)
    for _ in range(2):
        with T.Tape():
            T.backward(T.sum(T.mul(x, x)))
    assert np.allclose(x.grad, [4.0])
    x.zero_grad()
    assert x.grad is None


def test_composite_graph_matches_finite_differences():
    rng = rnd(11)
    a, b = rng.normal((3, 3)), rng.normal((3, 3))

    def loss(ts):
        x, y = ts
        z = T.matmul(x, y)
        z = T.gelu(z)
        return T.mean(T.mul(z, z))

    fd_check(loss, [a, b], tol=1e-4)


# ---------------------------------------------------------------------------
# per-op gradient checks against central finite differences

def _proj_loss(rng, shape):
    r = rng.normal(shape)
    return lambda out: T.sum(T.mul(out, T.Tensor(r)))


@pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
def test_gradients_elementwise_and_structural(seed):
    rng = rnd(100 + seed)
    a = rng.normal((3, 4))
    b = rng.normal((3, 4))
    proj = _proj_loss(rng, (3, 4))
    r43, r26 = T.Tensor(rng.normal((4, 3))), T.Tensor(rng.normal((2, 6)))
    r38, r22 = T.Tensor(rng.normal((3, 8))), T.Tensor(rng.normal((2, 2)))
    r4, r3 = T.Tensor(rng.normal((4,))), T.Tensor(rng.normal((3,)))
    fd_check(lambda ts: proj(T.add(ts[0], ts[1])), [a, b])
    fd_check(lambda ts: proj(T.sub(ts[0], ts[1])), [a, b])
    fd_check(lambda ts: proj(T.mul(ts[0], ts[1])), [a, b])
    fd_check(lambda ts: proj(T.scale(ts[0], -1.7)), [a])
    fd_check(lambda ts: T.sum(T.mul(T.transpose(ts[0]), r43)), [a])
    fd_check(lambda ts: T.sum(T.mul(T.reshape(ts[0], (2, 6)), r26)), [a])
    fd_check(lambda ts: T.sum(T.mul(T.concat([ts[0], ts[1]], axis=1), r38)), [a, b])
    fd_check(lambda ts: T.sum(T.mul(T.slice(ts[0], np.s_[1:, :2]), r22)), [a])
    fd_check(lambda ts: T.sum(ts[0]), [a])
    fd_check(lambda ts: T.sum(T.mul(T.sum(ts[0], axis=0), r4)), [a])
    fd_check(lambda ts: T.mean(ts[0]), [a])
    fd_check(lambda ts: T.sum(T.mul(T.mean(ts[0], axis=1), r3)), [a])


@pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
def test_gradients_matmul_and_lookup(seed):
    rng = rnd(200 + seed)
    a, b = rng.normal((3, 4)), rng.normal((4, 2))
    proj = _proj_loss(rng, (3, 2))
    fd_check(lambda ts: proj(T.matmul(ts[0], ts[1])), [a, b])

    table = rng.normal((6, 3))
    ids = rng.integers(0, 6, size=5)
    projl = _proj_loss(rng, (5, 3))
    fd_check(lambda ts: projl(T.embedding_lookup(ts[0], ids)), [table])

    # batched matmul
    ab, bb = rng.normal((2, 3, 4)), rng.normal((2, 4, 2))
    projb = _proj_loss(rng, (2, 3, 2))
    fd_check(lambda ts: projb(T.matmul(ts[0], ts[1])), [ab, bb])


@pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
def test_gradients_nonlinearities(seed):
    rng = rnd(300 + seed)
    # keep points away from the relu/smooth-l1 kinks so FD stays valid
    a = rng.normal((4, 5))
    a = np.where(np.abs(a) < 0.05, a + 0.1, a)
    a = np.where(np.abs(np.abs(a) - 1.0) < 0.05, a * 1.2, a)
    proj = _proj_loss(rng, (4, 5))
    fd_check(lambda ts: proj(T.relu(ts[0])), [a])
    fd_check(lambda ts: proj(T.gelu(ts[0])), [a])
    fd_check(lambda ts: proj(T.sigmoid(ts[0])), [a])
    fd_check(lambda ts: proj(T.smooth_l1(ts[0])), [a])
    mask = rng.uniform((4, 5)) > 0.3
    mask[:, 0] = True
    fd_check(lambda ts: proj(T.softmax_rows(ts[0], mask=mask)), [a])
    fd_check(lambda ts: proj(T.softmax_rows(ts[0])), [a])


@pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
def test_gradients_layer_norm(seed):
    rng = rnd(400 + seed)
    x, g, b = rng.normal((3, 6)), 1.0 + 0.1 * rng.normal((6,)), rng.normal((6,))
    proj = _proj_loss(rng, (3, 6))
    fd_check(lambda ts: proj(T.layer_norm(ts[0], ts[1], ts[2])), [x, g, b], tol=1e-4)


@pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
def test_gradients_conv_ops(seed):
    rng = rnd(500 + seed)
    x = rng.normal((2, 6, 6))
    w = rng.normal((3, 2, 3, 3)) * 0.5
    b = rng.normal((3,))
    proj = _proj_loss(rng, (3, 3, 3))
    fd_check(lambda ts: proj(T.conv2d(ts[0], ts[1], ts[2], stride=2, padding=1)), [x, w, b])

    xt = rng.normal((2, 3, 3))
    wt = rng.normal((2, 3, 4, 4)) * 0.5
    bt = rng.normal((3,))
    projt = _proj_loss(rng, (3, 6, 6))
    fd_check(
        lambda ts: projt(T.transposed_conv2d(ts[0], ts[1], ts[2], stride=2, padding=1)),
        [xt, wt, bt],
    )


@pytest.mark.parametrize("seed", range(N_GRAD_SEEDS))
def test_gradients_losses(seed):
    rng = rnd(600 + seed)
    logits = rng.normal((4, 7))
    targets = rng.integers(0, 7, size=4)
    w = rng.normal((4,))
    fd_check(
        lambda ts: T.sum(T.mul(T.cross_entropy_from_logits(ts[0], targets), T.Tensor(w))),
        [logits],
    )
    z = rng.normal((5,))
    y = (rng.uniform((5,)) > 0.5).astype(float)
    fd_check(lambda ts: T.sum(T.binary_cross_entropy_from_logit(ts[0], y)), [z])


def test_gradient_of_dropout_uses_same_mask():
    rng = rnd(9)
    a = rng.normal((4, 4))
    x = T.Tensor(a, requires_grad=True)
    with T.Tape():
        out = T.dropout(x, 0.5, T.Rng(42))
        T.backward(T.sum(out))
    kept = out.data != 0
    assert np.allclose(x.grad[kept], 2.0)
    assert np.allclose(x.grad[~kept], 0.0)


def test_dropout_rate_zero_is_identity_and_consumes_no_randomness():
    rng = T.Rng(5)
    x = T.Tensor([1.0, -2.0])
    out = T.dropout(x, 0.0, rng)
    assert out is x
    assert rng.random() == T.Rng(5).random()


# ---------------------------------------------------------------------------
# loss value oracles

def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = T.Tensor(np.zeros((1, 100)))
    loss = T.cross_entropy_from_logits(logits, [17])
    assert abs(loss.data[0] - np.log(100)) < 1e-12


def test_cross_entropy_matches_direct_formula():
    rng = rnd(21)
    z = rng.normal((6, 9))
    tgt = rng.integers(0, 9, size=6)
    got = T.cross_entropy_from_logits(T.Tensor(z), tgt).data
    want = np.array([-np.log(softmax_direct(z[i])[tgt[i]]) for i in range(6)])
    assert max_rel_err(got, want) < 1e-12


def test_bce_logit_zero_is_ln2():
    for label in (0.0, 1.0):
        loss = T.binary_cross_entropy_from_logit(T.Tensor(0.0), label)
        assert abs(loss.data - np.log(2)) < 1e-12
    big = T.binary_cross_entropy_from_logit(T.Tensor(20.0), 1.0)
    assert big.data < 1e-8


def test_smooth_l1_values():
    out = T.smooth_l1(T.Tensor([0.5, -0.5, 2.0, -3.0]))
    assert np.allclose(out.data, [0.125, 0.125, 1.5, 2.5])


# ---------------------------------------------------------------------------
# flops, determinism, dump format

def test_flop_count_deterministic():
    def run():
        rng = rnd(2)
        with T.Tape() as tape:
            a = T.Tensor(rng.normal((8, 8)), requires_grad=True)
            out = T.matmul(a, T.Tensor(rng.normal((8, 8))))
            T.backward(T.sum(out))
        return tape.flop_count

    assert run() == run()
    assert run() >= 2 * 8 * 8 * 8


def test_matmul_flops_quadruple_when_both_token_extents_double():
    def attention_like_flops(n):
        rng = rnd(4)
        q = T.Tensor(rng.normal((n, 8)))
        k = T.Tensor(rng.normal((n, 8)))
        with T.Tape() as tape:
            T.matmul(q, T.transpose(k))
        return tape.flop_count

    ratio = attention_like_flops(64) / attention_like_flops(32)
    assert 3.6 <= ratio <= 4.4


def test_seeded_determinism_bit_identical():
    def run():
        rng = rnd(77)
        x = T.Tensor(rng.normal((5, 5)), requires_grad=True)
        with T.Tape():
            out = T.gelu(T.matmul(x, T.Tensor(rng.normal((5, 5)))))
            loss = T.mean(T.mul(out, out))
            T.backward(loss)
        return loss.data.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


def test_rng_same_seed_same_stream():
    a = T.Rng(123).normal((10,))
    b = T.Rng(123).normal((10,))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, T.Rng(124).normal((10,)))


def test_rng_state_roundtrip_resumes_stream():
    rng = T.Rng(9)
    rng.normal((3,))
    state = rng.state_dict()
    ahead = rng.normal((4,))
    rng2 = T.Rng(0)
    rng2.load_state_dict(state)
    assert np.array_equal(rng2.normal((4,)), ahead)


def test_dump_roundtrip():
    rng = rnd(6)
    for shape in [(), (3,), (2, 3, 4)]:
        arr = rng.normal(shape)
        buf = io.BytesIO()
        T.dump_array(buf, arr)
        assert buf.tell() == T.dumped_nbytes(arr)
        buf.seek(0)
        back = T.load_array(buf)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_dump_layout_is_little_endian_with_rank_header():
    buf = io.BytesIO()
    T.dump_array(buf, np.array([[1.0, 2.0]]))
    raw = buf.getvalue()
    assert raw[:8] == (2).to_bytes(8, "little")
    assert raw[8:16] == (1).to_bytes(8, "little")
    assert raw[16:24] == (2).to_bytes(8, "little")
    assert np.frombuffer(raw[24:], dtype="<f8").tolist() == [1.0, 2.0]


def test_embedding_lookup_out_of_range_errors():
    with pytest.raises(T.ShapeError, match="range"):
        T.embedding_lookup(T.Tensor(np.zeros((4, 2))), [5])


def test_no_nan_or_inf_in_everyday_ops():
    rng = rnd(31)
    x = T.Tensor(rng.normal((6, 6)) * 30)
    for out in [
        T.softmax_rows(x),
        T.gelu(x),
        T.sigmoid(x),
        T.binary_cross_entropy_from_logit(x, 1.0),
        T.cross_entropy_from_logits(x, rng.integers(0, 6, size=6)),
    ]:
        assert np.isfinite(out.data).all()
