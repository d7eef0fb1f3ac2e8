import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lm2 import numerics as nx
from lm2.numerics import (ConfigError, DimensionError, NonFiniteError, Tape, TapeError, Tensor,
                          backward, grad_check, precision)


def param(rng, *shape, name=None, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name=name,
                  dtype=np.float64)


def scalar_loss(t: Tensor, rng) -> Tensor:
    # fixed random projection so every output coordinate matters
    w = Tensor(rng.standard_normal(t.shape), dtype=t.dtype)
    return nx.tsum(nx.mul(t, w))


@pytest.fixture
def r():
    return np.random.default_rng(7)


def check(f, params, tol=1e-5):
    rep = grad_check(f, params, tol=tol)
    assert rep.passed, str(rep)
    return rep


class TestGradients:
    def test_arithmetic_with_broadcasting(self, r):
        a, b = param(r, 3, 4, name="a"), param(r, 4, name="b")
        c = param(r, 3, 1, name="c", scale=0.5)
        proj = np.random.default_rng(0)
        w = Tensor(proj.standard_normal((3, 4)), dtype=np.float64)
        den = Tensor(2.0 + np.abs(c.data), dtype=np.float64)

        def f():
            x = (a + b) * c - b / (den + c * c)
            return nx.tsum(x * w)
        check(f, [a, b, c])

    @pytest.mark.parametrize("shapes", [((4, 3), (3, 5)), ((2, 4, 3), (3, 5)),
                                        ((2, 4, 3), (2, 3, 5)), ((2, 1, 4, 3), (3, 3, 2))])
    def test_matmul(self, r, shapes):
        a, b = param(r, *shapes[0], name="a"), param(r, *shapes[1], name="b")
        out_shape = np.matmul(a.data, b.data).shape
        w = Tensor(np.random.default_rng(3).standard_normal(out_shape), dtype=np.float64)
        check(lambda: nx.tsum(nx.matmul(a, b) * w), [a, b])

    @pytest.mark.parametrize("kind", ["sigmoid", "tanh", "silu"])
    def test_pointwise(self, r, kind):
        x = param(r, 5, 3, name="x", scale=3.0)
        w = Tensor(r.standard_normal((5, 3)), dtype=np.float64)
        check(lambda: nx.tsum(nx.elementwise(x, kind) * w), [x])

    def test_softmax_with_mask_and_top_k(self, r):
        x = param(r, 3, 6, name="x")
        mask = np.tril(np.ones((3, 6), dtype=bool), k=2)
        w = Tensor(r.standard_normal((3, 6)), dtype=np.float64)
        check(lambda: nx.tsum(nx.softmax_rows(x, mask=mask) * w), [x])
        check(lambda: nx.tsum(nx.softmax_rows(x, top_k=3) * w), [x])

    def test_rms_norm(self, r):
        x, g = param(r, 2, 3, 8, name="x"), param(r, 8, name="gain")
        w = Tensor(r.standard_normal((2, 3, 8)), dtype=np.float64)
        check(lambda: nx.tsum(nx.rms_norm(x, g) * w), [x, g])

    def test_rope(self, r):
        x = param(r, 2, 5, 3, 8, name="x")
        w = Tensor(r.standard_normal(x.shape), dtype=np.float64)
        check(lambda: nx.tsum(nx.rope_apply(x, pos_offset=7) * w), [x])

    def test_cross_entropy_embedding_concat_getitem(self, r):
        emb = param(r, 10, 4, name="emb")
        head = param(r, 4, 10, name="head")
        ids = np.array([[1, 2, 2, 9], [0, 0, 3, 5]])
        targets = np.array([[2, 2, 9, 1], [0, 3, 5, 5]])
        weights = np.array([[1.0, 0.0, 2.0, 1.0], [1.0, 1.0, 0.0, 0.5]])

        def f():
            h = nx.embedding(emb, ids)
            h = nx.concat([h[:, :2], h[:, 2:]], axis=1)
            return nx.cross_entropy(nx.matmul(h, head), targets, weights)
        check(f, [emb, head])

    def test_reductions_and_reshape(self, r):
        x = param(r, 2, 3, 4, name="x")

        def f():
            y = nx.transpose(x, (2, 0, 1)).reshape(4, 6)
            return nx.tmean(y * y, axis=1).sum() + nx.tsum(x, axis=(0, 2), keepdims=True).mean()
        check(f, [x])

    def test_grad_check_catches_a_wrong_gradient(self, r):
        x = param(r, 4, name="x")

        def broken(t):
            return nx._result(t.data ** 2, (t,), lambda g: (g * t.data,), "square")
        rep = grad_check(lambda: nx.tsum(broken(x)), [x])
        assert not rep.passed
        assert rep.worst[0] == "x"

    def test_grad_check_rejects_single_precision(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True, dtype=np.float32)
        with pytest.raises(ConfigError):
            grad_check(lambda: nx.tsum(x), [x])


class TestTape:
    def test_backward_accumulates_into_leaves(self, r):
        x = param(r, 3)
        for _ in range(2):
            with Tape() as tape:
                loss = nx.tsum(x * x)
            backward(loss, tape)
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_tape_is_single_use(self, r):
        x = param(r, 3)
        with Tape() as tape:
            loss = nx.tsum(x)
        backward(loss, tape)
        with pytest.raises(TapeError):
            backward(loss, tape)

    def test_no_recording_outside_tape(self, r):
        x = param(r, 3)
        loss = nx.tsum(x)
        assert not loss.requires_grad
        with pytest.raises(TapeError):
            backward(loss)

    def test_non_scalar_loss_rejected(self, r):
        x = param(r, 3)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(DimensionError):
            backward(y, tape)

    def test_nan_is_reported_with_the_op_name(self):
        x = Tensor(np.array([1.0, 0.0]), requires_grad=True, dtype=np.float64)
        with pytest.raises(NonFiniteError) as info, np.errstate(divide="ignore"):
            with Tape():
                nx.div(Tensor(np.ones(2), dtype=np.float64), x)
        assert info.value.op == "div"

    def test_finite_checks_can_be_disabled(self):
        x = Tensor(np.array([1.0, 0.0]), dtype=np.float64)
        with np.errstate(divide="ignore"), nx.finite_checks(False):
            y = nx.div(Tensor(np.ones(2), dtype=np.float64), x)
        assert np.isinf(y.data[1])

    def test_precision_context(self):
        with precision(64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32
        with pytest.raises(ConfigError):
            nx.set_precision(16)


class TestSoftmax:
    def test_fully_masked_row_is_zero_and_reported(self):
        x = Tensor(np.zeros((3, 4)), dtype=np.float64)
        mask = np.ones((3, 4), dtype=bool)
        mask[1] = False
        p, diag = nx.softmax_rows(x, mask=mask, return_diagnostic=True)
        assert diag.any and diag.fully_masked_rows.tolist() == [[1]]
        np.testing.assert_array_equal(p.data[1], 0.0)
        np.testing.assert_allclose(p.data[[0, 2]].sum(-1), 1.0)

    def test_top_k_bounds(self):
        x = Tensor(np.zeros((2, 4)))
        with pytest.raises(ValueError):
            nx.softmax_rows(x, top_k=0)
        p = nx.softmax_rows(Tensor(np.array([[1.0, 3.0, 2.0, 0.0]])), top_k=2)
        assert (p.data[0, [0, 3]] == 0).all() and p.data[0, 1] > p.data[0, 2] > 0

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
                  elements=st.floats(-1e3, 1e3)))
    def test_rows_are_distributions(self, logits):
        p = nx.softmax_rows(Tensor(logits, dtype=np.float64)).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


class TestRope:
    def test_odd_head_dim_rejected(self):
        with pytest.raises(ConfigError):
            nx.rope_apply(Tensor(np.zeros((2, 1, 3))))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 200), st.integers(0, 2**31))
    def test_scores_depend_only_on_relative_position(self, i, j, shift, seed):
        g = np.random.default_rng(seed)
        q, k = g.standard_normal(8), g.standard_normal(8)

        def rot(v, pos):
            return nx.rope_apply(Tensor(v.reshape(1, 1, 8), dtype=np.float64), pos_offset=pos).data[0, 0]
        a = rot(q, i) @ rot(k, j)
        b = rot(q, i + shift) @ rot(k, j + shift)
        assert math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-9)

    def test_rotation_preserves_norm_and_offset_composes(self, r):
        x = r.standard_normal((6, 2, 8))
        full = nx.rope_apply(Tensor(x, dtype=np.float64)).data
        np.testing.assert_allclose(np.linalg.norm(full, axis=-1), np.linalg.norm(x, axis=-1))
        tail = nx.rope_apply(Tensor(x[4:], dtype=np.float64), pos_offset=4).data
        np.testing.assert_allclose(full[4:], tail, atol=1e-12)


def test_embedding_range_checked():
    w = Tensor(np.zeros((5, 2)))
    with pytest.raises(DimensionError):
        nx.embedding(w, [0, 5])


def test_cross_entropy_matches_direct_formula(r):
    logits = r.standard_normal((3, 7))
    t = np.array([0, 6, 3])
    loss = nx.cross_entropy(Tensor(logits, dtype=np.float64), t).item()
    ref = np.mean([np.log(np.exp(row).sum()) - row[k] for row, k in zip(logits, t)])
    assert math.isclose(loss, ref, rel_tol=1e-12)
