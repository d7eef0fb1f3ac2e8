import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lm2 import numerics as nx
from lm2.memory import (MemoryBank, MemoryParams, StaleReadError, gate, init_bank, memory_read,
                        memory_update, propose_update, write_weights)
from lm2.numerics import DimensionError, Tensor, grad_check, precision


def setup(d=8, N=6, T=5, seed=0, gate_bias=-4.0, batch=None):
    g = np.random.default_rng(seed)
    with precision(64):
        params = MemoryParams.init(g, d, gate_bias=gate_bias)
        bank = init_bank(N, d, batch=batch)
        shape = (T, d) if batch is None else (batch, T, d)
        E = Tensor(g.standard_normal(shape))
    return E, bank, params


def test_identity_cycled_init():
    bank = init_bank(5, 3)
    expected = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 0, 0], [0, 1, 0]])
    np.testing.assert_array_equal(bank.M.data, expected)
    assert init_bank(4, 3, batch=2).M.shape == (2, 4, 3)
    with pytest.raises(ValueError):
        init_bank(0, 3)


def test_read_shapes_and_gate_composition():
    E, bank, params = setup()
    read = memory_read(E, bank, params)
    assert read.A.shape == (5, 6) and read.E_mem.shape == (5, 8)
    np.testing.assert_allclose(read.A.data.sum(-1), 1.0)
    np.testing.assert_array_equal(read.E_gated.data, read.g_out.data * read.E_mem.data)
    np.testing.assert_allclose(read.E_mem.data, read.A.data @ read.V.data)


def test_closed_gate_bias_starts_near_zero():
    E, bank, params = setup()
    g = memory_read(E, bank, params).g_out.data
    # E_mem rows are small here, so the gate sits near sigmoid(-4)
    assert np.all(g < 0.1) and np.all(g > 0)


def test_top_k_restricts_support():
    E, bank, params = setup()
    A = memory_read(E, bank, params, top_k=2).A.data
    assert ((A > 0).sum(-1) == 2).all()


def test_width_mismatch():
    E, bank, params = setup()
    with pytest.raises(DimensionError):
        memory_read(Tensor(np.zeros((2, 5))), bank, params)


def test_unknown_gate_kind():
    E, bank, params = setup()
    with pytest.raises(ValueError):
        gate(E, "sideways", params)


def test_single_token_update_is_the_per_slot_rule():
    E, bank, params = setup(T=1, gate_bias=0.0)
    read = memory_read(E, bank, params)
    new = memory_update(bank, E, read, params)
    g_in = 1 / (1 + np.exp(-(E.data @ params.W_in.data)))
    g_f = 1 / (1 + np.exp(-(read.E_mem.data @ params.W_forget.data)))
    literal = g_in * np.tanh(read.E_mem.data) + g_f * bank.M.data  # (1,d) broadcast over slots
    np.testing.assert_allclose(new.M.data, literal, atol=1e-6)


def test_write_weights_normalise_per_slot():
    A = Tensor(np.array([[0.5, 0.5, 0.0], [0.25, 0.25, 0.5]]))
    W = write_weights(A).data
    assert W.shape == (3, 2)
    np.testing.assert_allclose(W[:2].sum(-1), 1.0, atol=1e-7)
    assert W[2, 0] == 0 and W[2, 1] == pytest.approx(1.0, abs=1e-7)
    np.testing.assert_allclose(write_weights(A, "mean").data, 0.5)
    with pytest.raises(ValueError):
        write_weights(A, "max")


def test_stale_read_rejected():
    E, bank, params = setup()
    read = memory_read(E, bank, params)
    newer = memory_update(bank, E, read, params)
    with pytest.raises(StaleReadError):
        memory_update(newer, E, read, params)
    # a detached copy is a different bank state as far as versions go
    with pytest.raises(StaleReadError):
        memory_update(bank.detached(), E, read, params)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 9),
       st.sampled_from(["attention", "mean"]), st.floats(-6, 6))
def test_update_invariants(seed, T, N, aggregation, bias):
    E, bank, params = setup(d=4, N=N, T=T, seed=seed, gate_bias=bias)
    g = np.random.default_rng(seed + 1)
    for _ in range(5):
        E = Tensor(g.standard_normal((T, 4)) * 3, dtype=np.float64)
        read = memory_read(E, bank, params)
        np.testing.assert_allclose(read.A.data.sum(-1), 1.0, atol=1e-5)
        upd = propose_update(E, read, params, aggregation)
        for kind, x in (("input", E), ("forget", read.E_mem), ("output", read.E_mem)):
            gv = gate(x, kind, params).data
            assert np.all((gv >= 0) & (gv <= 1))
        new = memory_update(bank, E, read, params, aggregation)
        assert np.abs(new.M.data).max() <= np.abs(bank.M.data).max() + 1 + 1e-12
        assert upd.candidate.shape == bank.M.shape
        bank = new


def test_batched_read_matches_per_sequence():
    E, bank, params = setup(batch=3)
    read = memory_read(E, bank, params)
    for b in range(3):
        single = memory_read(Tensor(E.data[b], dtype=np.float64),
                             MemoryBank(Tensor(bank.M.data[b], dtype=np.float64)), params)
        np.testing.assert_allclose(read.A.data[b], single.A.data, atol=1e-12)


def test_gradients_through_read_and_write():
    E, bank, params = setup(d=4, N=3, T=3, gate_bias=0.0)
    E.requires_grad = True
    E.name = "E"
    w = np.random.default_rng(5).standard_normal((3, 4))

    def f():
        read = memory_read(E, bank, params)
        new = memory_update(bank, E, read, params)
        read2 = memory_read(E, new, params)
        return nx.tsum(read2.E_gated * Tensor(w, dtype=np.float64)) + nx.tsum(new.M * new.M)
    rep = grad_check(f, [E, *params.tensors().values()])
    assert rep.passed, str(rep)
