import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from lm2.inspection import (export_heatmap, heatmap_l1, memory_delta, rank_slots, read_heatmap)
from lm2.memory import MemoryBank, init_bank
from lm2.model import LM2, generate
from lm2.numerics import ConfigError, DimensionError, Tensor
from lm2.tasks import Vocab, gen_recall

VOCAB = Vocab.default()


def model_for_vocab(**kw):
    base = dict(vocab_size=len(VOCAB), gate_bias_init=0.0, segment_len=6)
    base.update(kw)
    return LM2(tiny_config(**base))


def probes(n=6, seed=0):
    g = np.random.default_rng(seed)
    return [gen_recall(g, 2, 3) for _ in range(n)]


PROMPT = "k1 v2 k3 v4 f5 f6 f7 ? k1"


class TestHeatmap:
    def test_rows_are_distributions(self):
        model = model_for_vocab()
        hm = export_heatmap(model, model.new_state(), PROMPT, block=0)
        assert hm.A.shape == (9, 8) and hm.row_labels == PROMPT.split()
        np.testing.assert_allclose(hm.A.sum(axis=1), 1.0, atol=1e-6)
        assert (hm.A >= 0).all()

    def test_single_slot_is_all_ones(self):
        model = model_for_vocab(N=1)
        hm = export_heatmap(model, model.new_state(), PROMPT, block=1)
        np.testing.assert_allclose(hm.A, 1.0, atol=1e-7)

    def test_export_is_observation_only(self):
        model = model_for_vocab()
        ids = np.array([VOCAB.id(t) for t in PROMPT.split()])
        plain = model.new_state()
        ref = generate(model, plain, ids, 4)
        watched = model.new_state()
        export_heatmap(model, watched, PROMPT, block=0)
        assert watched.cursor == 0
        out = generate(model, watched, ids, 4)
        assert list(out) == list(ref)
        for a, b in zip(plain.banks, watched.banks):
            assert a.M.data.tobytes() == b.M.data.tobytes()

    def test_decode_changes_the_map(self):
        model = model_for_vocab()
        state = model.new_state()
        before = export_heatmap(model, state, PROMPT, block=0)
        generate(model, state, [VOCAB.id(t) for t in PROMPT.split()], 8)
        after = export_heatmap(model, state, PROMPT, block=0)
        assert heatmap_l1(before, after) > 0.0

    def test_file_roundtrip(self, tmp_path):
        model = model_for_vocab()
        path = tmp_path / "hm.tsv"
        hm = export_heatmap(model, model.new_state(), PROMPT, block=0, path=path)
        cols, rows, A = read_heatmap(path)
        assert cols == list(range(8)) and rows == PROMPT.split()
        np.testing.assert_allclose(A, hm.A, rtol=1e-8)

    def test_batched_state_uses_first_row(self):
        model = model_for_vocab()
        one = export_heatmap(model, model.new_state(1), PROMPT, block=0)
        three = export_heatmap(model, model.new_state(3), PROMPT, block=0)
        np.testing.assert_array_equal(one.A, three.A)

    def test_block_without_memory(self):
        model = model_for_vocab(k_memory_blocks=1)
        with pytest.raises(ConfigError, match="block"):
            export_heatmap(model, model.new_state(), PROMPT, block=1)
        off = model_for_vocab(memory_enabled=False)
        with pytest.raises(ConfigError):
            export_heatmap(off, off.new_state(), PROMPT, block=0)

    def test_shape_mismatch(self):
        model = model_for_vocab()
        a = export_heatmap(model, model.new_state(), PROMPT, block=0)
        b = export_heatmap(model, model.new_state(), "k1 v2", block=0)
        with pytest.raises(DimensionError):
            heatmap_l1(a, b)


class TestSlotRanking:
    def test_zero_projections_tie_in_index_order(self):
        model = model_for_vocab()
        for name in ("W_Q", "W_K", "W_V"):
            getattr(model.blocks[0].memory, name).data[:] = 0.0
        r = rank_slots(model, probes(), top_m=3, block=0)
        assert [s.slot for s in r.top] == [0, 1, 2]
        assert [s.slot for s in r.bottom] == [0, 1, 2]
        assert np.all(r.scores == 0.0)

    def test_scores_are_mean_attention_times_value_norm(self):
        model = model_for_vocab()
        ps = probes(3)
        r = rank_slots(model, ps, top_m=2, block=0)
        from lm2.inspection import _run_capture
        total, count = np.zeros(8), 0
        for s in ps:
            ids = np.array([VOCAB.id(t) for t in s.tokens()])
            for seg, read in _run_capture(model, model.new_state(), ids, 0):
                total += (read.A.data[0] * np.linalg.norm(read.V.data[0], axis=-1)).sum(0)
                count += len(seg)
        np.testing.assert_allclose(r.scores, total / count, rtol=1e-6)
        assert r.top[0].relevance == pytest.approx(r.scores.max())
        assert r.bottom[0].relevance == pytest.approx(r.scores.min())
        assert all(0.0 <= s.sign_profile <= 1.0 for s in r.top + r.bottom)

    def test_probe_order_invariance(self):
        model = model_for_vocab()
        ps = probes(5)
        a = rank_slots(model, ps, top_m=4)
        b = rank_slots(model, ps[::-1], top_m=4)
        assert a.scores.tobytes() == b.scores.tobytes()
        assert [s.slot for s in a.top] == [s.slot for s in b.top]

    @settings(max_examples=5, deadline=None)
    @given(st.permutations(list(range(8))))
    def test_permuting_slots_permutes_ranking(self, perm):
        model = model_for_vocab()
        ps = probes(2)
        state = model.new_state()
        M = np.random.default_rng(9).standard_normal((1, 8, 16))
        state.banks[0] = MemoryBank(Tensor(M))
        base = rank_slots(model, ps, top_m=8, state=state)
        pstate = model.new_state()
        pstate.banks[0] = MemoryBank(Tensor(M[:, perm]))
        moved = rank_slots(model, ps, top_m=8, state=pstate)
        np.testing.assert_allclose(moved.scores, base.scores[perm], rtol=1e-5, atol=1e-9)

    def test_argument_checks(self, tmp_path):
        model = model_for_vocab()
        with pytest.raises(ValueError):
            rank_slots(model, [], top_m=1)
        with pytest.raises(ValueError):
            rank_slots(model, probes(1), top_m=9)
        with pytest.raises(ConfigError):
            rank_slots(LM2(tiny_config(vocab_size=len(VOCAB)), with_memory=False), probes(1), 1)
        r = rank_slots(model, probes(1), top_m=2)
        r.write(tmp_path / "s.jsonl")
        assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 4


class TestMemoryDelta:
    def test_identical_states(self):
        model = model_for_vocab()
        s = model.new_state()
        d = memory_delta(s, s.clone())
        assert d.total == 0.0 and d.top_changed == [] and not d.per_slot_l1.any()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_symmetry(self, seed):
        g = np.random.default_rng(seed)
        a, b = g.standard_normal((4, 3)), g.standard_normal((4, 3))
        ab, ba = memory_delta(a, b), memory_delta(b, a)
        np.testing.assert_array_equal(ab.per_slot_l1, ba.per_slot_l1)
        assert ab.top_changed == ba.top_changed

    def test_only_touched_slots_change(self):
        bank = init_bank(6, 4)
        M = bank.M.data.copy()
        M[2] += 0.5
        M[4, 1] -= 2.0
        d = memory_delta(bank, MemoryBank(Tensor(M)), top=5)
        assert d.top_changed == [2, 4]
        np.testing.assert_allclose(d.per_slot_l1[0], [0, 0, 2.0, 0, 2.0, 0])

    def test_decode_changes_memory(self):
        model = model_for_vocab()
        state = model.new_state()
        before = state.clone()
        generate(model, state, [VOCAB.id(t) for t in PROMPT.split()], 8)
        d = memory_delta(before, state)
        assert d.total > 0 and d.per_slot_l1.shape == (1, 8)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            memory_delta(np.zeros((4, 3)), np.zeros((5, 3)))
