"""Cross model: encoders, memory, teacher-forced loss, decoding."""

import json
import logging
import math

import numpy as np
import pytest

from oracles import gradcheck
from nsva import tensor as T
from nsva.model import Batch, CrossModel, EncodedMemory, ModelConfig, write_decodes
from nsva.tensor import Tensor
from nsva.vocab import BOS_ID, EOS_ID, Vocabulary

TINY = ModelConfig(model_dim=8, heads=2, ff_dim=16, feature_layers=1, cross_layers=1, decoder_layers=1,
                   max_frames=6, max_len=8)


def make_vocab():
    v = Vocabulary()
    v.add_words(["miss", "archer", "26'", "3pt", "jump", "shot", "nolan", "rebound"])
    v.add_augmented("action", ["3-pt-jump-shot-missed", "defensive-rebound"])
    v.add_augmented("player", ["Alex Archer", "Leo Nolan"])
    return v


@pytest.fixture(scope="module")
def vocab():
    return make_vocab()


@pytest.fixture(scope="module")
def tiny(vocab):
    return CrossModel(TINY, vocab, tasks=("caption", "action", "identity"), seed=3)


def random_batch(rng, B, n, m, d, pad=True):
    coarse = [rng.normal(size=(int(rng.integers(1, n + 1)) if pad else n, d)) for _ in range(B)]
    fine = [rng.normal(size=(int(rng.integers(1, m + 1)) if pad else m, 2 * d)) for _ in range(B)]
    return Batch.from_tracks(coarse, fine, d)


class TestParameterBudget:
    def test_tiny_model_under_10k(self, tiny):
        assert tiny.num_parameters() <= 10_000

    def test_presets(self):
        assert ModelConfig.desk().feature_layers == 2 and ModelConfig.desk().cross_layers == 1
        p = ModelConfig.full_scale()
        assert (p.feature_layers, p.cross_layers, p.decoder_layers) == (6, 3, 3)


class TestEncoders:
    def test_length_one(self, tiny):
        rng = np.random.default_rng(0)
        V_c, _ = tiny.encode_coarse(rng.normal(size=(1, 1, 8)))
        V_f, _ = tiny.encode_fine(rng.normal(size=(1, 1, 16)))
        assert V_c.shape == (1, 1, 8) and V_f.shape == (1, 1, 8)

    def test_padding_does_not_leak(self, tiny):
        rng = np.random.default_rng(1)
        b = random_batch(rng, 4, 5, 3, 8)
        with T.no_grad():
            m1 = tiny.encode(b).rows.data
            b2 = Batch(b.coarse.copy(), b.coarse_valid, b.fine.copy(), b.fine_valid)
            b2.coarse[~b.coarse_valid] = rng.normal(size=b2.coarse[~b.coarse_valid].shape) * 100
            b2.fine[~b.fine_valid] = rng.normal(size=b2.fine[~b.fine_valid].shape) * 100
            m2 = tiny.encode(b2).rows.data
        valid = np.concatenate([b.coarse_valid, b.fine_valid], axis=1)
        assert np.abs(m1[valid] - m2[valid]).max() < 1e-9

    def test_truncation_warns(self, tiny, caplog):
        with caplog.at_level(logging.WARNING):
            V, valid = tiny.encode_coarse(np.zeros((1, 9, 8)))
        assert V.shape[1] == TINY.max_frames and valid.shape[1] == TINY.max_frames
        assert "truncated" in caplog.text

    def test_gradients_through_both_encoders(self, tiny):
        rng = np.random.default_rng(2)
        F_c = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
        F_f = rng.normal(size=(2, 2, 16))
        w = rng.normal(size=(2, 5, 8))

        def loss():
            V_c = tiny.coarse_enc(F_c + tiny.coarse_pos[:3])
            V_f, vf = tiny.encode_fine(F_f)
            mem = tiny.cross_encode(V_c, V_f, np.ones((2, 3), bool), vf)
            return (mem.rows * w).sum()

        params = [F_c, tiny.fine_proj.weight] + tiny.coarse_enc.parameters()[:4]
        assert gradcheck(loss, params, max_entries=10, rng=rng) < 1e-4


class TestCrossEncode:
    def test_memory_length(self, tiny):
        rng = np.random.default_rng(3)
        for _ in range(10):
            n, m = int(rng.integers(0, 6)), int(rng.integers(0, 4))
            if n + m == 0:
                continue
            b = random_batch(rng, 2, max(n, 1), max(m, 1), 8, pad=False)
            b = Batch(b.coarse[:, :n], b.coarse_valid[:, :n], b.fine[:, :m], b.fine_valid[:, :m])
            mem = tiny.encode(b)
            assert mem.rows.shape == (2, n + m, 8)
            assert mem.valid.shape == (2, n + m)
            assert list(mem.segments) == [0] * n + [1] * m

    def test_no_coarse_rows(self, tiny):
        rng = np.random.default_rng(4)
        V_f = Tensor(rng.normal(size=(1, 3, 8)))
        empty = Tensor(np.zeros((1, 0, 8)))
        valid = np.ones((1, 3), bool)
        with T.no_grad():
            mem = tiny.cross_encode(empty, V_f, np.zeros((1, 0), bool), valid)
            direct = tiny.cross_enc(V_f, valid)
        np.testing.assert_array_equal(mem.rows.data, direct.data)
        assert mem.coarse_len == 0 and mem.fine_len == 3

    def test_dim_mismatch(self, tiny):
        with pytest.raises(ValueError):
            tiny.cross_encode(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 2, 4))),
                              np.ones((1, 2), bool), np.ones((1, 2), bool))


def memory_for(model, seed=5, B=2):
    rng = np.random.default_rng(seed)
    with T.no_grad():
        return model.encode(random_batch(rng, B, 4, 2, model.cfg.model_dim))


class TestDecodeTrain:
    def test_uniform_head_gives_t_log_v(self, vocab):
        model = CrossModel(TINY, vocab, tasks=("caption",), seed=0)
        head = model.head("caption")
        head.proj.weight.data[:] = 0.0
        head.proj.bias.data[:] = 0.0
        targets = model.encode_targets([["miss", "archer", "26'"], ["nolan", "rebound"]], "caption")
        loss = model.decode_train(memory_for(model), targets, "caption").item()
        # mean over the batch of (len(target) - 1) predicted tokens each
        expected = np.mean([(len(t) - 1) * math.log(head.size) for t in targets])
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_pad_positions_excluded(self, tiny):
        mem = memory_for(tiny)
        a = tiny.encode_targets([["miss"], ["nolan", "rebound", "rebound"]], "caption")
        b = tiny.encode_targets([["miss"], ["nolan", "rebound", "rebound"]], "caption")
        la = tiny.decode_train(mem.select(0), a[:1], "caption").item()
        lb = tiny.decode_train(mem, b, "caption").item()
        lc = tiny.decode_train(mem.select(1), b[1:], "caption").item()
        assert lb == pytest.approx((la + lc) / 2, rel=1e-10)

    def test_causal(self, tiny):
        mem = memory_for(tiny, B=1)
        a = np.array([[BOS_ID, 4, 5, 6, 7]])
        b = np.array([[BOS_ID, 4, 5, 9, 10]])
        with T.no_grad():
            la = tiny.logits(mem, a, "caption").data
            lb = tiny.logits(mem, b, "caption").data
        np.testing.assert_allclose(la[:, :3], lb[:, :3], atol=1e-12)
        assert np.abs(la[:, 3:] - lb[:, 3:]).max() > 1e-6

    def test_target_validation(self, tiny):
        mem = memory_for(tiny, B=1)
        with pytest.raises(ValueError):
            tiny.decode_train(mem, [[4, 5, EOS_ID]], "caption")
        with pytest.raises(ValueError):
            tiny.decode_train(mem, [[BOS_ID] + [4] * 12 + [EOS_ID]], "caption")

    def test_unknown_token_becomes_unk(self, vocab):
        model = CrossModel(TINY, make_vocab(), tasks=("caption",), seed=0)
        before = model.vocab.unk_count
        t = model.encode_targets([["miss", "zzz"]], "caption")
        assert model.vocab.unk_count == before + 1
        assert np.isfinite(model.decode_train(memory_for(model, B=1), t, "caption").item())

    def test_out_of_slice_token_rejected(self, tiny, vocab):
        mem = memory_for(tiny, B=1)
        bad = [[BOS_ID, vocab.id("miss"), EOS_ID]]
        with pytest.raises(ValueError):
            tiny.decode_train(mem, bad, "action")

    def test_unknown_task(self, tiny):
        with pytest.raises(KeyError):
            tiny.head("summary")

    def test_composed_gradcheck(self, vocab):
        model = CrossModel(TINY, vocab, tasks=("caption",), seed=1)
        assert model.num_parameters() <= 10_000
        rng = np.random.default_rng(6)
        batch = random_batch(rng, 2, 3, 2, 8)
        targets = model.encode_targets([["miss", "archer", "26'"], ["nolan", "rebound"]], "caption")

        def loss():
            return model.decode_train(model.encode(batch), targets, "caption")

        params = model.parameters()
        err = gradcheck(loss, params, max_entries=3, rng=rng)
        assert err < 1e-4


class TestDecoding:
    def test_eos_biased_head_gives_empty(self, vocab):
        model = CrossModel(TINY, vocab, tasks=("action",), seed=0)
        model.head("action").proj.bias.data[0] = 50.0
        batch = random_batch(np.random.default_rng(0), 1, 3, 2, 8)
        (res,) = model.run_task(batch, "action", width=5)
        assert res.tokens == []

    def test_outputs_in_task_space(self, tiny, vocab):
        batch = random_batch(np.random.default_rng(1), 2, 3, 2, 8)
        for task, allowed in [("action", vocab.augmented("action")), ("identity", vocab.augmented("player"))]:
            for res in tiny.run_task(batch, task, width=2):
                assert set(res.tokens) <= set(allowed)
                assert len(res.token_logprobs) >= len(res.tokens)

    def test_greedy_equals_beam_one(self, tiny):
        mem = memory_for(tiny)
        from nsva.beam import beam_search
        g = tiny.decode(mem, "caption", width=1)
        for i, h in enumerate(g):
            b = beam_search(tiny.step_fn(mem.select(i), "caption"), eos=0, width=1, max_len=TINY.max_len - 1)
            assert b.tokens == h.tokens

    def test_jsonl(self, tiny, tmp_path):
        batch = random_batch(np.random.default_rng(2), 2, 3, 2, 8)
        res = tiny.run_task(batch, "caption", width=2, clip_ids=["a", "b"])
        write_decodes(tmp_path / "d.jsonl", res)
        rows = [json.loads(l) for l in (tmp_path / "d.jsonl").read_text().splitlines()]
        assert [r["clip_id"] for r in rows] == ["a", "b"]
        assert set(rows[0]) == {"clip_id", "task", "tokens", "token_logprobs", "score"}


class TestStateDict:
    def test_round_trip(self, vocab):
        a = CrossModel(TINY, vocab, tasks=("caption",), seed=0)
        b = CrossModel(TINY, vocab, tasks=("caption",), seed=1)
        b.load_state_dict(a.state_dict())
        mem_a, mem_b = memory_for(a), memory_for(b)
        np.testing.assert_array_equal(mem_a.rows.data, mem_b.rows.data)
