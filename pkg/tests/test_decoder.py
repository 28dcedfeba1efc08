import numpy as np
import pytest

from cityqa.decoder import (
    AnswerDecoder,
    DecoderConfig,
    DecoderInput,
    Vocab,
    answer_ids,
    project_vision,
    tokenize,
)
from cityqa.numerics import Mlp, ShapeError, finite_diff_grad, max_rel_error


@pytest.fixture
def vocab():
    return Vocab.build(["how many buildings are there",
                        "the blue one", "near a tall tree", "a b"])


def small_decoder(vocab, seed=0, **overrides):
    cfg = DecoderConfig(model_dim=6, vision_token_count=2, max_question_len=8,
                        max_answer_len=4, ff_dim=5, **overrides)
    return AnswerDecoder(cfg, vocab, np.random.default_rng(seed))


def some_input(dec, vocab, question="how many buildings", seed=1):
    rng = np.random.default_rng(seed)
    h_v = rng.normal(size=(dec.cfg.vision_token_count, dec.cfg.model_dim))
    return DecoderInput(h_v=h_v, question_ids=tokenize(question, vocab))


class TestVocab:
    def test_reserved_and_dense_ids(self, vocab):
        assert vocab.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
        assert [vocab.id(t) for t in vocab.tokens] == list(range(len(vocab)))

    def test_lookup_bijection(self, vocab):
        for i, t in enumerate(vocab.tokens):
            assert vocab.token(vocab.id(t)) == t and vocab.id(vocab.token(i)) == i

    def test_digits_always_present(self, vocab):
        for i in range(21):
            assert str(i) in vocab

    def test_duplicate_tokens_rejected(self):
        with pytest.raises(ValueError):
            Vocab(["<pad>", "<bos>", "<eos>", "<unk>", "x", "x"])


class TestTokenize:
    def test_punctuation_and_case(self, vocab):
        ids = tokenize("How many buildings?", vocab)
        assert ids == [vocab.id("how"), vocab.id("many"), vocab.id("buildings")]
        assert vocab.unk_id not in ids

    def test_empty(self, vocab):
        assert tokenize("", vocab) == []

    def test_unknown_word_maps_to_unk(self, vocab):
        assert tokenize("zeppelin", vocab) == [vocab.unk_id]


class TestProjectVision:
    def test_single_token_degenerate_reshape(self, vocab):
        proj = Mlp([3, 4], ["identity"], np.random.default_rng(0))
        cfg = DecoderConfig(model_dim=4, vision_token_count=1)
        z = np.array([0.1, 0.2, 0.3])
        h_v = project_vision(z, proj, cfg)
        expected, _ = proj.forward(z)
        assert np.array_equal(h_v, expected.reshape(1, 4))

    def test_reshape_rule(self, vocab):
        proj = Mlp([2, 6], ["identity"], np.random.default_rng(1))
        cfg = DecoderConfig(model_dim=4, vision_token_count=2)
        # 6 != 2*4 -> error; with model_dim=3 it splits [0:3], [3:6]
        with pytest.raises(ShapeError):
            project_vision(np.zeros(2), proj, cfg)
        cfg = DecoderConfig(model_dim=4, vision_token_count=2)
        proj_ok = Mlp([2, 8], ["identity"], np.random.default_rng(1))
        flat, _ = proj_ok.forward(np.array([1.0, -1.0]))
        h_v = project_vision(np.array([1.0, -1.0]), proj_ok, cfg)
        assert np.array_equal(h_v[0], flat.ravel()[:4])
        assert np.array_equal(h_v[1], flat.ravel()[4:])


class TestStepLogprobs:
    def test_normalization(self, vocab):
        dec = small_decoder(vocab)
        inp = some_input(dec, vocab)
        for prefix in ([], [vocab.id("blue")], [vocab.id("a"), vocab.id("b")]):
            lp = dec.step_logprobs(inp, prefix)
            assert abs(np.logaddexp.reduce(lp)) < 1e-9

    def test_overlong_prefix(self, vocab):
        dec = small_decoder(vocab)
        inp = some_input(dec, vocab)
        with pytest.raises(ShapeError):
            dec.step_logprobs(inp, [vocab.id("a")] * dec.cfg.max_answer_len)

    def test_question_conditioning_matters(self, vocab):
        dec = small_decoder(vocab)
        a = some_input(dec, vocab, question="how many buildings")
        b = some_input(dec, vocab, question="near a tall tree")
        assert not np.allclose(dec.step_logprobs(a, []), dec.step_logprobs(b, []))

    def test_causality_prefix_positions_unaffected(self, vocab):
        dec = small_decoder(vocab)
        inp = some_input(dec, vocab)
        gold_a = [vocab.id("a"), vocab.id("b"), vocab.eos_id]
        gold_b = [vocab.id("a"), vocab.id("blue"), vocab.eos_id]  # differs at k=1
        _, tape_a = dec.ce_loss(inp, gold_a)
        _, tape_b = dec.ce_loss(inp, gold_b)
        base = dec.cfg.vision_token_count + len(inp.question_ids)
        # predictions at positions <= k see identical histories
        assert np.array_equal(tape_a.logits[base + 0], tape_b.logits[base + 0])
        assert np.array_equal(tape_a.logits[base + 1], tape_b.logits[base + 1])
        # the position after the change sees different histories
        assert not np.allclose(tape_a.logits[base + 2], tape_b.logits[base + 2])


class TestCeLoss:
    def test_uniform_model_gives_log_vocab(self, vocab):
        dec = small_decoder(vocab)
        dec.out_w.value[:] = 0.0
        dec.out_b.value[:] = 0.0
        inp = some_input(dec, vocab)
        gold = answer_ids("blue one", vocab)
        loss, _ = dec.ce_loss(inp, gold)
        assert loss == pytest.approx(np.log(len(vocab)), abs=1e-12)

    def test_perfect_model_limit(self, vocab):
        dec = small_decoder(vocab)
        dec.out_w.value[:] = 0.0
        dec.out_b.value[:] = 0.0
        dec.out_b.value[0, vocab.eos_id] = 60.0
        loss, _ = dec.ce_loss(some_input(dec, vocab), [vocab.eos_id])
        assert loss < 1e-10

    def test_empty_gold(self, vocab):
        dec = small_decoder(vocab)
        with pytest.raises(ValueError):
            dec.ce_loss(some_input(dec, vocab), [])

    def test_gold_must_end_with_eos(self, vocab):
        dec = small_decoder(vocab)
        with pytest.raises(ValueError):
            dec.ce_loss(some_input(dec, vocab), [vocab.id("a")])

    def test_gold_longer_than_max(self, vocab):
        dec = small_decoder(vocab)
        gold = [vocab.id("a")] * dec.cfg.max_answer_len + [vocab.eos_id]
        with pytest.raises(ShapeError):
            dec.ce_loss(some_input(dec, vocab), gold)

    def test_grads_match_finite_differences(self, vocab):
        dec = small_decoder(vocab, seed=3)
        inp = some_input(dec, vocab, seed=4)
        gold = answer_ids("the blue one", vocab)

        def f():
            return dec.ce_loss(inp, gold)[0]

        _, tape = dec.ce_loss(inp, gold)
        dec.ce_backward(tape)
        params = dec.parameters()
        analytic = [p.grad.copy() for p in params]
        for p in params:
            p.zero_grad()
        numeric = finite_diff_grad(f, params)
        worst = max(max_rel_error(a, n, floor=1e-3)
                    for a, n in zip(analytic, numeric))
        assert worst < 1e-6

    def test_h_v_grad_matches_finite_differences(self, vocab):
        from cityqa.numerics import Parameter

        dec = small_decoder(vocab, seed=5)
        rng = np.random.default_rng(6)
        hv = Parameter(rng.normal(size=(2, dec.cfg.model_dim)))
        gold = answer_ids("near a tree", vocab)
        q = tokenize("how many buildings", vocab)

        def f():
            inp = DecoderInput(h_v=hv.value, question_ids=q)
            return dec.ce_loss(inp, gold)[0]

        inp = DecoderInput(h_v=hv.value, question_ids=q)
        _, tape = dec.ce_loss(inp, gold)
        d_hv = dec.ce_backward(tape)
        fd = finite_diff_grad(f, [hv])[0]
        assert max_rel_error(d_hv, fd, floor=1e-3) < 1e-6


class TestFactorization:
    @pytest.mark.parametrize("seed", range(5))
    def test_sequence_logprob_equals_sum_of_steps(self, vocab, seed):
        dec = small_decoder(vocab, seed=seed)
        rng = np.random.default_rng(200 + seed)
        inp = some_input(dec, vocab, seed=300 + seed)
        length = int(rng.integers(1, dec.cfg.max_answer_len))
        word_ids = [i for i in range(4, len(vocab))]
        gold = [int(rng.choice(word_ids)) for _ in range(length - 1)] + [vocab.eos_id]
        loss, _ = dec.ce_loss(inp, gold)
        total_from_steps = 0.0
        for j, tok in enumerate(gold):
            lp = dec.step_logprobs(inp, gold[:j])
            total_from_steps += lp[tok]
        assert abs(-loss * len(gold) - total_from_steps) < 1e-10


class TestGreedyDecode:
    def test_immediate_eos_gives_empty_string(self, vocab):
        dec = small_decoder(vocab)
        dec.out_w.value[:] = 0.0
        dec.out_b.value[:] = 0.0
        dec.out_b.value[0, vocab.eos_id] = 10.0
        assert dec.greedy_decode(some_input(dec, vocab)) == ""

    def test_deterministic(self, vocab):
        dec = small_decoder(vocab, seed=8)
        inp = some_input(dec, vocab, seed=9)
        assert dec.greedy_decode(inp) == dec.greedy_decode(inp)

    def test_tie_breaks_to_lowest_id(self, vocab):
        dec = small_decoder(vocab)
        dec.out_w.value[:] = 0.0
        dec.out_b.value[:] = 0.0
        lo = vocab.id("blue")
        hi = vocab.id("tree")
        assert lo < hi
        dec.out_b.value[0, lo] = 5.0
        dec.out_b.value[0, hi] = 5.0
        out = dec.greedy_decode(some_input(dec, vocab))
        assert out.split()[0] == "blue"

    def test_respects_max_answer_len(self, vocab):
        dec = small_decoder(vocab)
        dec.out_w.value[:] = 0.0
        dec.out_b.value[:] = 0.0
        dec.out_b.value[0, vocab.id("blue")] = 10.0  # never emits EOS
        out = dec.greedy_decode(some_input(dec, vocab))
        assert out.split() == ["blue"] * dec.cfg.max_answer_len
