import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import identity_projection_params, make_doc, random_doc, random_params, store_from
from oracles import naive_kee, naive_kim

from entsal.corpus import DescriptionStore
from entsal.model import (KernelBank, ModelError, cosine, describe_embedding,
                          kee_embed, kernel_pool, kim, load_checkpoint,
                          save_checkpoint)
from entsal.corpus import Vocabulary


class TestCosine:
    def test_identical(self):
        assert cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_zero_vector_convention(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ModelError):
            cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8),
           st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8))
    def test_range(self, u, v):
        n = min(len(u), len(v))
        c = cosine(np.array(u[:n]), np.array(v[:n]))
        assert -1.0 <= c <= 1.0


class TestDescribeEmbedding:
    def test_empty_is_zero(self):
        params = random_params(10, d=4)
        assert np.array_equal(describe_embedding([], params), np.zeros(4))

    def test_three_words_single_window(self):
        params = random_params(10, d=4, seed=3)
        words = [2, 5, 7]
        expected = params.W_c @ np.concatenate([params.V[w] for w in words])
        got = describe_embedding(words, params)
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)

    def test_max_pool_picks_dominant_window(self):
        # window 1 (words 0..2) holds large positive embeddings, word 3 is very
        # negative, so every coordinate of the first window's projection wins
        params = random_params(10, d=4, seed=4)
        params.V[1] = params.V[2] = params.V[3] = np.full(4, 2.0)
        params.V[4] = np.full(4, -50.0)
        params.W_c = np.abs(params.W_c) + 0.1
        words = [1, 2, 3, 4]
        window1 = params.W_c @ np.concatenate([params.V[w] for w in [1, 2, 3]])
        window2 = params.W_c @ np.concatenate([params.V[w] for w in [2, 3, 4]])
        assert np.all(window1 > window2)
        np.testing.assert_allclose(describe_embedding(words, params), window1,
                                   rtol=0, atol=1e-12)

    def test_short_sequences_padded_with_unk(self):
        params = random_params(10, d=4, seed=5)
        got = describe_embedding([6], params)
        expected = params.W_c @ np.concatenate(
            [params.V[6], params.V[0], params.V[0]])
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


class TestKeeEmbed:
    def test_identity_projection_sums_blocks(self):
        params = identity_projection_params(10, d=4, seed=0)
        store = store_from({5: (1, 2, 3)})
        v_d = describe_embedding((1, 2, 3), params)
        np.testing.assert_allclose(kee_embed(5, store, params),
                                   params.V[5] + v_d, atol=1e-15)

    def test_absent_description_is_entity_row(self):
        params = identity_projection_params(10, d=4, seed=1)
        store = DescriptionStore()
        np.testing.assert_array_equal(kee_embed(7, store, params), params.V[7])

    def test_matches_naive_matrix_product(self):
        params = random_params(20, d=8, seed=6)
        store = store_from({12: (1, 2, 3, 4, 5), 13: ()})
        for e in (11, 12, 13):
            expected = np.array(naive_kee(e, store, params))
            np.testing.assert_allclose(kee_embed(e, store, params), expected,
                                       rtol=0, atol=1e-12)


class TestKernelPool:
    def test_exact_and_soft_closed_form(self, bank):
        target = np.array([1.0, 0.0])
        scores = kernel_pool(target, [np.array([1.0, 0.0])], bank)
        assert scores[0] == pytest.approx(1.0, abs=1e-12)
        k_09 = list(bank.mus).index(0.9)
        assert scores[k_09] == pytest.approx(math.exp(-0.5), abs=1e-6)
        assert scores[k_09] == pytest.approx(0.606531, abs=1e-6)

    def test_empty_context(self, bank):
        assert np.array_equal(kernel_pool(np.array([1.0, 0.0]), [], bank),
                              np.zeros(bank.size))

    def test_two_vector_soft_value(self, bank):
        target = np.array([1.0, 0.0])
        ctx = [np.array([0.0, 1.0]), np.array([0.7071, 0.7071])]
        k_07 = list(bank.mus).index(0.7)
        c2 = 0.7071 / math.hypot(0.7071, 0.7071)
        expected = (math.exp(-(0.0 - 0.7) ** 2 / 0.02)
                    + math.exp(-(c2 - 0.7) ** 2 / 0.02))
        got = kernel_pool(target, ctx, bank)[k_07]
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(0.997478, abs=1e-6)

    @given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
    def test_monotone_toward_mu(self, c1, c2):
        # moving a context cosine closer to mu never decreases its kernel value
        bank = KernelBank.default()
        k1 = bank.evaluate(np.array([c1]))[0]
        k2 = bank.evaluate(np.array([c2]))[0]
        closer = np.abs(c2 - bank.mus) <= np.abs(c1 - bank.mus)
        assert np.all(k2[closer] >= k1[closer] - 1e-15)


class TestKim:
    def test_single_self_mention_no_words(self, bank):
        params = random_params(10, d=4, seed=7)
        doc = make_doc(words=(), mentions=((5, 0),))
        scores = kim(5, doc, None, params, bank)
        assert scores.entity_kernels[0] == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(scores.word_kernels, np.zeros(bank.size))

    def test_exact_kernel_counts_mentions(self, bank):
        # all non-target mention cosines stay at 0 (orthogonal rows), far from
        # the exact kernel, so the exact score equals the mention count
        params = identity_projection_params(10, d=4, seed=8)
        params.V = np.zeros((10, 4))
        params.V[5] = [1.0, 0.0, 0.0, 0.0]
        params.V[6] = [0.0, 1.0, 0.0, 0.0]
        params.V[7] = [0.0, 0.0, 1.0, 0.0]
        doc = make_doc(words=(0,),
                       mentions=((5, 0), (6, 0), (5, 0), (7, 0), (5, 0)))
        scores = kim(5, doc, None, params, bank)
        assert scores.entity_kernels[0] == pytest.approx(3.0, abs=1e-6)

    def test_duplicating_doc_doubles_every_kernel(self, bank):
        params = random_params(20, d=6, seed=9)
        store = store_from({12: (1, 2, 3)})
        doc = make_doc(words=(1, 2, 3, 4), mentions=((12, 0), (13, 2), (14, 3)))
        doubled = make_doc(words=doc.words * 2,
                           mentions=doc.entity_mentions * 2)
        s1 = kim(12, doc, store, params, bank)
        s2 = kim(12, doubled, store, params, bank)
        np.testing.assert_allclose(s2.entity_kernels, 2 * s1.entity_kernels,
                                   rtol=1e-12)
        np.testing.assert_allclose(s2.word_kernels, 2 * s1.word_kernels,
                                   rtol=1e-12)

    def test_permutation_invariance(self, bank):
        params = random_params(20, d=6, seed=10)
        doc = make_doc(words=(1, 2, 3, 4, 5), mentions=((12, 0), (13, 2), (14, 3)))
        rng = np.random.default_rng(0)
        w = list(doc.words)
        m = list(doc.entity_mentions)
        rng.shuffle(w)
        rng.shuffle(m)
        shuffled = make_doc(words=tuple(w), mentions=tuple(m))
        s1, s2 = kim(12, doc, None, params, bank), kim(12, shuffled, None, params, bank)
        np.testing.assert_allclose(s1.stacked(), s2.stacked(), rtol=0, atol=1e-12)

    def test_bounds(self, bank):
        rng = np.random.default_rng(11)
        params = random_params(30, d=6, seed=11)
        for _ in range(10):
            doc = random_doc(rng, 30, 6, n_words_max=20, n_mentions_max=20,
                             entity_lo=15)
            if not doc.entity_mentions:
                continue
            target = doc.entity_mentions[0][0]
            s = kim(target, doc, None, params, bank)
            assert np.all(s.entity_kernels >= 0)
            assert np.all(s.word_kernels >= 0)
            assert np.all(s.entity_kernels <= len(doc.entity_mentions) + 1e-9)
            assert np.all(s.word_kernels <= len(doc.words) + 1e-9)

    def test_matches_naive_double_loop(self, bank):
        rng = np.random.default_rng(12)
        vocab_size = 30
        params = random_params(vocab_size, d=8, seed=12)
        store = store_from({e: tuple(int(w) for w in rng.integers(0, 15, size=4))
                            for e in range(15, 30, 3)})
        for trial in range(10):
            doc = random_doc(rng, vocab_size, 8, n_words_max=30, n_mentions_max=30,
                             entity_lo=15)
            if not doc.entity_mentions:
                continue
            target = int(rng.integers(15, vocab_size))
            got = kim(target, doc, store, params, bank)
            ent, wrd = naive_kim(target, doc, store, params, bank)
            np.testing.assert_allclose(got.entity_kernels, ent, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(got.word_kernels, wrd, rtol=1e-9, atol=1e-12)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, bank):
        params = random_params(12, d=4, seed=13)
        vocab = Vocabulary([f"w{i}" for i in range(5)], [f"E{i}" for i in range(5)])
        params.V = params.V[: vocab.total_size]
        path = str(tmp_path / "model.json")
        save_checkpoint(path, params, bank, vocab)
        loaded, loaded_bank, loaded_vocab = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.V, params.V)
        np.testing.assert_array_equal(loaded.W_c, params.W_c)
        np.testing.assert_array_equal(loaded.W_p, params.W_p)
        np.testing.assert_array_equal(loaded.W_s, params.W_s)
        assert loaded.b_s == params.b_s
        np.testing.assert_array_equal(loaded_bank.mus, bank.mus)
        assert loaded_vocab.word_symbols == vocab.word_symbols

        doc = make_doc(words=(2, 3), mentions=((7, 0), (8, 1)))
        s1 = kim(7, doc, None, params, bank)
        s2 = kim(7, doc, None, loaded, loaded_bank)
        np.testing.assert_array_equal(s1.stacked(), s2.stacked())
