import itertools
import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fusiondec.errors import ArpaFormatError, ConfigError
from fusiondec.ngram import Vocabulary, prune, read_arpa, to_fst, train, word_label, write_arpa
from fusiondec.wfst import accept_cost

BOS, EOS = Vocabulary.bos_id, Vocabulary.eos_id


# -- oracles -------------------------------------------------------------------

def witten_bell_oracle(corpus, order, vocab):
    """Interpolated Witten-Bell evaluated straight from counts."""
    follow = defaultdict(lambda: defaultdict(int))
    for utt in corpus:
        toks = [BOS] + vocab.encode(utt) + [EOS]
        for i in range(1, len(toks)):
            for k in range(0, order):
                if i - k < 0:
                    break
                follow[tuple(toks[i - k:i])][toks[i]] += 1
    targets = vocab.target_ids

    def prob(history, w):
        h = tuple(history[-(order - 1):]) if order > 1 else ()
        if not h:
            f = follow[()]
            n, t = sum(f.values()), len(f)
            return (f.get(w, 0) + t / len(targets)) / (n + t)
        lower = prob(h[1:], w)
        f = follow.get(h)
        if not f:
            return lower
        c, t = sum(f.values()), len(f)
        return (f.get(w, 0) + t * lower) / (c + t)

    return prob


def backoff_oracle(m, history, w):
    """Table lookup with explicit backoff, written independently of NGramModel.prob."""
    h = tuple(history)[max(0, len(history) - (m.order - 1)):] if m.order > 1 else ()
    if h + (w,) in m.logprob:
        return m.logprob[h + (w,)]
    if not h:
        raise KeyError(w)
    return m.backoff.get(h, 0.0) + backoff_oracle(m, h[1:], w)


def random_corpus(rng, n_utts, vocab_words, max_len=6):
    return [[str(vocab_words[i]) for i in rng.integers(len(vocab_words), size=rng.integers(1, max_len))]
            for _ in range(n_utts)]


def normalization_errors(m):
    errs = []
    for h in [()] + m.histories():
        total = sum(math.exp(m.prob(h, w)) for w in m.vocab.target_ids)
        errs.append(abs(total - 1.0))
    return errs


# -- vocabulary ----------------------------------------------------------------

def test_vocabulary_ids_and_unk():
    v = Vocabulary(["b", "a", "a"])
    assert v.words == ["<unk>", "<s>", "</s>", "a", "b"]
    assert v.encode(["a", "zzz"]) == [3, 0]
    assert BOS not in v.target_ids and EOS in v.target_ids
    assert v.symbol_table().find(word_label(3)) == "a"


# -- training --------------------------------------------------------------------

def test_witten_bell_hand_values():
    # counts: unigram targets a:2 b:2 </s>:2 (N=6, T=3) over 4 targets (<unk> </s> a b)
    corpus = [["a", "b"], ["a", "b"]]
    m = train(corpus, 2)
    a, b = m.vocab.id("a"), m.vocab.id("b")
    p_b = (2 + 3 / 4) / 9
    assert math.exp(m.prob((), b)) == pytest.approx(p_b, abs=1e-15)
    assert math.exp(m.prob((), m.vocab.unk_id)) == pytest.approx(0.75 / 9, abs=1e-15)
    # history a: one type (b) seen twice
    assert math.exp(m.prob((a,), b)) == pytest.approx((2 + p_b) / 3, abs=1e-15)
    assert m.backoff[(a,)] == pytest.approx(math.log(1 / 3), abs=1e-15)
    assert math.exp(m.prob((a,), a)) == pytest.approx(p_b / 3, abs=1e-15)


def test_single_utterance_unigram_sums_to_one():
    m = train([["a"]], 1)
    probs = {m.vocab.words[w]: math.exp(m.prob((), w)) for w in m.vocab.target_ids}
    assert set(probs) == {"<unk>", "</s>", "a"}
    assert sum(probs.values()) == pytest.approx(1.0, abs=1e-12)
    assert probs["a"] == pytest.approx(5 / 12, abs=1e-15)


def test_empty_corpus_is_config_error():
    with pytest.raises(ConfigError):
        train([], 2)


def test_bigram_without_repeats_backs_off_to_unigram(rng):
    corpus = [["a", "b", "c"], ["d", "e"]]
    m1, m2 = train(corpus, 1), train(corpus, 2, Vocabulary.from_corpus(corpus))
    for w in m1.vocab.target_ids:
        assert m2.logprob[(w,)] == m1.logprob[(w,)]
    c, a = m2.vocab.id("c"), m2.vocab.id("a")
    assert m2.prob((c,), a) == pytest.approx(m2.backoff[(c,)] + m1.prob((), a), abs=1e-15)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_train_matches_count_oracle(order, rng):
    corpus = random_corpus(rng, 30, "abcde")
    m = train(corpus, order)
    oracle = witten_bell_oracle(corpus, order, m.vocab)
    ids = list(m.vocab.target_ids)
    for _ in range(300):
        h = [BOS] + [int(x) for x in rng.choice(ids, size=rng.integers(0, order + 1))]
        w = int(rng.choice(ids))
        assert m.prob(h, w) == pytest.approx(math.log(oracle(h, w)), abs=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_normalization_property(seed, order):
    rng = np.random.default_rng(seed)
    m = train(random_corpus(rng, 8, "abcd"), order)
    assert max(normalization_errors(m)) < 1e-6


def test_deterministic():
    corpus = [["a", "b"], ["b", "c", "a"]]
    assert train(corpus, 3).logprob == train(corpus, 3).logprob


# -- prob ------------------------------------------------------------------------

def test_long_history_truncated(rng):
    m = train(random_corpus(rng, 20, "abc"), 3)
    a, b, c = (m.vocab.id(x) for x in "abc")
    assert m.prob((c, c, a, b), a) == m.prob((a, b), a)


def test_listed_trigram_returns_stored_value(rng):
    m = train(random_corpus(rng, 20, "abc"), 3)
    key = next(k for k in m.logprob if len(k) == 3)
    assert m.prob(key[:-1], key[-1]) == m.logprob[key]


def test_prob_matches_independent_backoff_recursion(rng):
    m = prune(train(random_corpus(rng, 40, "abcdef"), 3), 1e-3)
    ids = list(m.vocab.target_ids)
    checked_backoff = 0
    for h in itertools.product(ids + [BOS], repeat=2):
        for w in ids:
            assert m.prob(h, w) == pytest.approx(backoff_oracle(m, h, w), abs=1e-12)
            checked_backoff += h + (w,) not in m.logprob
    assert checked_backoff > 0


def test_bos_is_not_a_target():
    m = train([["a"]], 2)
    with pytest.raises(ConfigError):
        m.prob((), BOS)


# -- pruning ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(7)
    corpus = random_corpus(rng, 60, "abcdefg", max_len=8)
    return corpus, train(corpus, 3)


def test_prune_zero_is_noop(toy):
    _, m = toy
    p = prune(m, 0.0)
    ids = m.vocab.target_ids
    for h in itertools.product(ids + [BOS], repeat=2):
        for w in ids:
            assert abs(p.prob(h, w) - m.prob(h, w)) < 1e-9


def test_prune_infinite_keeps_only_unigrams(toy):
    _, m = toy
    p = prune(m, math.inf)
    assert p.num_ngrams() == p.num_ngrams(1) == m.num_ngrams(1)
    assert not p.backoff


@pytest.mark.parametrize("threshold", [1e-4, 1e-3, 1e-2])
def test_pruned_model_stays_normalized_and_well_formed(toy, threshold):
    _, m = toy
    p = prune(m, threshold)
    assert p.num_ngrams() < m.num_ngrams()
    assert max(normalization_errors(p)) < 1e-6
    for key in p.logprob:
        if len(key) > 1 and key[:-1] != (BOS,):
            assert key[:-1] in p.logprob
    # drift is bounded: pruned probabilities stay within the original's neighbourhood
    ids = m.vocab.target_ids
    drift = max(abs(p.prob(h, w) - m.prob(h, w))
                for h in p.histories() for w in ids)
    assert drift < 3.0


def test_prune_relative_entropy_bounded(toy):
    """Weighted relative entropy of the pruned model stays near the sum of the
    per-n-gram estimates, each below the threshold."""
    corpus, m = toy
    threshold = 1e-3
    p = prune(m, threshold)
    removed = m.num_ngrams() - p.num_ngrams()
    ids = m.vocab.target_ids
    total = 0.0
    for h in m.histories():
        ph = math.exp(sum(m.prob(h[:i], h[i]) for i in range(1 if h[0] == BOS else 0, len(h))))
        total += ph * sum(math.exp(m.prob(h, w)) * (m.prob(h, w) - p.prob(h, w)) for w in ids)
    assert 0.0 <= total < 2 * threshold * removed


@given(st.integers(0, 10_000))
def test_prune_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    m = train(random_corpus(rng, 25, "abcde"), 3)
    counts = [prune(m, t).num_ngrams() for t in (0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, math.inf)]
    assert counts == sorted(counts, reverse=True)


# -- FST compilation -----------------------------------------------------------------

def fst_cost(m, words):
    return accept_cost(to_fst(m), [word_label(w) for w in words])


def test_unigram_fst_topology():
    m = train([["a", "b"], ["b"]], 1)
    f = to_fst(m)
    assert f.num_states == 1
    a, b = m.vocab.id("a"), m.vocab.id("b")
    want = -(m.prob((), a) + m.prob((), b) + m.prob((), EOS))
    assert fst_cost(m, [a, b]) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("threshold", [0.0, 1e-3, 1e-2])
def test_fst_cost_equals_prob_chain(toy, threshold):
    _, m = toy
    p = prune(m, threshold)
    f = to_fst(p)
    rng = np.random.default_rng(11)
    ids = list(p.vocab.regular_ids) + [p.vocab.unk_id]
    for _ in range(1000):
        words = [int(x) for x in rng.choice(ids, size=rng.integers(0, 7))]
        cost = accept_cost(f, [word_label(w) for w in words])
        assert cost == pytest.approx(-p.sentence_logprob(words), abs=1e-9)


def test_pruned_fst_follows_pruned_model(toy):
    _, m = toy
    p = prune(m, 1e-2)
    f = to_fst(p)
    rng = np.random.default_rng(3)
    ids = list(p.vocab.regular_ids)
    differs = 0
    for _ in range(200):
        words = [int(x) for x in rng.choice(ids, size=4)]
        cost = accept_cost(f, [word_label(w) for w in words])
        assert cost == pytest.approx(-p.sentence_logprob(words), abs=1e-9)
        differs += abs(cost + m.sentence_logprob(words)) > 1e-6
    assert differs > 0


# -- ARPA --------------------------------------------------------------------------

def test_arpa_round_trip(toy):
    _, m = toy
    for model in (m, prune(m, 1e-3)):
        back = read_arpa(write_arpa(model))
        assert back.order == model.order and back.vocab == model.vocab
        assert set(back.logprob) == set(model.logprob)
        assert max(abs(back.logprob[k] - v) for k, v in model.logprob.items()) < 1e-6
        assert max(abs(back.backoff[k] - v) for k, v in model.backoff.items()) < 1e-6


def test_hand_written_unigram_arpa():
    text = "\\data\\\nngram 1=3\n\n\\1-grams:\n-0.3010299957\ta\n-0.3010299957\t</s>\n-99\t<s>\n\n\\end\\\n"
    m = read_arpa(text)
    assert m.order == 1
    assert m.prob((), m.vocab.id("a")) == pytest.approx(math.log(0.5), abs=1e-9)
    assert m.prob((), EOS) == pytest.approx(math.log(0.5), abs=1e-9)


def test_truncated_arpa_names_missing_section(toy):
    _, m = toy
    text = write_arpa(m)
    cut = text[:text.index("\\3-grams:")]
    with pytest.raises(ArpaFormatError, match="3-grams"):
        read_arpa(cut)


@pytest.mark.parametrize("text,line", [
    ("ngram 1=1\n", 1),
    ("\\data\\\nngram one=2\n", 2),
    ("\\data\\\nngram 1=2\n\n\\1-grams:\n-1.0\ta\n\\end\\\n", 6),
    ("\\data\\\nngram 1=1\n\n\\1-grams:\nxyz\ta\n\\end\\\n", 5),
    ("\\data\\\nngram 1=1\n\n\\1-grams:\n-1.0\ta\n", 5),
])
def test_malformed_arpa_reports_line(text, line):
    with pytest.raises(ArpaFormatError) as e:
        read_arpa(text)
    assert e.value.lineno == line
