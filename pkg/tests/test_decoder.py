import math

import numpy as np
import pytest

from fusiondec.corpus import SimSpec, gen_corpus, lexicon_for, synth_frames
from fusiondec.decoder import (INF, DecodeConfig, Hypothesis, Lexicon, Token, acoustic_cost,
                               build_graph, decode, recombine, rescore_nbest)
from fusiondec.errors import ConfigError, InputError
from fusiondec.fusion import FusionConfig, FusionScorer, FusionState
from fusiondec.lstm import LstmConfig, LstmModel
from fusiondec.ngram import prune, train


def small_world(seed=0, vocab=5, noise=1.5, margin=4.0):
    spec = SimSpec(vocab_size=vocab, num_topics=1, topic_size=2, sessions=20,
                   utterances_per_session=4, mean_utterance_length=2.5, alphabet="abc",
                   max_word_length=2, noise=noise, margin=margin, frames_per_symbol=2,
                   seed=seed)
    corpus = [u.tokens for c in gen_corpus(spec) for u in c.utterances]
    lex = lexicon_for(spec)
    g = train(corpus, 3)
    gp = prune(g, 2e-2)
    return spec, lex, g, gp


def strings_filling(lengths, budget, prefix=()):
    """Every word string whose pronunciations total exactly ``budget`` symbols."""
    if budget == 0:
        if prefix:
            yield prefix
        return
    for w, n in lengths:
        if n <= budget:
            yield from strings_filling(lengths, budget - n, prefix + (w,))


def exhaustive_best(graph, frames, scorer, fps):
    """Minimum acoustic + fused LM cost over every word string that fits the frames."""
    vocab = graph.vocab
    lengths = [(vocab.index[w], len(p)) for w, p in sorted(graph.lexicon.prons.items())
               if w in vocab]
    best = None
    for words in strings_filling(lengths, frames.shape[0] // fps):
        total = acoustic_cost(words, graph.lexicon, vocab, frames, fps) + scorer.lm_cost(words)
        if best is None or (total, words) < best:
            best = (total, words)
    return best


def exact_cfg(fps):
    return DecodeConfig(beam=INF, max_active=INF, nbest=1, ngram_approx_n=INF,
                        frames_per_symbol=fps)


@pytest.mark.parametrize("seed", range(12))
def test_exhaustive_oracle_with_fusion(seed):
    spec, lex, g, gp = small_world(seed % 3)
    rng = np.random.default_rng(seed)
    graph = build_graph(lex, gp)
    words = sorted(lex.prons)
    truth = [words[i] for i in rng.integers(len(words), size=rng.integers(1, 5))]
    frames = synth_frames(truth, lex, spec, key=f"t{seed}")
    lstm = LstmModel(LstmConfig(vocab_size=len(g.vocab), embed_dim=3, hidden_dim=4, seed=seed,
                                init_scale=0.5))
    fcfg = FusionConfig(weights=(0.5, 0.5))
    res = decode(graph, frames, FusionScorer(g, gp, lstm, fcfg), exact_cfg(2))
    oracle = exhaustive_best(graph, frames, FusionScorer(g, gp, lstm, fcfg), 2)
    assert res.best.words == oracle[1]
    assert res.best.total == pytest.approx(oracle[0], abs=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_exhaustive_oracle_ngram_only(seed):
    spec, lex, g, gp = small_world(seed)
    rng = np.random.default_rng(100 + seed)
    graph = build_graph(lex, gp)
    words = sorted(lex.prons)
    truth = [words[i] for i in rng.integers(len(words), size=rng.integers(1, 5))]
    frames = synth_frames(truth, lex, spec, key=f"n{seed}")
    cold = FusionConfig(weights=(1.0, 0.0), use_cache=False)
    res = decode(graph, frames, None, exact_cfg(2))
    oracle = exhaustive_best(graph, frames, FusionScorer(gp, gp, None, cold), 2)
    assert res.best.words == oracle[1]
    assert res.best.total == pytest.approx(oracle[0], abs=1e-9)


def test_noiseless_frames_recover_transcript():
    spec, lex, g, gp = small_world(1, noise=0.0, margin=30.0)
    graph = build_graph(lex, gp)
    cfg = DecodeConfig(beam=20.0, max_active=100, frames_per_symbol=2)
    for conv in gen_corpus(spec)[:5]:
        for u in conv.utterances:
            res = decode(graph, synth_frames(u.tokens, lex, spec, u.utt_id), None, cfg)
            assert g.vocab.decode(res.best.words) == u.tokens


def test_unfused_lm_cost_is_pruned_model_cost():
    spec, lex, g, gp = small_world(2)
    graph = build_graph(lex, gp)
    frames = synth_frames(["aa"] if "aa" in lex.prons else [sorted(lex.prons)[0]], lex, spec)
    res = decode(graph, frames, None, DecodeConfig(nbest=5, frames_per_symbol=2))
    for h in res.nbest:
        assert h.lm_cost == pytest.approx(-gp.sentence_logprob(list(h.words)), abs=1e-9)
        assert h.ac_cost == pytest.approx(acoustic_cost(h.words, lex, g.vocab, frames, 2),
                                          abs=1e-12)


def test_identity_fusion_matches_full_model():
    spec, lex, g, gp = small_world(0)
    graph = build_graph(lex, gp)
    frames = synth_frames([sorted(lex.prons)[1]] * 2, lex, spec, key="x")
    scorer = FusionScorer(g, gp, None, FusionConfig(weights=(1.0, 0.0)))
    res = decode(graph, frames, scorer, DecodeConfig(nbest=10, frames_per_symbol=2))
    assert res.nbest
    for h in res.nbest:
        assert h.lm_cost == pytest.approx(-g.sentence_logprob(list(h.words)), abs=1e-9)


def test_beam_search_never_beats_exact_search():
    spec, lex, g, gp = small_world(0, noise=3.0)
    graph = build_graph(lex, gp)
    rng = np.random.default_rng(5)
    words = sorted(lex.prons)
    for k in range(5):
        truth = [words[i] for i in rng.integers(len(words), size=4)]
        frames = synth_frames(truth, lex, spec, key=f"b{k}")
        exact = decode(graph, frames, None, exact_cfg(2)).best.total
        for beam, active in ((1.0, 3), (3.0, 10), (INF, 2)):
            res = decode(graph, frames, None, DecodeConfig(beam=beam, max_active=active,
                                                           frames_per_symbol=2))
            if res.best is not None:
                assert res.best.total >= exact - 1e-12
            assert all(c <= active for c in res.token_counts)


def test_nbest_sorted_and_distinct():
    spec, lex, g, gp = small_world(1, noise=2.5)
    graph = build_graph(lex, gp)
    frames = synth_frames(sorted(lex.prons)[:3], lex, spec, key="nb")
    res = decode(graph, frames, None, DecodeConfig(nbest=20, frames_per_symbol=2))
    keys = [(h.total, h.words) for h in res.nbest]
    assert keys == sorted(keys)
    assert len({h.words for h in res.nbest}) == len(res.nbest)


def test_recombine_keeps_cheapest_per_key():
    rng = np.random.default_rng(0)
    toks = []
    for _ in range(200):
        words = tuple(int(x) for x in rng.integers(3, 6, size=rng.integers(0, 4)))
        toks.append(Token(int(rng.integers(4)), FusionState(words),
                          float(rng.integers(5)), float(rng.integers(3))))
    for n in (1, 2, 3, INF):
        kept = recombine(toks, n)
        groups = {}
        for t in toks:
            groups.setdefault(t.recombination_key(n), []).append(t)
        assert len(kept) == len(groups)
        for t in kept:
            assert t.sort_key() == min(x.sort_key() for x in groups[t.recombination_key(n)])
        assert [t.sort_key() for t in kept] == sorted(t.sort_key() for t in kept)


def test_rescore_independent_of_input_order():
    spec, lex, g, gp = small_world(0)
    lstm = LstmModel(LstmConfig(vocab_size=len(g.vocab), embed_dim=3, hidden_dim=4, seed=2))
    rng = np.random.default_rng(1)
    nbest = [Hypothesis(tuple(int(x) for x in rng.integers(3, len(g.vocab), size=3)),
                        float(rng.random()), 0.0) for _ in range(10)]
    a = rescore_nbest(nbest, g, lstm)
    b = rescore_nbest(nbest[::-1], g, lstm)
    assert [(h.words, h.total) for h in a] == [(h.words, h.total) for h in b]
    scorer = FusionScorer(g, g, lstm, FusionConfig(use_cache=False))
    for h in a:
        assert h.lm_cost == scorer.lm_cost(h.words)


def test_build_graph_missing_word():
    spec, lex, g, gp = small_world(0)
    partial = Lexicon({w: p for w, p in list(lex.prons.items())[1:]})
    with pytest.raises(ConfigError):
        build_graph(partial, gp)


def test_graph_has_no_input_epsilons():
    spec, lex, g, gp = small_world(0)
    fst = build_graph(lex, gp).fst
    assert all(a.ilabel >= 2 for s in fst.states() for a in fst.arcs(s))


@pytest.mark.parametrize("frames", [np.zeros((0, 3)), np.zeros((3, 3)), np.zeros((4, 7)),
                                    np.zeros(4)])
def test_decode_rejects_bad_frames(frames):
    spec, lex, g, gp = small_world(0)
    with pytest.raises(InputError):
        decode(build_graph(lex, gp), frames, None, DecodeConfig(frames_per_symbol=2))


@pytest.mark.parametrize("kw", [dict(beam=0.0), dict(nbest=0), dict(frames_per_symbol=0)])
def test_decode_config_validation(kw):
    with pytest.raises(ConfigError):
        DecodeConfig(**kw)


def test_fusion_graph_mismatch():
    spec, lex, g, gp = small_world(0)
    graph = build_graph(lex, gp)
    other = prune(g, 1e-1)
    frames = synth_frames([sorted(lex.prons)[0]], lex, spec)
    assert other.logprob != gp.logprob
    scorer = FusionScorer(g, other, None, FusionConfig(weights=(1.0, 0.0)))
    with pytest.raises(ConfigError):
        decode(graph, frames, scorer, DecodeConfig(frames_per_symbol=2))


def test_lexicon_round_trip(tmp_path):
    lex = Lexicon({"ab": ("a", "b"), "c": ("c",)})
    lex.write(tmp_path / "lex.txt")
    back = Lexicon.read(tmp_path / "lex.txt")
    assert back.prons == lex.prons
    (tmp_path / "dup.txt").write_text("ab a b\nab a\n")
    with pytest.raises(InputError):
        Lexicon.read(tmp_path / "dup.txt")
    (tmp_path / "bare.txt").write_text("ab\n")
    with pytest.raises(InputError):
        Lexicon.read(tmp_path / "bare.txt")


def test_decode_result_json_is_deterministic():
    spec, lex, g, gp = small_world(0)
    graph = build_graph(lex, gp)
    frames = synth_frames(sorted(lex.prons)[:2], lex, spec, key="j")
    a = decode(graph, frames, None, DecodeConfig(nbest=3, frames_per_symbol=2))
    b = decode(graph, frames, None, DecodeConfig(nbest=3, frames_per_symbol=2))
    assert a.to_json(g.vocab) == b.to_json(g.vocab)
    assert math.isfinite(a.best.total)
