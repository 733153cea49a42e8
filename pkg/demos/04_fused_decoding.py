"""
First-pass fusion versus n-best rescoring
=========================================

The graph carries only the pruned n-gram costs.  During search every word
arc also receives a correction delta, turning the graph cost into the
log-linear mix of the full n-gram and the LSTM.  Because the LSTM state is
seeded from the previous utterances, the context reaches the search itself
instead of only reordering a fixed n-best list afterwards.
"""

import math
import time

from fusiondec import (ContextProtocol, DecodeConfig, ExperimentModels, FusionConfig, FusionScorer,
                       LstmConfig, LstmModel, SimSpec, Vocabulary, build_graph, decode, gen_corpus,
                       lexicon_for, prune, rescore_nbest, run_context_experiment, synth_frames,
                       train_lstm, train_ngram)
from fusiondec.lstm import init_state_from_context

spec = SimSpec()
convs = gen_corpus(spec)
train, test = convs[:80], convs[80:90]
lex = lexicon_for(spec)
vocab = Vocabulary(lex.prons)
g = train_ngram([u.tokens for c in train for u in c.utterances], 3, vocab=vocab)
gp = prune(g, 1e-3)
graph = build_graph(lex, gp)
cfg = LstmConfig(vocab_size=len(vocab), objective="nce", learning_rate=0.5, epochs=20)
lstm, _ = train_lstm(LstmModel(cfg), [[vocab.encode(u.tokens) for u in c.utterances]
                                      for c in train], cfg, sessions=True)
frames = {u.utt_id: synth_frames(u.tokens, lex, spec, u.utt_id) for c in test for u in c.utterances}
search = DecodeConfig(beam=10.0, max_active=200, frames_per_symbol=2)
fusion = FusionConfig(weights=(0.5, 0.5))

# One utterance in detail: the third of the first test session, with the two
# earlier reference utterances as LSTM context.
conv, t = test[0], 2
utt = conv.utterances[t]
state = init_state_from_context(lstm, [vocab.encode(u.tokens) for u in conv.utterances[:t]])
print("reference    :", utt.text)
plain = decode(graph, frames[utt.utt_id], None, search)
print("graph only   :", " ".join(vocab.decode(plain.best.words)))
scorer = FusionScorer(g, gp, lstm, fusion, initial_state=state)
fused = decode(graph, frames[utt.utt_id], scorer, search)
print("fused        :", " ".join(vocab.decode(fused.best.words)))
print("cache        :", fused.cache)

# Rescoring the graph-only n-best under the same context gives the same
# fused score to every hypothesis both passes found.
nbest = decode(graph, frames[utt.utt_id], None, DecodeConfig(beam=10.0, max_active=200,
                                                             nbest=100, frames_per_symbol=2))
rescored = rescore_nbest(nbest.nbest, g, lstm, state, fusion)
print("rescored     :", " ".join(vocab.decode(rescored[0].words)))
print(f"costs        : first pass {fused.best.total:.4f}, second pass {rescored[0].total:.4f}")

# Across ten test sessions and several context protocols.
models = ExperimentModels(vocab, lex, g, gp, graph, lstm)
t0 = time.perf_counter()
report = run_context_experiment(test, models, frames,
                                [ContextProtocol(0), ContextProtocol(math.inf),
                                 ContextProtocol(math.inf, source="hypothesis")],
                                search, fusion)
print(f"\nexperiment over {len(test)} sessions took {time.perf_counter() - t0:.0f}s")
for row in report["rows"]:
    if row["table"] in ("table1", "table4"):
        extra = f"  cost violations {row['dominance_violations']}" \
            if "dominance_violations" in row else ""
        print(f"  {row['table']} {row['lm']:12s} {row['pass']:3s} k={row['k']:3s} "
              f"{row['source']:10s} WER {row['wer']:6.2f}{extra}")
