"""
Carrying LSTM state across utterances
=====================================

Conversations in the simulated corpus drift slowly between topics, so the
previous utterances say a lot about the next one.  An LSTM trained on whole
session streams learns to use the state it carries over.  Here we measure
perplexity with 0, 1, 2 and all previous utterances as context, and with
the full history shuffled, which keeps the words but destroys their order.
"""

import math
import time

import numpy as np

from fusiondec import (ContextProtocol, LstmConfig, LstmModel, SimSpec, Vocabulary, gen_corpus,
                       lexicon_for, perplexity, scoring_state, train_lstm)

spec = SimSpec()
convs = gen_corpus(spec)
train, test = convs[:80], convs[80:]
vocab = Vocabulary(lexicon_for(spec).prons)
sessions = [[vocab.encode(u.tokens) for u in c.utterances] for c in train]

models = {}
for objective in ("cross-entropy", "nce"):
    cfg = LstmConfig(vocab_size=len(vocab), objective=objective, learning_rate=0.5, epochs=20)
    t0 = time.perf_counter()
    models[objective], trace = train_lstm(LstmModel(cfg), sessions, cfg, sessions=True)
    print(f"{objective:13s} trained in {time.perf_counter() - t0:.1f}s, "
          f"loss {trace[0]:.3f} -> {trace[-1]:.3f}")

protocols = [ContextProtocol(0), ContextProtocol(1), ContextProtocol(2),
             ContextProtocol(math.inf), ContextProtocol(math.inf, shuffle=True)]
print(f"\n{'context':22s} {'CE':>8s} {'NCE':>8s}")
for proto in protocols:
    row = [perplexity(models[o], test, proto, vocab) for o in ("cross-entropy", "nce")]
    print(f"{proto.label:22s} {row[0]:8.3f} {row[1]:8.3f}")

# NCE never computes the softmax denominator during training, and it ends up
# close to one on its own; the cross-entropy model has no such pull.
logz = {o: [] for o in models}
for u in (u for c in test for u in c.utterances):
    for o, m in models.items():
        state = scoring_state(m)
        for w in vocab.encode(u.tokens):
            logz[o].append(m.log_partition(state))
            state = m.forward_step(state, w)
for o, values in logz.items():
    print(f"{o:13s} mean |log Z| = {np.mean(np.abs(values)):.3f}")
