"""
Backoff acceptors and phi composition
=====================================

A trigram model becomes an acceptor with one state per history.  Words the
history has seen leave on explicit arcs; everything else takes the phi
(failure) arc to the shorter history.  Composing a lexicon with it resolves
phi exactly, so every path costs precisely ``-log P``.
"""

import math

from fusiondec import Lexicon, Vocabulary, accept_cost, compose, shortest_path, to_fst
from fusiondec import train_ngram
from fusiondec.decoder import lexicon_fst
from fusiondec.ngram import word_label

corpus = [s.split() for s in ["ab ba", "ab ba ab", "ba cc", "ab cc ba", "cc"]]
lm = train_ngram(corpus, 3)
vocab = lm.vocab
g = to_fst(lm)
print(f"trigram acceptor: {g.num_states} states, {g.num_arcs} arcs, phi arcs: {g.has_phi()}")

# Reading a sentence through the acceptor takes explicit arcs where they
# exist and backs off otherwise.  The path cost matches the model exactly.
for text in ["ab ba", "cc ab", "ba ba ba"]:
    ids = vocab.encode(text.split())
    fst_cost = accept_cost(g, [word_label(w) for w in ids])
    print(f"{text:10s} fst {fst_cost:.6f}   model {-lm.sentence_logprob(ids):.6f}")

# The lexicon maps letters to words; composing it with G gives a graph that
# reads letters and writes words.  With no acoustics attached, its cheapest
# paths are simply the most probable sentences.
lex = Lexicon.from_spellings(vocab.words)
graph = compose(lexicon_fst(lex, vocab), g)
print(f"\nL o G: {graph.num_states} states, {graph.num_arcs} arcs")
for path in shortest_path(graph, n=4):
    print(f"  {' '.join(path.ostring) or '(empty)':12s} cost {path.weight:.4f}  p = {math.exp(-path.weight):.4f}")
