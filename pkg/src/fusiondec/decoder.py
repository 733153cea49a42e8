"""Static graph construction (lexicon composed with the pruned n-gram
acceptor) and frame-synchronous token-passing beam search with on-the-fly
fusion scoring.

Every acoustic symbol lasts exactly ``frames_per_symbol`` frames, so the
search advances one graph arc per symbol slot; a slot's acoustic cost is the
sum of its frames' costs for the arc's input symbol.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .fusion import FusionConfig, FusionScorer, FusionState
from .ngram import RESERVED, label_word, to_fst, word_label
from .wfst import EPSILON, SymbolTable, Wfst, compose

INF = math.inf


@dataclass
class Lexicon:
    """One pronunciation (a tuple of acoustic symbols) per word."""

    prons: dict
    phones: SymbolTable = None

    def __post_init__(self):
        for word, pron in self.prons.items():
            if not pron:
                raise ConfigError(f"empty pronunciation for {word!r}")
        self.prons = {w: tuple(p) for w, p in self.prons.items()}
        if self.phones is None:
            self.phones = SymbolTable(sorted({p for pron in self.prons.values() for p in pron}))

    @classmethod
    def from_spellings(cls, words):
        return cls({w: tuple(w) for w in words if w not in RESERVED})

    def phone_ids(self, word):
        return [self.phones.find(p) for p in self.prons[word]]

    def num_symbols(self, words):
        return sum(len(self.prons[w]) for w in words)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for word in sorted(self.prons):
                f.write(f"{word}\t{' '.join(self.prons[word])}\n")

    @classmethod
    def read(cls, path):
        prons = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) < 2:
                    raise InputError(f"{path}:{lineno}: word without pronunciation")
                if parts[0] in prons:
                    raise InputError(f"{path}:{lineno}: duplicate entry for {parts[0]!r}")
                prons[parts[0]] = tuple(parts[1:])
        return cls(prons)


@dataclass
class DecodingGraph:
    fst: Wfst
    lexicon: Lexicon
    gp: object          # the NGramModel the graph was built from

    @property
    def vocab(self):
        return self.gp.vocab

    def word_of(self, olabel):
        return label_word(olabel)


def lexicon_fst(lex, vocab):
    """Word-loop transducer: first symbol of a word emits the word, the rest
    emit epsilon; state 0 is start and the only final state."""
    words = vocab.symbol_table()
    fst = Wfst(lex.phones, words)
    home = fst.add_state()
    fst.set_start(home)
    fst.set_final(home, 0.0)
    for word in sorted(lex.prons):
        if word not in vocab:
            continue
        phones = lex.phone_ids(word)
        src = home
        for k, ph in enumerate(phones):
            dst = home if k == len(phones) - 1 else fst.add_state()
            fst.add_arc(src, ph, word_label(vocab.index[word]) if k == 0 else EPSILON, 0.0, dst)
            src = dst
    return fst


def build_graph(lex, gp):
    """``L o G'`` with phi backoff resolved during composition."""
    missing = [w for w in gp.vocab.words if w not in RESERVED and w not in lex.prons]
    if missing:
        raise ConfigError(f"words missing from the lexicon: {' '.join(missing)}")
    fst = compose(lexicon_fst(lex, gp.vocab), to_fst(gp))
    for s in fst.states():
        for arc in fst.arcs(s):
            if arc.ilabel == EPSILON:
                raise ConfigError("decoding graph has input-epsilon arcs")
    return DecodingGraph(fst, lex, gp)


@dataclass
class DecodeConfig:
    beam: float = INF
    max_active: float = INF
    nbest: int = 1
    ngram_approx_n: float = INF
    frames_per_symbol: int = 1
    initial_state: object = None    # LmHistoryState; None = zero state then <s>

    def __post_init__(self):
        if not self.beam > 0:
            raise ConfigError("beam must be > 0")
        if self.nbest < 1:
            raise ConfigError("nbest must be >= 1")
        if self.frames_per_symbol < 1:
            raise ConfigError("frames_per_symbol must be >= 1")


@dataclass
class Token:
    state: int
    fstate: FusionState
    ac_cost: float = 0.0
    lm_cost: float = 0.0
    backpointer: object = None   # (previous Token, emitted word id) at word arcs

    @property
    def total(self):
        return self.ac_cost + self.lm_cost

    @property
    def words(self):
        return self.fstate.words

    def recombination_key(self, n):
        return (self.state, history_suffix(self.fstate.words, n))

    def sort_key(self):
        return (self.total, self.state, self.fstate.words)


def history_suffix(words, n):
    if n == INF:
        return words
    n = int(n)
    return words[len(words) - (n - 1):] if n > 1 else ()


def recombine(tokens, n=INF):
    """Keep the cheapest token per recombination key (ties: lower state id,
    then lexicographically smaller history)."""
    best = {}
    for tok in tokens:
        key = tok.recombination_key(n)
        cur = best.get(key)
        if cur is None or tok.sort_key() < cur.sort_key():
            best[key] = tok
    return sorted(best.values(), key=Token.sort_key)


@dataclass
class Hypothesis:
    words: tuple
    ac_cost: float
    lm_cost: float

    @property
    def total(self):
        return self.ac_cost + self.lm_cost

    def as_dict(self, vocab=None):
        d = {"words": list(self.words) if vocab is None else vocab.decode(self.words),
             "ac_cost": self.ac_cost, "lm_cost": self.lm_cost, "total_cost": self.total}
        return d


@dataclass
class DecodeResult:
    nbest: list
    token_counts: list = field(default_factory=list)
    cache: dict = field(default_factory=dict)
    diagnostic: str = ""

    @property
    def best(self):
        return self.nbest[0] if self.nbest else None

    def report(self, vocab=None):
        return {"nbest": [h.as_dict(vocab) for h in self.nbest],
                "token_counts": self.token_counts, "cache": self.cache,
                "diagnostic": self.diagnostic}

    def to_json(self, vocab=None):
        return json.dumps(self.report(vocab), sort_keys=True)


def slot_costs(frames, frames_per_symbol):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise InputError("decode needs a non-empty (frames, symbols) cost matrix")
    if frames.shape[0] % frames_per_symbol:
        raise InputError(f"{frames.shape[0]} frames is not a multiple of "
                         f"frames_per_symbol={frames_per_symbol}")
    return frames.reshape(-1, frames_per_symbol, frames.shape[1]).sum(axis=1)


def decode(graph, frames, fusion=None, cfg=None):
    """Viterbi token passing over ``graph``.

    ``frames`` is (num_frames, num_phones); column ``j`` is the cost of the
    lexicon's ``j``-th regular acoustic symbol (symbol id ``j + 2``).  With a
    :class:`FusionScorer` every word-emitting arc also receives the fusion
    delta, and the final weight receives the delta for ``</s>``.
    """
    cfg = cfg if cfg is not None else DecodeConfig()
    fst = graph.fst
    vocab = graph.vocab
    slots = slot_costs(frames, cfg.frames_per_symbol)
    if slots.shape[1] != len(graph.lexicon.phones) - 2:
        raise InputError(f"frame matrix has {slots.shape[1]} columns, lexicon has "
                         f"{len(graph.lexicon.phones) - 2} acoustic symbols")
    n = cfg.ngram_approx_n
    if fusion is not None:
        if fusion.gp is not graph.gp and fusion.gp.logprob != graph.gp.logprob:
            raise ConfigError("fusion scorer's pruned model differs from the graph's")
        if cfg.initial_state is not None:
            fusion.reset(cfg.initial_state)
        root = fusion.initial()
    else:
        root = FusionState()
    if fst.start is None:
        return DecodeResult([], diagnostic="empty decoding graph")

    active = [Token(fst.start, root)]
    counts = []
    for t in range(slots.shape[0]):
        cost_t = slots[t]
        expansions = []
        requests = []
        for tok in active:
            for arc in fst.arcs(tok.state):
                ac = tok.ac_cost + cost_t[arc.ilabel - 2]
                if arc.olabel != EPSILON:
                    word = graph.word_of(arc.olabel)
                    if fusion is not None:
                        requests.append((tok.fstate, word))
                    expansions.append((tok, arc, ac, word))
                else:
                    expansions.append((tok, arc, ac, None))
        deltas = iter(fusion.batch_fused_scores(requests)) if fusion is not None else None
        new = []
        for tok, arc, ac, word in expansions:
            if word is None:
                new.append(Token(arc.nextstate, tok.fstate, ac, tok.lm_cost + arc.weight,
                                 tok.backpointer))
                continue
            if deltas is not None:
                delta, succ = next(deltas)
            else:
                delta, succ = 0.0, tok.fstate.extend(word, graph.gp.order, graph.gp.order)
            new.append(Token(arc.nextstate, succ, ac, tok.lm_cost + arc.weight + delta,
                             (tok, word)))
        active = _prune(recombine(new, n), cfg)
        counts.append(len(active))
        if not active:
            return DecodeResult([], counts, _counters(fusion),
                                diagnostic=f"all tokens pruned at slot {t}")

    finals = [tok for tok in active if fst.is_final(tok.state)]
    if fusion is not None and finals:
        deltas = fusion.batch_fused_scores([(tok.fstate, vocab.eos_id) for tok in finals])
    else:
        deltas = [(0.0, None)] * len(finals)
    done = {}
    for tok, (delta, _) in zip(finals, deltas):
        hyp = Hypothesis(tok.words, tok.ac_cost, tok.lm_cost + fst.final(tok.state) + delta)
        cur = done.get(hyp.words)
        if cur is None or hyp.total < cur.total:
            done[hyp.words] = hyp
    nbest = sorted(done.values(), key=lambda h: (h.total, h.words))[:cfg.nbest]
    diag = "" if nbest else "no token reached a final state"
    return DecodeResult(nbest, counts, _counters(fusion), diag)


def _counters(fusion):
    return fusion.cache.counters() if fusion is not None else {}


def _prune(tokens, cfg):
    """``tokens`` arrive sorted by :meth:`Token.sort_key`."""
    if not tokens:
        return tokens
    limit = tokens[0].total + cfg.beam
    kept = [t for t in tokens if t.total <= limit]
    if cfg.max_active != INF:
        kept = kept[:int(cfg.max_active)]
    return kept


def rescore_nbest(nbest, g, m, context_state=None, cfg=None, gp=None):
    """Second pass: recompute each hypothesis's fused LM cost from scratch
    (no cache) and re-sort by acoustic + LM cost."""
    cfg = cfg if cfg is not None else FusionConfig()
    cold = FusionConfig(cfg.interpolation, cfg.weights, cfg.use_unnormalized,
                        cfg.ngram_approx_n, cfg.batch_size, use_cache=False)
    scorer = FusionScorer(g, gp if gp is not None else g, m, cold, initial_state=context_state)
    out = [Hypothesis(h.words, h.ac_cost, scorer.lm_cost(h.words)) for h in nbest]
    return sorted(out, key=lambda h: (h.total, h.words))


def acoustic_cost(words, lex, vocab, frames, frames_per_symbol):
    """Acoustic cost of the forced alignment of ``words`` (word ids)."""
    slots = slot_costs(frames, frames_per_symbol)
    phones = [p for w in words for p in lex.phone_ids(vocab.words[w])]
    if len(phones) != slots.shape[0]:
        return INF
    return float(sum(slots[t, p - 2] for t, p in enumerate(phones)))
