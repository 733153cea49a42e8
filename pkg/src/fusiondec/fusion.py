"""On-the-fly delta grammar: log-linear fusion of the full n-gram LM and the
LSTM LM, applied as a correction to arcs that already carry pruned n-gram
costs.

For a word ``w`` after history ``h`` the scorer returns the cost correction::

    delta = -(lam_ngram * log P_G(w|h) + lam_lstm * log S_lstm(w|h)) + log P_G'(w|h)

so that graph cost ``-log P_G'`` plus ``delta`` is the fused LM cost.  Neural
scores go through a three-level cache keyed by exact word histories:
fused scores per (history, word), final-layer outputs per history, and
recurrent states per history.
"""

import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .lstm import scoring_state
from .ngram import Vocabulary

INF = math.inf


@dataclass
class FusionConfig:
    interpolation: str = "log-linear"
    weights: tuple = (0.5, 0.5)       # (ngram, lstm)
    use_unnormalized: bool = True
    ngram_approx_n: float = INF
    batch_size: int = 16
    use_cache: bool = True

    def __post_init__(self):
        if self.interpolation == "linear":
            raise NotImplementedError("linear interpolation is reserved but not implemented")
        if self.interpolation != "log-linear":
            raise ConfigError(f"unknown interpolation {self.interpolation!r}")
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != 2 or min(self.weights) < 0:
            raise ConfigError("weights must be two non-negative numbers")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.ngram_approx_n == INF or (int(self.ngram_approx_n) == self.ngram_approx_n
                                                 and self.ngram_approx_n >= 1)):
            raise ConfigError("ngram_approx_n must be a positive integer or inf")


@dataclass(frozen=True)
class FusionState:
    """Histories of one hypothesis.

    ``words`` is the full word sequence of the current utterance (no ``<s>``);
    it is also the key of the neural state, whose context-initial state is
    fixed per session.  ``g_history`` and ``gp_history`` are the suffixes the
    two n-gram models actually condition on.
    """

    words: tuple = ()
    g_history: tuple = (Vocabulary.bos_id,)
    gp_history: tuple = (Vocabulary.bos_id,)

    def extend(self, word, g_order, gp_order):
        g = (self.g_history + (word,))[-(g_order - 1):] if g_order > 1 else ()
        gp = (self.gp_history + (word,))[-(gp_order - 1):] if gp_order > 1 else ()
        return FusionState(self.words + (word,), g, gp)


@dataclass
class ScoreCache:
    fused: dict = field(default_factory=dict)      # (words, word) -> fused log score
    hidden: dict = field(default_factory=dict)     # words -> LmHistoryState with output s
    recurrent: dict = field(default_factory=dict)  # words -> LmHistoryState (h, c)
    l1_hits: int = 0
    l2_hits: int = 0
    l3_hits: int = 0
    full_forwards: int = 0

    def counters(self):
        return {"l1_hits": self.l1_hits, "l2_hits": self.l2_hits,
                "l3_hits": self.l3_hits, "full_forwards": self.full_forwards}

    def clear(self):
        self.fused.clear()
        self.hidden.clear()
        self.recurrent.clear()


class FusionScorer:
    """One decoding session: models, context-initial neural state, cache.

    Cache keys are word sequences relative to the initial state, so one
    scorer may serve several utterances that start from the same state
    (e.g. no cross-utterance context); entries then carry over between them.
    :meth:`reset` starts over from a new state and clears everything.
    """

    def __init__(self, g, gp, lstm=None, cfg=None, initial_state=None, cache=None):
        self.cfg = cfg if cfg is not None else FusionConfig()
        if g.vocab != gp.vocab:
            raise ConfigError("full and pruned n-gram models use different vocabularies")
        if self.cfg.weights[1] > 0 or lstm is not None:
            if lstm is None:
                raise ConfigError("an LSTM model is required when its weight is positive")
            if lstm.vocab_size != len(g.vocab):
                raise ConfigError(f"LSTM vocabulary size {lstm.vocab_size} differs from "
                                  f"n-gram vocabulary size {len(g.vocab)}")
        self.g = g
        self.gp = gp
        self.lstm = lstm
        self.vocab = g.vocab
        self.cache = cache if cache is not None else ScoreCache()
        self.reset(initial_state)

    def reset(self, initial_state=None):
        """Start a new utterance from ``initial_state`` (after ``<s>`` or the
        context); clears every cache level."""
        if self.lstm is not None:
            if initial_state is None:
                initial_state = scoring_state(self.lstm)
            if initial_state.s is None:
                initial_state = self.lstm.forward_step(initial_state, self.vocab.bos_id)
        self.initial_state = initial_state
        self.cache.clear()
        if self.cfg.use_cache and initial_state is not None:
            self.cache.hidden[()] = initial_state
            self.cache.recurrent[()] = initial_state

    def initial(self):
        return FusionState()

    # -- neural side --------------------------------------------------------

    def _lstm_score(self, state, word):
        return self.lstm.score(state, word, normalized=not self.cfg.use_unnormalized)

    def _fuse(self, fstate, word, neural):
        lam_n, lam_l = self.cfg.weights
        score = lam_n * self.g.prob(fstate.g_history, word)
        if lam_l:
            score += lam_l * neural
        return score

    def _full_forward(self, words):
        cache = self.cache
        cache.full_forwards += 1
        start, state = 0, self.initial_state
        if self.cfg.use_cache:
            for k in range(len(words) - 1, 0, -1):
                if words[:k] in cache.recurrent:
                    start, state = k, cache.recurrent[words[:k]]
                    break
        for w in words[start:]:
            state = self.lstm.forward_step(state, w)
        return state

    def _store(self, words, state):
        if self.cfg.use_cache:
            self.cache.hidden[words] = state
            self.cache.recurrent[words] = state

    def fused_log_score(self, fstate, word):
        """``lam_n log P_G + lam_l log S_lstm`` with the cache cascade."""
        return self.batch_fused_log_scores([(fstate, word)])[0]

    def batch_fused_log_scores(self, requests):
        cache, use = self.cache, self.cfg.use_cache
        results = [None] * len(requests)
        unique = {}
        for i, (fs, w) in enumerate(requests):
            unique.setdefault((fs.words, w), []).append(i)
        pending = []
        for (words, w), idxs in unique.items():
            fs = requests[idxs[0]][0]
            if use and (words, w) in cache.fused:
                cache.l1_hits += 1
                for i in idxs:
                    results[i] = cache.fused[(words, w)]
                continue
            pending.append((words, w, fs, idxs))
        if self.lstm is None or not self.cfg.weights[1]:
            for words, w, fs, idxs in pending:
                value = self._fuse(fs, w, 0.0)
                if use:
                    cache.fused[(words, w)] = value
                for i in idxs:
                    results[i] = value
            return results

        # resolve the state whose output predicts each pending word
        states = {}
        one_step = []
        for words, _, _, _ in pending:
            if words in states:
                continue
            if use and words in cache.hidden:
                cache.l2_hits += 1
                states[words] = cache.hidden[words]
            elif use and words and words[:-1] in cache.recurrent:
                cache.l3_hits += 1
                states[words] = None
                one_step.append(words)
            else:
                states[words] = self._full_forward(words)
                self._store(words, states[words])
        bs = self.cfg.batch_size
        for b in range(0, len(one_step), bs):
            chunk = one_step[b:b + bs]
            advanced = self.lstm.forward_batch([cache.recurrent[w[:-1]] for w in chunk],
                                               [w[-1] for w in chunk])
            for words, st in zip(chunk, advanced):
                states[words] = st
                self._store(words, st)
        for words, w, fs, idxs in pending:
            value = self._fuse(fs, w, self._lstm_score(states[words], w))
            if use:
                cache.fused[(words, w)] = value
            for i in idxs:
                results[i] = value
        return results

    # -- public scoring -----------------------------------------------------

    def successor(self, fstate, word):
        return fstate.extend(word, self.g.order, self.gp.order)

    def fused_word_score(self, fstate, word):
        """(delta cost, successor state) for emitting ``word``."""
        return self.batch_fused_scores([(fstate, word)])[0]

    def batch_fused_scores(self, requests):
        fused = self.batch_fused_log_scores(requests)
        out = []
        for (fs, w), value in zip(requests, fused):
            delta = self.gp.prob(fs.gp_history, w) - value
            succ = self.successor(fs, w) if w != self.vocab.eos_id else fs
            out.append((delta, succ))
        return out

    def lm_cost(self, words):
        """Fused LM cost of ``<s> words </s>`` from the session's initial state."""
        fs = self.initial()
        total = 0.0
        for w in list(words) + [self.vocab.eos_id]:
            total -= self.fused_log_score(fs, w)
            if w != self.vocab.eos_id:
                fs = self.successor(fs, w)
        return total

