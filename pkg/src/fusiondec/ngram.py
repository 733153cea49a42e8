"""Backoff n-gram language models: Witten-Bell training, relative-entropy
pruning, ARPA I/O and compilation to a phi-backoff acceptor.

Probabilities are kept as natural logs keyed by tuples of word ids
``history + (word,)``; ARPA files carry log10 and are converted on the way
in and out.
"""

import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass, field

from .errors import ArpaFormatError, ConfigError
from .wfst import PHI, SymbolTable, Wfst

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
RESERVED = (UNK, BOS, EOS)

LN10 = math.log(10.0)
ARPA_BOS_LOGPROB = -99.0


class Vocabulary:
    """Word/id map.  Ids 0, 1, 2 are ``<unk>``, ``<s>``, ``</s>``; the rest are
    the regular words in sorted order."""

    def __init__(self, words=()):
        regular = sorted(set(words) - set(RESERVED))
        self.words = list(RESERVED) + regular
        self.index = {w: i for i, w in enumerate(self.words)}

    unk_id = 0
    bos_id = 1
    eos_id = 2

    @classmethod
    def from_corpus(cls, corpus):
        return cls(w for utt in corpus for w in utt)

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.words == other.words

    def __hash__(self):
        return hash(tuple(self.words))

    def __contains__(self, word):
        return word in self.index

    def id(self, word):
        return self.index.get(word, self.unk_id)

    def encode(self, tokens):
        return [self.id(w) for w in tokens]

    def decode(self, ids):
        return [self.words[i] for i in ids]

    @property
    def regular_ids(self):
        return range(3, len(self.words))

    @property
    def target_ids(self):
        """Ids that can be predicted: everything except ``<s>``."""
        return [i for i in range(len(self.words)) if i != self.bos_id]

    def digest(self):
        return hashlib.sha256("\n".join(self.words).encode("utf-8")).digest()[:8]

    def symbol_table(self):
        """FST label table; word id ``i`` maps to label ``i + 2``."""
        return SymbolTable(self.words)


def word_label(word_id):
    return word_id + 2


def label_word(label):
    return label - 2


@dataclass
class NGramModel:
    order: int
    vocab: Vocabulary
    logprob: dict = field(default_factory=dict)
    backoff: dict = field(default_factory=dict)

    def prob(self, history, word):
        """Natural-log P(word | history) by the backoff recursion."""
        if word == self.vocab.bos_id:
            raise ConfigError("<s> is never a prediction target")
        h = tuple(history[-(self.order - 1):]) if self.order > 1 else ()
        total = 0.0
        while True:
            lp = self.logprob.get(h + (word,))
            if lp is not None:
                return total + lp
            if not h:
                # every target has a unigram entry; this only triggers for ids outside the vocab
                raise ConfigError(f"word id {word} has no unigram entry")
            total += self.backoff.get(h, 0.0)
            h = h[1:]

    def sentence_logprob(self, words):
        """Log probability of ``<s> words </s>`` (``<s>`` not predicted)."""
        hist = (self.vocab.bos_id,)
        total = 0.0
        for w in list(words) + [self.vocab.eos_id]:
            total += self.prob(hist, w)
            hist = hist + (w,)
        return total

    def num_ngrams(self, order=None):
        if order is None:
            return len(self.logprob)
        return sum(1 for k in self.logprob if len(k) == order)

    def histories(self):
        """Histories with at least one explicit continuation."""
        return sorted({k[:-1] for k in self.logprob if len(k) > 1}, key=lambda h: (len(h), h))

    def continuations(self):
        cont = defaultdict(list)
        for k in self.logprob:
            if len(k) > 1:
                cont[k[:-1]].append(k[-1])
        return cont

    def copy(self):
        return NGramModel(self.order, self.vocab, dict(self.logprob), dict(self.backoff))


def _count(corpus, order, vocab):
    counts = [defaultdict(lambda: defaultdict(int)) for _ in range(order + 1)]
    for utt in corpus:
        toks = [vocab.bos_id] + vocab.encode(utt) + [vocab.eos_id]
        for i in range(1, len(toks)):
            for k in range(1, order + 1):
                if i - k + 1 < 0:
                    break
                counts[k][tuple(toks[i - k + 1:i])][toks[i]] += 1
    return counts


def train(corpus, order, vocab=None, smoothing="witten-bell"):
    """Estimate an interpolated Witten-Bell backoff model.

    Each utterance (a token list) is framed as ``<s> ... </s>``.  The unigram
    level interpolates with the uniform distribution over all targets, so
    ``<unk>`` and unseen words keep nonzero mass.
    """
    if smoothing != "witten-bell":
        raise ConfigError(f"unsupported smoothing {smoothing!r}")
    if order < 1:
        raise ConfigError("order must be >= 1")
    corpus = [list(u) for u in corpus]
    if not corpus:
        raise ConfigError("empty training corpus")
    vocab = vocab if vocab is not None else Vocabulary.from_corpus(corpus)
    counts = _count(corpus, order, vocab)
    m = NGramModel(order, vocab)

    targets = vocab.target_ids
    uni = counts[1][()]
    n_tok = sum(uni.values())
    n_typ = len(uni)
    for w in targets:
        m.logprob[(w,)] = math.log((uni.get(w, 0) + n_typ / len(targets)) / (n_tok + n_typ))

    for k in range(2, order + 1):
        for h in sorted(counts[k]):
            follow = counts[k][h]
            c_h = sum(follow.values())
            t_h = len(follow)
            for w in sorted(follow):
                lower = math.exp(m.prob(h[1:], w))
                m.logprob[h + (w,)] = math.log((follow[w] + t_h * lower) / (c_h + t_h))
            m.backoff[h] = math.log(t_h / (c_h + t_h))
    return m


def _history_logprob(m, h):
    """Log probability of a history prefix, with a leading ``<s>`` taken as given."""
    if not h:
        return 0.0
    start = 1 if h[0] == m.vocab.bos_id else 0
    total = 0.0
    for i in range(start, len(h)):
        total += m.prob(h[:i], h[i])
    return total


def _recompute_backoff(m, h, kept):
    s_h = sum(math.exp(m.logprob[h + (w,)]) for w in kept)
    s_l = sum(math.exp(m.prob(h[1:], w)) for w in kept)
    if not kept:
        m.backoff.pop(h, None)
        return
    m.backoff[h] = math.log(max(1.0 - s_h, 1e-300)) - math.log(max(1.0 - s_l, 1e-300))


def prune(m, threshold):
    """Relative-entropy pruning of explicit n-grams of order >= 2.

    An n-gram is dropped when replacing it by its backoff estimate raises the
    model's relative entropy by less than ``threshold``.  Orders are processed
    from the highest down; an n-gram that is still the history of a kept
    longer n-gram is never dropped.  ``threshold <= 0`` leaves the model as is.
    """
    out = m.copy()
    if threshold <= 0 or m.order < 2:
        return out
    for k in range(m.order, 1, -1):
        cont = defaultdict(list)
        for key in out.logprob:
            if len(key) == k:
                cont[key[:-1]].append(key[-1])
        protected = {key[:-1] for key in out.logprob if len(key) == k + 1}
        removals = {}
        for h in sorted(cont):
            words = sorted(cont[h])
            p_h = math.exp(_history_logprob(out, h))
            ps = {w: math.exp(out.logprob[h + (w,)]) for w in words}
            pls = {w: math.exp(out.prob(h[1:], w)) for w in words}
            s_h = sum(ps.values())
            s_l = sum(pls.values())
            log_alpha = math.log(max(1.0 - s_h, 1e-300)) - math.log(max(1.0 - s_l, 1e-300))
            drop = []
            for w in words:
                if h + (w,) in protected:
                    continue
                p, pl = ps[w], pls[w]
                log_alpha_new = (math.log(max(1.0 - s_h + p, 1e-300))
                                 - math.log(max(1.0 - s_l + pl, 1e-300)))
                delta = -p_h * (p * (log_alpha_new + math.log(pl) - math.log(p))
                                + (1.0 - s_h) * (log_alpha_new - log_alpha))
                if delta < threshold:
                    drop.append(w)
            if drop:
                removals[h] = drop
        for h, drop in removals.items():
            for w in drop:
                del out.logprob[h + (w,)]
            kept = [w for w in cont[h] if w not in set(drop)]
            _recompute_backoff(out, h, kept)
    # lower orders changed after the higher ones were settled: refresh bottom-up
    cont = out.continuations()
    for h in sorted(set(cont) | set(out.backoff), key=lambda h: (len(h), h)):
        _recompute_backoff(out, h, cont.get(h, []))
    return out


def to_fst(m):
    """Compile to a backoff acceptor with phi arcs.

    One state per history with explicit continuations plus the empty history;
    a word arc costs ``-log P``; each non-empty history has a phi arc to its
    one-shorter suffix costing ``-backoff``; ``</s>`` becomes the final weight
    of every state.
    """
    vocab = m.vocab
    syms = vocab.symbol_table()
    fst = Wfst(syms)
    cont = m.continuations()
    listed = set(cont) | {h for h in m.backoff if len(h) < m.order}
    hist_states = [()] + sorted(listed - {()}, key=lambda h: (len(h), h))
    ids = {}
    for h in hist_states:
        ids[h] = fst.add_state()

    def state_for(seq):
        seq = tuple(seq[-(m.order - 1):]) if m.order > 1 else ()
        while seq not in ids:
            seq = seq[1:]
        return ids[seq]

    fst.set_start(state_for((vocab.bos_id,)))
    for h in hist_states:
        src = ids[h]
        words = vocab.target_ids if not h else sorted(cont.get(h, ()))
        for w in words:
            lp = m.logprob.get(h + (w,))
            if w == vocab.eos_id or lp is None:
                continue
            fst.add_arc(src, word_label(w), word_label(w), -lp, state_for(h + (w,)))
        if h:
            fst.add_arc(src, PHI, PHI, -m.backoff.get(h, 0.0), state_for(h[1:]))
        fst.set_final(src, -m.prob(h, vocab.eos_id))
    return fst


def write_arpa(m):
    """Serialize in ARPA format (log10 values)."""
    vocab = m.vocab
    by_order = defaultdict(list)
    for key, lp in m.logprob.items():
        by_order[len(key)].append((key, lp))
    by_order[1].append(((vocab.bos_id,), None))
    lines = ["\\data\\"]
    for k in range(1, m.order + 1):
        lines.append(f"ngram {k}={len(by_order[k])}")
    for k in range(1, m.order + 1):
        lines.append("")
        lines.append(f"\\{k}-grams:")
        for key, lp in sorted(by_order[k], key=lambda e: e[0]):
            p10 = ARPA_BOS_LOGPROB if lp is None else lp / LN10
            row = f"{p10:.10f}\t{' '.join(vocab.words[i] for i in key)}"
            if key in m.backoff:
                row += f"\t{m.backoff[key] / LN10:.10f}"
            lines.append(row)
    lines.append("")
    lines.append("\\end\\")
    return "\n".join(lines) + "\n"


def read_arpa(text):
    """Parse ARPA text; raise :class:`ArpaFormatError` with a line number on
    malformed input."""
    lines = text.splitlines()
    i = 0
    while i < len(lines) and not lines[i].strip():
        i += 1
    if i >= len(lines) or lines[i].strip() != "\\data\\":
        raise ArpaFormatError("missing \\data\\ header", i + 1)
    i += 1
    declared = {}
    while i < len(lines) and lines[i].strip().startswith("ngram "):
        line = lines[i].strip()
        try:
            k, n = line[len("ngram "):].split("=")
            declared[int(k)] = int(n)
        except ValueError:
            raise ArpaFormatError(f"bad count line {line!r}", i + 1) from None
        i += 1
    if not declared:
        raise ArpaFormatError("no ngram counts in \\data\\ section", i + 1)
    order = max(declared)
    if sorted(declared) != list(range(1, order + 1)):
        raise ArpaFormatError("ngram counts must cover orders 1..N", i)

    entries = {}
    k = None
    ended = False
    for j in range(i, len(lines)):
        line = lines[j].strip()
        if not line:
            continue
        if line == "\\end\\":
            ended = True
            break
        if line.startswith("\\") and line.endswith("-grams:"):
            try:
                k = int(line[1:-len("-grams:")])
            except ValueError:
                raise ArpaFormatError(f"bad section header {line!r}", j + 1) from None
            if k not in declared:
                raise ArpaFormatError(f"section \\{k}-grams: not declared in header", j + 1)
            entries[k] = []
            continue
        if k is None:
            raise ArpaFormatError("n-gram entry outside any section", j + 1)
        parts = line.split("\t") if "\t" in line else line.split()
        if "\t" in line:
            words = parts[1].split() if len(parts) > 1 else []
            bow = parts[2] if len(parts) > 2 else None
        else:
            words = parts[1:1 + k]
            bow = parts[1 + k] if len(parts) > 1 + k else None
        if len(words) != k:
            raise ArpaFormatError(f"expected {k} words in a {k}-gram entry", j + 1)
        try:
            lp = float(parts[0])
            bo = float(bow) if bow is not None else None
        except ValueError:
            raise ArpaFormatError("non-numeric probability or backoff", j + 1) from None
        entries[k].append((j + 1, words, lp, bo))
    for n in range(1, order + 1):
        if n not in entries:
            raise ArpaFormatError(f"missing section \\{n}-grams:", len(lines))
        if len(entries[n]) != declared[n]:
            raise ArpaFormatError(f"\\{n}-grams: has {len(entries[n])} entries, header declares "
                                  f"{declared[n]}", len(lines))
    if not ended:
        raise ArpaFormatError("missing \\end\\ section", len(lines))

    vocab = Vocabulary(w for _, words, _, _ in entries[1] for w in words)
    m = NGramModel(order, vocab)
    for n in range(1, order + 1):
        for lineno, words, lp, bo in entries[n]:
            key = tuple(vocab.index[w] if w in vocab.index else None for w in words)
            if None in key:
                raise ArpaFormatError(f"word not in unigram section: {' '.join(words)}", lineno)
            if n > 1 and key[:-1] not in m.backoff and key[:-1] not in m.logprob \
                    and key[:-1] != (vocab.bos_id,):
                raise ArpaFormatError(f"history of {' '.join(words)} is not listed", lineno)
            if key != (vocab.bos_id,):
                m.logprob[key] = lp * LN10
            if bo is not None:
                m.backoff[key] = bo * LN10
    return m
