"""Perplexity under a cross-utterance context protocol, WER, and the driver
that runs first-pass vs second-pass decoding across context protocols.
"""

import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .decoder import DecodeConfig, decode, rescore_nbest
from .errors import ConfigError, InputError
from .fusion import FusionConfig, FusionScorer
from .lstm import LstmModel, init_state_from_context, scoring_state
from .ngram import NGramModel

INF = math.inf
REPORT_SCHEMA_VERSION = 1
PPL_ACCOUNTING = "predicted tokens = every word plus </s> per utterance; <s> never predicted"
SCORE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ContextProtocol:
    k: float = 0                        # number of history utterances; inf = all
    source: str = "reference"           # or "hypothesis"
    include_trailing_bos: bool = True
    shuffle: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("reference", "hypothesis"):
            raise ConfigError(f"unknown history source {self.source!r}")
        if not (self.k == INF or (self.k >= 0 and int(self.k) == self.k)):
            raise ConfigError("k must be a non-negative integer or inf")

    @property
    def k_label(self):
        return "inf" if self.k == INF else str(int(self.k))

    @property
    def s_flag(self):
        return "w/ <s>" if self.include_trailing_bos else "w/o <s>"

    @property
    def label(self):
        shuf = ",shuf" if self.shuffle else ""
        return f"k={self.k_label},{self.source[:3]},{self.s_flag}{shuf}"

    def select(self, history, session, t):
        """The history utterances this protocol feeds for utterance ``t``."""
        if self.k == 0 or not history:
            return []
        chosen = list(history) if self.k == INF else list(history[-int(self.k):])
        if self.shuffle and len(chosen) > 1:
            rng = np.random.default_rng([self.seed, zlib.crc32(session.encode("utf-8")), t])
            chosen = [chosen[i] for i in rng.permutation(len(chosen))]
        return chosen


@dataclass
class WerStats:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self):
        if self.ref_words == 0:
            raise InputError("WER is undefined for an empty reference")
        return 100.0 * self.errors / self.ref_words

    def __add__(self, other):
        return WerStats(self.substitutions + other.substitutions, self.insertions + other.insertions,
                        self.deletions + other.deletions, self.ref_words + other.ref_words)

    def as_dict(self):
        return {"sub": self.substitutions, "ins": self.insertions, "del": self.deletions,
                "ref_words": self.ref_words, "wer": self.wer}


def wer(ref, hyp):
    """Levenshtein alignment with unit costs; among equal-cost alignments the
    backtrace prefers substitution, then insertion, then deletion."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise InputError("WER is undefined for an empty reference")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i, j - 1] + 1, d[i - 1, j] + 1)
    i, j = n, m
    stats = WerStats(ref_words=n)
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            stats.substitutions += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            stats.insertions += 1
            j -= 1
        else:
            stats.deletions += 1
            i -= 1
    return stats


def corpus_wer(pairs):
    total = WerStats()
    for ref, hyp in pairs:
        total = total + wer(ref, hyp)
    return total


# -- perplexity -------------------------------------------------------------

def _histories(conv, proto, hypotheses, vocab):
    if proto.source == "reference":
        return [vocab.encode(u.tokens) for u in conv.utterances]
    if hypotheses is None or conv.session not in hypotheses:
        raise InputError("hypothesis-source context needs decode results for every session")
    hyps = hypotheses[conv.session]
    if len(hyps) < len(conv.utterances) - 1:
        raise InputError(f"session {conv.session}: missing hypotheses for earlier utterances")
    return hyps


def utterance_logprob(model, words_ids, context_ids=(), include_trailing_bos=True, vocab=None):
    """(log probability, predicted tokens) of one utterance plus ``</s>``."""
    if isinstance(model, NGramModel):
        return model.sentence_logprob(words_ids), len(words_ids) + 1
    eos = vocab.eos_id if vocab is not None else 2
    state = scoring_state(model, list(context_ids), include_trailing_bos)
    total = 0.0
    for w in list(words_ids) + [eos]:
        total += model.score(state, w, normalized=True)
        if w != eos:
            state = model.forward_step(state, w)
    return total, len(words_ids) + 1


def perplexity(model, sessions, proto=None, vocab=None, hypotheses=None):
    """Corpus perplexity; each utterance's LSTM state is initialized from the
    protocol's history.  An n-gram model ignores the context entirely."""
    proto = proto if proto is not None else ContextProtocol()
    if vocab is None:
        if not isinstance(model, NGramModel):
            raise ConfigError("an LSTM perplexity needs the vocabulary")
        vocab = model.vocab
    total, count = 0.0, 0
    for conv in sessions:
        history = _histories(conv, proto, hypotheses, vocab) if proto.k != 0 else []
        for t, utt in enumerate(conv.utterances):
            ctx = proto.select(history[:t], conv.session, t)
            lp, n = utterance_logprob(model, vocab.encode(utt.tokens),
                                      ctx, proto.include_trailing_bos, vocab)
            total += lp
            count += n
    return math.exp(-total / count)


# -- experiment driver --------------------------------------------------------

@dataclass
class ExperimentModels:
    vocab: object
    lexicon: object
    g: NGramModel
    gp: NGramModel
    graph: object
    lstm: LstmModel


def _context_state(models, conv, t, hyps, proto):
    if models.lstm is None:
        return None
    vocab = models.vocab
    history = ([vocab.encode(u.tokens) for u in conv.utterances[:t]]
               if proto.source == "reference" else hyps[:t])
    ctx = proto.select(history, conv.session, t)
    return init_state_from_context(models.lstm, ctx, proto.include_trailing_bos)


def decode_session(models, conv, frames, proto, dcfg, fcfg=None):
    """First pass over one session in order.  ``fcfg=None`` decodes with the
    graph alone; otherwise the fused LM is applied on the fly with the LSTM
    state initialized from the protocol's history."""
    hyps, out = [], []
    for t, utt in enumerate(conv.utterances):
        scorer = None
        if fcfg is not None:
            state = _context_state(models, conv, t, hyps, proto)
            scorer = FusionScorer(models.g, models.gp, models.lstm, fcfg, initial_state=state)
        res = decode(models.graph, frames[utt.utt_id], scorer, dcfg)
        best = res.best
        hyps.append(list(best.words) if best else [])
        out.append({"utt": utt.utt_id, "words": hyps[-1],
                    "total": best.total if best else INF, "result": res})
    return out


def rescore_session(models, conv, base_nbest, proto, fcfg):
    """Second pass over one session: rescore each utterance's n-best with the
    fused LM under the protocol's context."""
    hyps, out = [], []
    for t, utt in enumerate(conv.utterances):
        state = _context_state(models, conv, t, hyps, proto)
        rescored = rescore_nbest(base_nbest[utt.utt_id], models.g, models.lstm, state, fcfg)
        best = rescored[0] if rescored else None
        hyps.append(list(best.words) if best else [])
        out.append({"utt": utt.utt_id, "words": hyps[-1], "total": best.total if best else INF,
                    "nbest": rescored})
    return out


def _baseline_session(models, conv, frames, dcfg):
    return {u.utt_id: decode(models.graph, frames[u.utt_id], None, dcfg).nbest
            for u in conv.utterances}


def _run_sessions(fn, args_list, jobs):
    if jobs and jobs > 1 and len(args_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, *zip(*args_list)))
    return [fn(*args) for args in args_list]


def _wer_of(corpus, results, vocab):
    pairs = []
    for conv, res in zip(corpus, results):
        for utt, r in zip(conv.utterances, res):
            pairs.append((utt.tokens, vocab.decode(r["words"])))
    return corpus_wer(pairs)


def run_context_experiment(corpus, models, frames, protocols, decode_cfg=None, fusion_cfg=None,
                           second_pass_nbest=100, jobs=1, config_echo=None):
    """Decode ``corpus`` under each protocol in both regimes and tabulate.

    First pass: fused decoding with the LSTM state initialized from the
    protocol's history.  Second pass: an n-best list from a pruned-n-gram-only
    first pass, rescored by the fused LM under the same context.  Hypothesis
    history is the previous utterances' 1-best of the same pass, in order.
    """
    dcfg = decode_cfg if decode_cfg is not None else DecodeConfig()
    fcfg = fusion_cfg if fusion_cfg is not None else FusionConfig()
    vocab = models.vocab
    base_cfg = DecodeConfig(dcfg.beam, dcfg.max_active, second_pass_nbest, dcfg.ngram_approx_n,
                            dcfg.frames_per_symbol)
    base = {}
    for part in _run_sessions(_baseline_session,
                              [(models, conv, frames, base_cfg) for conv in corpus], jobs):
        base.update(part)

    baseline_pairs = [(u.tokens, vocab.decode(base[u.utt_id][0].words) if base[u.utt_id] else [])
                      for conv in corpus for u in conv.utterances]
    rows = [{"table": "table1", "lm": "ngram-pruned", "pass": "1st", "k": "0",
             "source": "none", "s_flag": "", "wer": corpus_wer(baseline_pairs).wer}]
    rows.append({"table": "table2", "lm": "ngram", "pass": "", "k": "0", "source": "reference",
                 "s_flag": "", "ppl": perplexity(models.g, corpus)})
    details = {}
    for proto in protocols:
        odcfg = DecodeConfig(dcfg.beam, dcfg.max_active, dcfg.nbest, dcfg.ngram_approx_n,
                             dcfg.frames_per_symbol)
        first = _run_sessions(decode_session,
                              [(models, conv, frames, proto, odcfg, fcfg) for conv in corpus], jobs)
        second = _run_sessions(rescore_session,
                               [(models, conv, base, proto, fcfg) for conv in corpus], jobs)
        w1 = _wer_of(corpus, first, vocab)
        w2 = _wer_of(corpus, second, vocab)
        violations = 0
        per_utt = []
        for res1, res2 in zip(first, second):
            for a, b in zip(res1, res2):
                if a["total"] > b["total"] + SCORE_TOLERANCE:
                    violations += 1
                per_utt.append({"utt": a["utt"], "first_total": a["total"], "second_total": b["total"],
                                "first_words": vocab.decode(a["words"]),
                                "second_words": vocab.decode(b["words"])})
        hyp_map = {conv.session: [r["words"] for r in res] for conv, res in zip(corpus, first)}
        ppl = perplexity(models.lstm, corpus, proto, vocab, hypotheses=hyp_map)
        common = {"k": proto.k_label, "source": proto.source, "s_flag": proto.s_flag,
                  "shuffle": proto.shuffle}
        rows.append({"table": "table2", "lm": "lstm", "pass": "", **common, "ppl": ppl})
        rows.append({"table": "table3", "lm": "ngram+lstm", "pass": "1st", **common, "wer": w1.wer})
        rows.append({"table": "table4", "lm": "ngram+lstm", "pass": "1st", **common, "wer": w1.wer,
                     "dominance_violations": violations})
        rows.append({"table": "table4", "lm": "ngram+lstm", "pass": "2nd", **common, "wer": w2.wer})
        if proto.k == 0 and not proto.shuffle:
            rows.append({"table": "table1", "lm": "ngram+lstm", "pass": "1st", **common, "wer": w1.wer})
            rows.append({"table": "table1", "lm": "ngram+lstm", "pass": "2nd", **common, "wer": w2.wer})
        details[proto.label] = per_utt
    return {"schema_version": REPORT_SCHEMA_VERSION, "ppl_token_accounting": PPL_ACCOUNTING,
            "config": config_echo or {}, "rows": rows, "details": details}


def report_json(report):
    return json.dumps(_jsonable(report), sort_keys=True, indent=1)


def _jsonable(x):
    """Plain JSON types; infinities become the string ``"inf"``."""
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        x = x.item()
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x is None or isinstance(x, (bool, int, float, str)):
        return x
    raise TypeError(f"cannot serialize {type(x).__name__}")


def report_tsv(report):
    keys = ["table", "lm", "pass", "k", "source", "s_flag", "shuffle", "ppl", "wer",
            "dominance_violations"]
    lines = ["\t".join(keys)]
    for row in report["rows"]:
        vals = []
        for k in keys:
            v = row.get(k, "")
            vals.append(f"{v:.6f}" if isinstance(v, float) else str(v))
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"
