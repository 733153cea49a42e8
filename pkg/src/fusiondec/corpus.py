"""Synthetic conversations with cross-utterance topic structure, and
simulated acoustic frame costs.

Each session follows a sticky topic chain: utterance ``t`` keeps the topic
of utterance ``t - 1`` with probability ``topic_stickiness`` and otherwise
draws a fresh one.  Every word is a topic word with probability ``beta``
(the cue strength) and a background word otherwise, so recent utterances
predict the current one and older ones do so less.  ``beta = 0`` makes
utterances i.i.d.
"""

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import Lexicon
from .errors import ConfigError, InputError

FRAMES_MAGIC = b"FDFRM\x00\x00\x01"


@dataclass
class SimSpec:
    vocab_size: int = 30
    num_topics: int = 4
    topic_size: int = 5
    sessions: int = 100
    utterances_per_session: int = 8
    mean_utterance_length: float = 5.0
    beta: float = 0.8
    topic_stickiness: float = 0.9
    zipf_exponent: float = 1.0
    alphabet: str = "abcdef"
    max_word_length: int = 3
    noise: float = 2.5            # sigma: std of the Gaussian logit noise
    margin: float = 4.0           # logit advantage of the true symbol
    frames_per_symbol: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.num_topics * self.topic_size > self.vocab_size:
            raise ConfigError("topics need num_topics * topic_size <= vocab_size words")
        if self.frames_per_symbol < 1:
            raise ConfigError("frames_per_symbol must be >= 1")
        if self.vocab_size < 2 or self.vocab_size > len(self.alphabet) ** self.max_word_length:
            raise ConfigError("vocab_size must fit a prefix-free code over the alphabet")


@dataclass
class Utterance:
    utt_id: str
    order: int
    tokens: list

    @property
    def text(self):
        return " ".join(self.tokens)


@dataclass
class Conversation:
    session: str
    utterances: list = field(default_factory=list)
    speaker: str = None

    def __post_init__(self):
        for i, u in enumerate(self.utterances):
            if u.order != i:
                raise InputError(f"session {self.session}: order indices must run 0..n-1")
            if not u.tokens:
                raise InputError(f"session {self.session}: utterance {i} is empty")


@dataclass
class World:
    """The generator's fixed inventory: words, background and topic distributions."""

    words: list
    background: np.ndarray
    topics: list


def prefix_free_words(n, alphabet, max_length, rng):
    """``n`` distinct spellings, none a prefix of another, grown as the leaves
    of a random tree so a noiseless symbol string segments uniquely."""
    leaves = [""]
    while len(leaves) < n or "" in leaves:
        open_leaves = [w for w in leaves if len(w) < max_length]
        if not open_leaves:
            raise ConfigError("alphabet/max_word_length cannot hold the vocabulary")
        shortest = min(len(w) for w in open_leaves)
        pool = [w for w in open_leaves if len(w) <= shortest + 1]
        leaf = pool[int(rng.integers(len(pool)))]
        if leaf:
            k = max(2, min(len(alphabet), n - len(leaves) + 1))
        else:
            k = min(len(alphabet), n)
        kids = [leaf + ch for ch in rng.choice(list(alphabet), size=k, replace=False)]
        leaves.remove(leaf)
        leaves.extend(kids)
    return sorted(leaves)


def make_world(spec):
    rng = np.random.default_rng([spec.seed, 0])
    words = prefix_free_words(spec.vocab_size, spec.alphabet, spec.max_word_length, rng)
    ranks = rng.permutation(spec.vocab_size) + 1
    bg = ranks.astype(float) ** -spec.zipf_exponent
    bg /= bg.sum()
    perm = rng.permutation(spec.vocab_size)
    topics = []
    for z in range(spec.num_topics):
        members = perm[z * spec.topic_size:(z + 1) * spec.topic_size]
        dist = np.zeros(spec.vocab_size)
        dist[members] = 1.0 / spec.topic_size
        topics.append(dist)
    return World(words, bg, topics)


def gen_corpus(spec):
    """Deterministic list of :class:`Conversation` for ``spec``."""
    world = make_world(spec)
    rng = np.random.default_rng([spec.seed, 1])
    convs = []
    for s in range(spec.sessions):
        session = f"s{s:03d}"
        topic = int(rng.integers(spec.num_topics))
        utts = []
        for t in range(spec.utterances_per_session):
            if t > 0 and rng.random() >= spec.topic_stickiness:
                topic = int(rng.integers(spec.num_topics))
            dist = (1.0 - spec.beta) * world.background + spec.beta * world.topics[topic]
            length = 1 + int(rng.poisson(max(spec.mean_utterance_length - 1.0, 0.0)))
            ids = rng.choice(spec.vocab_size, size=length, p=dist)
            utts.append(Utterance(f"{session}-{t:03d}", t, [world.words[i] for i in ids]))
        convs.append(Conversation(session, utts))
    return convs


def lexicon_for(spec):
    return Lexicon.from_spellings(make_world(spec).words)


def _utt_seed(spec, key):
    return np.random.default_rng([spec.seed, 2, zlib.crc32(str(key).encode("utf-8"))])


def synth_frames(tokens, lex, spec, key=""):
    """(frames, symbols) cost matrix for ``tokens``.

    Each acoustic symbol spans ``frames_per_symbol`` frames; a frame's costs
    are ``-log softmax`` of logits that favour the true symbol by ``margin``
    plus Gaussian noise of scale ``noise``.  ``key`` (e.g. the utterance id)
    selects the noise stream.
    """
    oov = [t for t in tokens if t not in lex.prons]
    if oov:
        raise InputError(f"tokens not in lexicon: {' '.join(oov)}")
    n_sym = len(lex.phones) - 2
    truth = [lex.phones.find(p) - 2 for t in tokens for p in lex.prons[t]]
    rng = _utt_seed(spec, key)
    n_frames = len(truth) * spec.frames_per_symbol
    logits = np.zeros((n_frames, n_sym))
    logits[np.arange(n_frames), np.repeat(truth, spec.frames_per_symbol)] = spec.margin
    if spec.noise > 0:
        logits += spec.noise * rng.standard_normal(logits.shape)
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return lse - logits


def write_corpus_jsonl(convs, path):
    with open(path, "w", encoding="utf-8") as f:
        for conv in convs:
            for u in conv.utterances:
                f.write(json.dumps({"session": conv.session, "order": u.order,
                                    "text": u.text}, sort_keys=True) + "\n")


def read_corpus_jsonl(path):
    sessions = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, order, text = rec["session"], int(rec["order"]), rec["text"]
            except (ValueError, KeyError, TypeError):
                raise InputError(f"{path}:{lineno}: expected session/order/text fields") from None
            sessions.setdefault(sid, []).append((order, text.split()))
    convs = []
    for sid in sessions:
        utts = sorted(sessions[sid])
        convs.append(Conversation(sid, [Utterance(f"{sid}-{o:03d}", o, toks) for o, toks in utts]))
    return convs


def symbols_hash(table):
    return hashlib.sha256("\n".join(table.symbols).encode("utf-8")).digest()[:8]


def write_frames(frames, path, phones):
    frames = np.ascontiguousarray(frames, dtype="<f8")
    with open(path, "wb") as f:
        f.write(FRAMES_MAGIC)
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(symbols_hash(phones))
        f.write(frames.tobytes())


def read_frames(path, phones=None):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != FRAMES_MAGIC:
        raise InputError(f"{path}: not a frame-matrix file")
    rows, cols = struct.unpack_from("<II", data, 8)
    digest = data[16:24]
    if phones is not None and digest != symbols_hash(phones):
        raise InputError(f"{path}: frames were made for a different acoustic symbol table")
    if len(data) != 24 + 8 * rows * cols:
        raise InputError(f"{path}: size does not match header ({rows}x{cols})")
    return np.frombuffer(data, dtype="<f8", offset=24).reshape(rows, cols).copy()


def spec_dict(spec):
    return asdict(spec)
