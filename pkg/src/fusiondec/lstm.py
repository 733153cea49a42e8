"""LSTM language model in numpy: forward stepping, normalized and
self-normalized scoring, BPTT training with cross-entropy or NCE, gradient
checking, context initialization and a binary checkpoint format.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, InputError, TrainingDivergenceError
from .ngram import Vocabulary

BOS_ID = Vocabulary.bos_id
EOS_ID = Vocabulary.eos_id

CHECKPOINT_MAGIC = b"FDLSTM\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass
class LstmConfig:
    vocab_size: int
    embed_dim: int = 16
    hidden_dim: int = 32
    num_layers: int = 1
    seed: int = 0
    objective: str = "cross-entropy"   # or "nce"
    nce_k: int = 10
    learning_rate: float = 0.1
    epochs: int = 10
    bptt: int = 32
    clip_norm: float = 5.0
    init_scale: float = 0.1

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_dim, self.num_layers) < 1:
            raise ConfigError("all LSTM dimensions must be >= 1")
        if self.objective not in ("cross-entropy", "nce"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.nce_k < 1:
            raise ConfigError("nce_k must be >= 1")
        if self.bptt < 1:
            raise ConfigError("bptt must be >= 1")


@dataclass(frozen=True, eq=False)
class LmHistoryState:
    """Recurrent state after consuming ``history``.

    ``h`` and ``c`` have shape (layers, hidden); ``s`` is the final-layer
    output of the last step, or None for the zero state.
    """

    h: np.ndarray
    c: np.ndarray
    s: np.ndarray = None
    history: tuple = ()

    def same_as(self, other):
        if (self.s is None) != (other.s is None):
            return False
        return (np.array_equal(self.h, other.h) and np.array_equal(self.c, other.c)
                and (self.s is None or np.array_equal(self.s, other.s))
                and self.history == other.history)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logsumexp(x):
    m = np.max(x)
    return m + np.log(np.sum(np.exp(x - m)))


def _target_lse(logits):
    """Log partition over prediction targets; ``<s>`` is never one."""
    return _logsumexp(np.delete(logits, BOS_ID))


def _param_names(num_layers):
    names = ["embed"]
    for layer in range(num_layers):
        names += [f"W{layer}", f"b{layer}"]
    return names + ["out_w", "out_b"]


class LstmModel:
    """Parameters: ``embed`` (V, E); per layer ``W{l}`` (in + H, 4H) and
    ``b{l}`` (4H,) with gate blocks ordered input, forget, cell, output;
    ``out_w`` (V, H) and ``out_b`` (V,)."""

    def __init__(self, config, params=None):
        self.config = config
        if params is None:
            params = self._init_params()
        self.params = params
        self._check_shapes()

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        V, E, H, s = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.init_scale
        p = {"embed": rng.uniform(-s, s, (V, E))}
        for layer in range(cfg.num_layers):
            n_in = E if layer == 0 else H
            p[f"W{layer}"] = rng.uniform(-s, s, (n_in + H, 4 * H))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            p[f"b{layer}"] = b
        p["out_w"] = rng.uniform(-s, s, (V, H))
        p["out_b"] = np.zeros(V)
        return p

    def _check_shapes(self):
        cfg = self.config
        V, E, H = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim
        expected = {"embed": (V, E), "out_w": (V, H), "out_b": (V,)}
        for layer in range(cfg.num_layers):
            expected[f"W{layer}"] = ((E if layer == 0 else H) + H, 4 * H)
            expected[f"b{layer}"] = (4 * H,)
        if set(self.params) != set(expected):
            raise ConfigError(f"parameter set {sorted(self.params)} does not match config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    @property
    def param_names(self):
        return _param_names(self.config.num_layers)

    @property
    def vocab_size(self):
        return self.config.vocab_size

    def copy(self):
        return LstmModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def zero_state(self):
        L, H = self.config.num_layers, self.config.hidden_dim
        return LmHistoryState(np.zeros((L, H)), np.zeros((L, H)), None, ())

    def _check_word(self, word):
        if not 0 <= word < self.config.vocab_size:
            raise InputError(f"word id {word} out of range [0, {self.config.vocab_size})")

    def forward_batch(self, states, words):
        """Advance each state by its word; one matrix product per layer."""
        for w in words:
            self._check_word(w)
        if not states:
            return []
        p = self.params
        H = self.config.hidden_dim
        h = np.stack([st.h for st in states])          # (B, L, H)
        c = np.stack([st.c for st in states])
        x = p["embed"][np.asarray(words)]
        new_h = np.empty_like(h)
        new_c = np.empty_like(c)
        for layer in range(self.config.num_layers):
            z = np.concatenate([x, h[:, layer]], axis=1) @ p[f"W{layer}"] + p[f"b{layer}"]
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = _sigmoid(z[:, 3 * H:])
            cl = f * c[:, layer] + i * g
            hl = o * np.tanh(cl)
            new_c[:, layer] = cl
            new_h[:, layer] = hl
            x = hl
        return [LmHistoryState(new_h[b], new_c[b], new_h[b, -1], st.history + (int(w),))
                for b, (st, w) in enumerate(zip(states, words))]

    def forward_step(self, state, word):
        return self.forward_batch([state], [word])[0]

    def forward_sequence(self, state, words):
        for w in words:
            state = self.forward_step(state, w)
        return state

    def logits(self, state):
        if state.s is None:
            raise ContractError("state has no output yet; feed <s> first")
        return self.params["out_w"] @ state.s + self.params["out_b"]

    def log_partition(self, state):
        return float(_target_lse(self.logits(state)))

    def score(self, state, word, normalized=True):
        """Log probability of ``word`` (normalized) or its raw logit."""
        if word == BOS_ID:
            raise ContractError("<s> is never a prediction target")
        self._check_word(word)
        logits = self.logits(state)
        if normalized:
            return float(logits[word] - _target_lse(logits))
        return float(logits[word])

    # -- training -------------------------------------------------------

    def _forward_train(self, h0, c0, inputs):
        """Run a chunk from (h0, c0), keeping what backprop needs."""
        p = self.params
        H, L = self.config.hidden_dim, self.config.num_layers
        steps = []
        h_prev, c_prev = h0.copy(), c0.copy()
        for w in inputs:
            x = p["embed"][w]
            layers = []
            h_new, c_new = np.empty_like(h_prev), np.empty_like(c_prev)
            for layer in range(L):
                xin = np.concatenate([x, h_prev[layer]])
                z = xin @ p[f"W{layer}"] + p[f"b{layer}"]
                i = _sigmoid(z[:H])
                f = _sigmoid(z[H:2 * H])
                g = np.tanh(z[2 * H:3 * H])
                o = _sigmoid(z[3 * H:])
                c = f * c_prev[layer] + i * g
                tc = np.tanh(c)
                h = o * tc
                layers.append((xin, i, f, g, o, c_prev[layer], tc))
                h_new[layer], c_new[layer] = h, c
                x = h
            steps.append((w, layers, h_new[-1].copy()))
            h_prev, c_prev = h_new, c_new
        return steps, h_prev, c_prev

    def _backward(self, steps, dlogit_fn):
        """BPTT over ``steps``.  ``dlogit_fn(t, s)`` returns (loss, rows, dlogits):
        the loss at step t and its gradient w.r.t. the logits of ``rows``."""
        p = self.params
        H, L = self.config.hidden_dim, self.config.num_layers
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        loss = 0.0
        dh_next = np.zeros((L, H))
        dc_next = np.zeros((L, H))
        for t in range(len(steps) - 1, -1, -1):
            w, layers, s = steps[t]
            lt, rows, dl = dlogit_fn(t, s)
            loss += lt
            np.add.at(grads["out_w"], rows, np.outer(dl, s))
            np.add.at(grads["out_b"], rows, dl)
            dabove = p["out_w"][rows].T @ dl
            for layer in range(L - 1, -1, -1):
                xin, i, f, g, o, c_prev, tc = layers[layer]
                dh = dabove + dh_next[layer]
                dc = dc_next[layer] + dh * o * (1.0 - tc * tc)
                dz = np.concatenate([dc * g * i * (1.0 - i),
                                     dc * c_prev * f * (1.0 - f),
                                     dc * i * (1.0 - g * g),
                                     dh * tc * o * (1.0 - o)])
                grads[f"W{layer}"] += np.outer(xin, dz)
                grads[f"b{layer}"] += dz
                dxin = p[f"W{layer}"] @ dz
                n_in = xin.shape[0] - H
                dc_next[layer] = dc * f
                dh_next[layer] = dxin[n_in:]
                dabove = dxin[:n_in]
            grads["embed"][w] += dabove
        return loss, grads

    def ce_loss_and_grads(self, h0, c0, inputs, targets):
        steps, h, c = self._forward_train(h0, c0, inputs)
        out_w, out_b = self.params["out_w"], self.params["out_b"]
        all_rows = np.arange(self.config.vocab_size)

        def dlogit(t, s):
            if targets[t] < 0:
                return 0.0, all_rows[:0], np.zeros(0)
            logits = out_w @ s + out_b
            lse = _target_lse(logits)
            probs = np.exp(logits - lse)
            probs[BOS_ID] = 0.0
            probs[targets[t]] -= 1.0
            return lse - logits[targets[t]], all_rows, probs

        loss, grads = self._backward(steps, dlogit)
        return loss, grads, h, c

    def nce_loss_and_grads(self, h0, c0, inputs, targets, noise, log_kq):
        """Binary NCE: data vs ``k`` unigram noise draws per position, with the
        raw logit used directly as the model log probability."""
        steps, h, c = self._forward_train(h0, c0, inputs)
        out_w, out_b = self.params["out_w"], self.params["out_b"]

        def dlogit(t, s):
            if targets[t] < 0:
                return 0.0, np.zeros(0, dtype=np.int64), np.zeros(0)
            rows = np.concatenate([[targets[t]], noise[t]])
            delta = out_w[rows] @ s + out_b[rows] - log_kq[rows]
            sig = _sigmoid(delta)
            # -log sigma(d) for the datum, -log(1 - sigma(d)) for noise
            loss = np.logaddexp(0.0, -delta[0]) + np.sum(np.logaddexp(0.0, delta[1:]))
            dl = sig.copy()
            dl[0] -= 1.0
            return loss, rows, dl

        loss, grads = self._backward(steps, dlogit)
        return loss, grads, h, c

    # -- checkpoint ------------------------------------------------------

    def save(self, path, vocab=None):
        """Header: magic, version, (V, E, H, L), 8-byte vocab digest; then
        every parameter as little-endian float64 in ``param_names`` order."""
        cfg = self.config
        digest = vocab.digest() if vocab is not None else b"\x00" * 8
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I4I", CHECKPOINT_VERSION, cfg.vocab_size, cfg.embed_dim,
                                cfg.hidden_dim, cfg.num_layers))
            f.write(digest)
            for name in self.param_names:
                f.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, config=None, vocab=None):
        with open(path, "rb") as f:
            data = f.read()
        if data[:8] != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not an LSTM checkpoint")
        version, V, E, H, L = struct.unpack_from("<I4I", data, 8)
        if version != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        digest = data[28:36]
        if config is None:
            config = LstmConfig(vocab_size=V, embed_dim=E, hidden_dim=H, num_layers=L)
        elif (config.vocab_size, config.embed_dim, config.hidden_dim, config.num_layers) != (V, E, H, L):
            raise ConfigError(f"{path}: checkpoint dims {(V, E, H, L)} differ from config")
        if vocab is not None and digest != b"\x00" * 8 and digest != vocab.digest():
            raise ConfigError(f"{path}: checkpoint was trained with a different vocabulary")
        offset = 36
        params = {}
        shapes = {"embed": (V, E), "out_w": (V, H), "out_b": (V,)}
        for layer in range(L):
            shapes[f"W{layer}"] = ((E if layer == 0 else H) + H, 4 * H)
            shapes[f"b{layer}"] = (4 * H,)
        for name in _param_names(L):
            n = int(np.prod(shapes[name]))
            if offset + 8 * n > len(data):
                raise InputError(f"{path}: truncated checkpoint at {name}")
            params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shapes[name]).copy()
            offset += 8 * n
        if offset != len(data):
            raise InputError(f"{path}: {len(data) - offset} trailing bytes")
        return cls(config, params)


def frame_utterance(words):
    """(inputs, targets) for ``<s> words </s>``."""
    seq = [BOS_ID] + list(words) + [EOS_ID]
    return seq[:-1], seq[1:]


def session_stream(utterances, include_trailing_sentence_start=True):
    """(inputs, targets) for a whole session read as one stream, the same
    token sequence context initialization feeds.  Positions whose target is
    the next ``<s>`` carry target -1 (no loss)."""
    inputs, targets = [], []
    for k, words in enumerate(utterances):
        if k > 0 and include_trailing_sentence_start:
            inputs += [EOS_ID, BOS_ID]
            targets.append(-1)
        else:
            inputs.append(EOS_ID if k > 0 else BOS_ID)
        seq = list(words) + [EOS_ID]
        targets.extend(seq)
        inputs.extend(seq[:-1])
    return inputs, targets


def _clip(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def unigram_noise(corpus, vocab_size):
    counts = np.ones(vocab_size)   # add-one, so every target is sampled sometimes
    for words in corpus:
        for w in list(words) + [EOS_ID]:
            counts[w] += 1
    counts[BOS_ID] = 0.0
    return counts / counts.sum()


def train(model, corpus, cfg=None, sessions=False):
    """Plain SGD, one sequence at a time, state reset to zero per sequence.

    ``corpus`` holds word-id sequences without boundary tokens.  With
    ``sessions`` each item is instead a list of such utterances, trained as
    one stream (see :func:`session_stream`) so the model learns to use the
    carried-over state.  Returns the trained copy and the mean per-token
    training loss of each epoch.
    """
    cfg = cfg if cfg is not None else model.config
    if sessions:
        streams = [session_stream([list(u) for u in sess]) for sess in corpus if sess]
        flat = [list(u) for sess in corpus for u in sess]
    else:
        streams = [frame_utterance(u) for u in corpus]
        flat = [list(u) for u in corpus]
    if not streams:
        raise InputError("empty training corpus")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed + 1)
    if cfg.objective == "nce":
        q = unigram_noise(flat, model.vocab_size)
        log_kq = np.log(cfg.nce_k * np.maximum(q, 1e-300))
    trace = []
    for epoch in range(cfg.epochs):
        total, n_tok = 0.0, 0
        for u in rng.permutation(len(streams)):
            inputs, targets = streams[u]
            state = model.zero_state()
            h, c = state.h, state.c
            for start in range(0, len(inputs), cfg.bptt):
                xs, ys = inputs[start:start + cfg.bptt], targets[start:start + cfg.bptt]
                if cfg.objective == "nce":
                    noise = rng.choice(model.vocab_size, size=(len(xs), cfg.nce_k), p=q)
                    loss, grads, h, c = model.nce_loss_and_grads(h, c, xs, ys, noise, log_kq)
                else:
                    loss, grads, h, c = model.ce_loss_and_grads(h, c, xs, ys)
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(epoch)
                n_pred = sum(1 for y in ys if y >= 0)
                total += loss
                n_tok += n_pred
                if cfg.learning_rate == 0 or n_pred == 0:
                    continue
                for g in grads.values():
                    g /= n_pred
                _clip(grads, cfg.clip_norm)
                for name, g in grads.items():
                    model.params[name] -= cfg.learning_rate * g
        mean = total / n_tok
        if not np.isfinite(mean):
            raise TrainingDivergenceError(epoch)
        trace.append(float(mean))
    return model, trace


def sequence_loss(model, batch):
    """Summed cross-entropy of ``<s> u </s>`` over the batch, zero initial state."""
    total = 0.0
    for words in batch:
        inputs, targets = frame_utterance(words)
        z = model.zero_state()
        steps, _, _ = model._forward_train(z.h, z.c, inputs)
        for (_, _, s), y in zip(steps, targets):
            logits = model.params["out_w"] @ s + model.params["out_b"]
            total += _target_lse(logits) - logits[y]
    return total


def analytic_gradients(model, batch):
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for words in batch:
        inputs, targets = frame_utterance(words)
        z = model.zero_state()
        _, g, _, _ = model.ce_loss_and_grads(z.h, z.c, inputs, targets)
        for k in grads:
            grads[k] += g[k]
    return grads


def finite_difference_gradients(model, batch, step=1e-5):
    """Central differences of :func:`sequence_loss` for every parameter."""
    model = model.copy()
    out = {}
    for name in model.param_names:
        flat = model.params[name].reshape(-1)
        num = np.zeros(flat.size)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp = sequence_loss(model, batch)
            flat[idx] = orig - step
            lm = sequence_loss(model, batch)
            flat[idx] = orig
            num[idx] = (lp - lm) / (2 * step)
        out[name] = num.reshape(model.params[name].shape)
    return out


def gradient_errors(model, batch, step=1e-5, elementwise=False):
    """Per-group relative error between BPTT and central differences.

    The default is the vector form ``|a - n| / (|a| + |n|)`` (2-norms) per
    parameter group.  ``elementwise`` instead returns the worst entry of
    ``|a - n| / max(|a| + |n|, 1e-6)``; entries much smaller than the
    difference quotient's roundoff (about ``eps * loss / step``) are noise
    there, so that form is a diagnostic rather than the check.
    """
    batch = [list(b) for b in batch]
    if not batch:
        raise InputError("grad_check needs at least one sequence")
    analytic = analytic_gradients(model, batch)
    numeric = finite_difference_gradients(model, batch, step)
    errors = {}
    for name in model.param_names:
        a, n = analytic[name].reshape(-1), numeric[name].reshape(-1)
        if elementwise:
            errors[name] = float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6)))
        else:
            denom = np.linalg.norm(a) + np.linalg.norm(n)
            errors[name] = float(np.linalg.norm(a - n) / denom) if denom > 0 else 0.0
    return errors


def grad_check(model, batch, step=1e-5):
    """Max relative error over all parameters (double precision)."""
    return max(gradient_errors(model, batch, step).values())


def init_state_from_context(model, context, include_trailing_sentence_start=True):
    """State after reading prior utterances ``<s> u1 </s> ... <s> uK </s>``.

    With ``include_trailing_sentence_start`` one more ``<s>`` is fed, opening
    the current utterance; otherwise the current utterance is scored straight
    from the post-``</s>`` state.  Empty context gives the zero state.
    """
    state = model.zero_state()
    if not context:
        return state
    for utt in context:
        state = model.forward_sequence(state, [BOS_ID] + list(utt) + [EOS_ID])
    if include_trailing_sentence_start:
        state = model.forward_step(state, BOS_ID)
    return state


def scoring_state(model, context=(), include_trailing_sentence_start=True):
    """Context state that can score the first word of the current utterance."""
    state = init_state_from_context(model, context, include_trailing_sentence_start)
    if state.s is None:
        state = model.forward_step(state, BOS_ID)
    return state
