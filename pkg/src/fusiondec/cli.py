"""Command-line pipeline: ``fusiondec <subcommand> [flags]``.

Every flag has a dotted config key (``sim.noise``, ``decode.beam``, ...).
``--config FILE`` reads ``key = value`` lines (``#`` starts a comment, blank
lines are ignored, values use the flag's syntax); explicit flags override
the file and unknown keys are errors.  Exit status: 0 success, 1 input or
usage error, 2 internal error.
"""

import argparse
import json
import math
import os
import sys
from dataclasses import fields

from . import __version__
from .corpus import (SimSpec, gen_corpus, lexicon_for, read_corpus_jsonl, read_frames,
                     synth_frames, write_corpus_jsonl, write_frames)
from .decoder import DecodeConfig, DecodingGraph, Hypothesis, Lexicon, build_graph
from .errors import ConfigError, InputError
from .evaluation import (ContextProtocol, ExperimentModels, corpus_wer, decode_session,
                         perplexity, report_json, report_tsv, rescore_session,
                         run_context_experiment)
from .fusion import FusionConfig
from .lstm import CHECKPOINT_VERSION, LstmConfig, LstmModel
from .lstm import train as train_lstm
from .ngram import Vocabulary, prune, read_arpa, write_arpa
from .ngram import train as train_ngram
from .wfst import SymbolTable, read_text, write_text

INF = math.inf
VERSION = (f"fusiondec {__version__} (arpa; fst-text 1; lstm-checkpoint {CHECKPOINT_VERSION}; "
           f"frames 1; report 1)")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _number(text):
    """float that also accepts ``inf``."""
    return float(text)


def _int_or_inf(text):
    v = float(text)
    if v != INF and v != int(v):
        raise argparse.ArgumentTypeError(f"expected an integer or inf, got {text!r}")
    return v if v == INF else int(v)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _weights(text):
    parts = text.replace(",", " ").split()
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("weights are two numbers, e.g. 0.5,0.5")
    return tuple(float(p) for p in parts)


def _add(p, flag, key, **kw):
    p.add_argument(flag, dest=key, **kw)


def _sim_flags(p):
    for f in fields(SimSpec):
        if f.name != "seed":
            _add(p, "--" + f.name.replace("_", "-"), "sim." + f.name, type=f.type, default=f.default)


def _decode_flags(p):
    _add(p, "--beam", "decode.beam", type=_number, default=INF)
    _add(p, "--max-active", "decode.max_active", type=_int_or_inf, default=INF)
    _add(p, "--nbest", "decode.nbest", type=int, default=1)
    _add(p, "--ngram-approx-n", "decode.ngram_approx_n", type=_int_or_inf, default=INF)
    _add(p, "--frames-per-symbol", "decode.frames_per_symbol", type=int, default=1)


def _fusion_flags(p):
    _add(p, "--weights", "fusion.weights", type=_weights, default=(0.5, 0.5),
         help="n-gram and LSTM log-linear weights")
    _add(p, "--use-unnormalized", "fusion.use_unnormalized", type=_bool, default=True)
    _add(p, "--batch-size", "fusion.batch_size", type=int, default=16)
    _add(p, "--use-cache", "fusion.use_cache", type=_bool, default=True)
    _add(p, "--interpolation", "fusion.interpolation", default="log-linear")


def _context_flags(p, multi=False):
    if multi:
        _add(p, "--k", "context.k", type=lambda t: [_int_or_inf(x) for x in t.split(",")],
             default=[0, 1, 2, 4, INF])
        _add(p, "--source", "context.source", type=lambda t: t.split(","), default=["reference"])
        _add(p, "--trailing-bos", "context.trailing_bos",
             type=lambda t: [_bool(x) for x in t.split(",")], default=[True])
        _add(p, "--shuffle", "context.shuffle", type=_bool, default=True,
             help="add a shuffled-history row for the largest k")
    else:
        _add(p, "--k", "context.k", type=_int_or_inf, default=0)
        _add(p, "--source", "context.source", default="reference")
        _add(p, "--trailing-bos", "context.trailing_bos", type=_bool, default=True)
        _add(p, "--shuffle", "context.shuffle", type=_bool, default=False)


def _model_inputs(p, lstm=True, need_g=True):
    _add(p, "--graph", "graph", required=True)
    _add(p, "--lexicon", "lexicon", required=True)
    _add(p, "--gp", "gp", required=True, help="pruned ARPA the graph was built from")
    _add(p, "--g", "g", required=need_g, help="full ARPA")
    if lstm:
        _add(p, "--lstm", "lstm", default=None, help="LSTM checkpoint")


def build_parser():
    top = _Parser(prog="fusiondec", description="n-gram + LSTM fusion decoding pipeline")
    top.add_argument("--version", action="version", version=VERSION)
    subs = top.add_subparsers(dest="command", parser_class=_Parser)

    def sub(name, help_text):
        p = subs.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", dest="config", default=None, help="key = value file")
        _add(p, "--seed", "seed", type=int, default=0)
        return p

    p = sub("gen", "generate a synthetic corpus, lexicon and test-set frames")
    _add(p, "--out", "out", required=True, help="output directory")
    _add(p, "--test-sessions", "test_sessions", type=int, default=20)
    _sim_flags(p)

    p = sub("train-ngram", "train an interpolated Witten-Bell n-gram model")
    _add(p, "--corpus", "corpus", required=True)
    _add(p, "--lexicon", "lexicon", default=None, help="vocabulary source (default: corpus)")
    _add(p, "--order", "ngram.order", type=int, default=3)
    _add(p, "--out", "out", required=True)

    p = sub("prune", "relative-entropy pruning of an ARPA model")
    _add(p, "--in", "input", required=True)
    _add(p, "--threshold", "prune.threshold", type=float, required=True)
    _add(p, "--out", "out", required=True)

    p = sub("compile-graph", "compose the lexicon with a (pruned) n-gram acceptor")
    _add(p, "--lexicon", "lexicon", required=True)
    _add(p, "--arpa", "arpa", required=True)
    _add(p, "--out", "out", required=True, help="graph text file; symbol tables go next to it")

    p = sub("train-lstm", "train the LSTM language model on session streams")
    _add(p, "--corpus", "corpus", required=True)
    _add(p, "--lexicon", "lexicon", default=None)
    _add(p, "--out", "out", required=True)
    _add(p, "--per-utterance", "lstm.per_utterance", type=_bool, default=False,
         help="reset the state at every utterance instead of training session streams")
    for f in fields(LstmConfig):
        if f.name in ("vocab_size", "seed"):
            continue
        _add(p, "--" + f.name.replace("_", "-"), "lstm." + f.name, type=f.type, default=f.default)

    p = sub("decode", "first-pass decoding, optionally with on-the-fly fusion")
    _model_inputs(p, need_g=False)
    _add(p, "--corpus", "corpus", required=True, help="sessions and utterance order")
    _add(p, "--frames-dir", "frames_dir", required=True)
    _add(p, "--out", "out", required=True, help="n-best JSON")
    _add(p, "--hyp-out", "hyp_out", default=None, help="1-best transcripts, one per line")
    _add(p, "--fusion", "fusion.enabled", type=_bool, default=True)
    _decode_flags(p)
    _fusion_flags(p)
    _context_flags(p)

    p = sub("rescore", "second pass: rescore decode n-best lists with the fused LM")
    _add(p, "--nbest", "nbest", required=True, help="n-best JSON from decode")
    _add(p, "--corpus", "corpus", required=True)
    _add(p, "--lexicon", "lexicon", required=True)
    _add(p, "--g", "g", required=True)
    _add(p, "--lstm", "lstm", default=None)
    _add(p, "--out", "out", required=True)
    _add(p, "--hyp-out", "hyp_out", default=None)
    _fusion_flags(p)
    _context_flags(p)

    p = sub("ppl", "perplexity under a context protocol")
    _add(p, "--corpus", "corpus", required=True)
    _add(p, "--arpa", "arpa", default=None)
    _add(p, "--lstm", "lstm", default=None)
    _add(p, "--lexicon", "lexicon", default=None, help="vocabulary for an LSTM checkpoint")
    _add(p, "--hyp", "hyp", default=None, help="decode n-best JSON for hypothesis context")
    _context_flags(p)

    p = sub("wer", "word error rate of line-aligned transcripts")
    _add(p, "--ref", "ref", required=True)
    _add(p, "--hyp", "hyp", required=True)
    _add(p, "--verbose", "verbose", action="store_true")

    p = sub("experiment", "first vs second pass across context protocols")
    _model_inputs(p)
    _add(p, "--corpus", "corpus", required=True)
    _add(p, "--frames-dir", "frames_dir", required=True)
    _add(p, "--out", "out", required=True, help="report JSON")
    _add(p, "--tsv", "tsv", default=None)
    _add(p, "--second-pass-nbest", "experiment.second_pass_nbest", type=int, default=100)
    _add(p, "--jobs", "jobs", type=int, default=1)
    _decode_flags(p)
    _fusion_flags(p)
    _context_flags(p, multi=True)
    return top


# -- config files -------------------------------------------------------------

def read_config(path):
    entries = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (x.strip() for x in line.split("=", 1))
            if not key:
                raise InputError(f"{path}:{lineno}: empty key")
            entries[key] = (lineno, value)
    return entries


def _apply_config(subparser, path, argv, known):
    """Config values become defaults, so flags on the command line win.  Keys
    that belong to a different subcommand are skipped, which lets one file
    drive a whole pipeline; keys no subcommand knows are errors."""
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, (lineno, value) in read_config(path).items():
        action = actions.get(key)
        if action is None:
            if key in known:
                continue
            raise InputError(f"{path}:{lineno}: unknown key {key!r}")
        if action.nargs == 0:
            defaults[key] = _bool(value)
            continue
        try:
            defaults[key] = action.type(value) if action.type else value
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise InputError(f"{path}:{lineno}: bad value for {key}: {e}") from None
        action.required = False
    subparser.set_defaults(**defaults)
    return subparser.parse_args(argv)


def _config_path(rest):
    for i, tok in enumerate(rest):
        if tok == "--config" and i + 1 < len(rest):
            return rest[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse(argv):
    parser = build_parser()
    choices = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in choices), None)
    path = _config_path(argv[argv.index(command) + 1:]) if command else None
    if path is None:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "fusiondec: error: a subcommand is required")
        return vars(args)
    # the config has to supply defaults before required flags are checked
    known = {a.dest for p in choices.values() for a in p._actions}
    args = _apply_config(choices[command], path, argv[argv.index(command) + 1:], known)
    args.command = command
    return vars(args)


def _group(cfg, prefix):
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def _echo(cfg):
    out = {}
    for k, v in sorted(cfg.items()):
        if isinstance(v, float) and math.isinf(v):
            v = "inf"
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, list):
            v = ["inf" if isinstance(x, float) and math.isinf(x) else x for x in v]
        out[k] = v
    return out


# -- loaders ------------------------------------------------------------------

def _read_arpa_file(path):
    with open(path, encoding="utf-8") as f:
        return read_arpa(f.read())


def _vocab(cfg, corpus=None):
    if cfg.get("lexicon"):
        return Vocabulary(Lexicon.read(cfg["lexicon"]).prons)
    if corpus is None:
        raise ConfigError("a vocabulary source (--lexicon) is required")
    return Vocabulary.from_corpus([u.tokens for c in corpus for u in c.utterances])


def _load_lstm(path, vocab):
    return LstmModel.load(path, vocab=vocab) if path else None


def _graph_paths(out):
    return out, out + ".isyms", out + ".osyms"


def _load_graph(cfg, lex, gp):
    path, ipath, opath = _graph_paths(cfg["graph"])
    fst = read_text(path, SymbolTable.read(ipath), SymbolTable.read(opath))
    if fst.isyms != lex.phones:
        raise InputError("graph input symbols differ from the lexicon's acoustic symbols")
    return DecodingGraph(fst, lex, gp)


def _frames(corpus, frames_dir, lex):
    out = {}
    for conv in corpus:
        for u in conv.utterances:
            out[u.utt_id] = read_frames(os.path.join(frames_dir, u.utt_id + ".frm"), lex.phones)
    return out


def _decode_cfg(cfg):
    return DecodeConfig(**_group(cfg, "decode"))


def _fusion_cfg(cfg):
    return FusionConfig(**{k: v for k, v in _group(cfg, "fusion").items() if k != "enabled"})


def _protocol(cfg):
    c = _group(cfg, "context")
    return ContextProtocol(c["k"], c["source"], c["trailing_bos"], c["shuffle"], cfg["seed"])


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        f.write(report_json(obj) + "\n")


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as f:
        f.write("".join(line + "\n" for line in lines))


# -- subcommands --------------------------------------------------------------

def cmd_gen(cfg):
    spec = SimSpec(seed=cfg["seed"], **_group(cfg, "sim"))
    convs = gen_corpus(spec)
    n_test = cfg["test_sessions"]
    if not 0 < n_test < len(convs):
        raise ConfigError("test_sessions must leave at least one training session")
    out = cfg["out"]
    os.makedirs(os.path.join(out, "frames"), exist_ok=True)
    lex = lexicon_for(spec)
    write_corpus_jsonl(convs[:-n_test], os.path.join(out, "train.jsonl"))
    write_corpus_jsonl(convs[-n_test:], os.path.join(out, "test.jsonl"))
    lex.write(os.path.join(out, "lexicon.txt"))
    lex.phones.write(os.path.join(out, "phones.txt"))
    for conv in convs[-n_test:]:
        for u in conv.utterances:
            write_frames(synth_frames(u.tokens, lex, spec, u.utt_id),
                         os.path.join(out, "frames", u.utt_id + ".frm"), lex.phones)
    _write_json(os.path.join(out, "gen_config.json"), _echo(cfg))
    return 0


def cmd_train_ngram(cfg):
    corpus = read_corpus_jsonl(cfg["corpus"])
    vocab = _vocab(cfg, corpus)
    m = train_ngram([u.tokens for c in corpus for u in c.utterances], cfg["ngram.order"], vocab)
    with open(cfg["out"], "w", encoding="utf-8") as f:
        f.write(write_arpa(m))
    return 0


def cmd_prune(cfg):
    m = _read_arpa_file(cfg["input"])
    with open(cfg["out"], "w", encoding="utf-8") as f:
        f.write(write_arpa(prune(m, cfg["prune.threshold"])))
    return 0


def cmd_compile_graph(cfg):
    lex = Lexicon.read(cfg["lexicon"])
    graph = build_graph(lex, _read_arpa_file(cfg["arpa"]))
    write_text(graph.fst, *_graph_paths(cfg["out"]))
    return 0


def cmd_train_lstm(cfg):
    corpus = read_corpus_jsonl(cfg["corpus"])
    vocab = _vocab(cfg, corpus)
    opts = _group(cfg, "lstm")
    per_utt = opts.pop("per_utterance")
    lcfg = LstmConfig(vocab_size=len(vocab), seed=cfg["seed"], **opts)
    if per_utt:
        data = [vocab.encode(u.tokens) for c in corpus for u in c.utterances]
    else:
        data = [[vocab.encode(u.tokens) for u in c.utterances] for c in corpus]
    model, trace = train_lstm(LstmModel(lcfg), data, lcfg, sessions=not per_utt)
    model.save(cfg["out"], vocab)
    _write_json(cfg["out"] + ".json", {"config": _echo(cfg), "loss_trace": trace})
    return 0


def _models(cfg, lex):
    gp = _read_arpa_file(cfg["gp"])
    g = _read_arpa_file(cfg["g"]) if cfg.get("g") else gp
    if g.vocab != gp.vocab:
        raise InputError("full and pruned ARPA files use different vocabularies")
    lstm = _load_lstm(cfg.get("lstm"), g.vocab)
    return ExperimentModels(g.vocab, lex, g, gp, _load_graph(cfg, lex, gp), lstm)


def _nbest_records(vocab, conv, results, key):
    recs = []
    for u, r in zip(conv.utterances, results):
        nbest = r["result"].nbest if key == "result" else r["nbest"]
        rec = {"utt": u.utt_id, "session": conv.session,
               "nbest": [h.as_dict(vocab) for h in nbest]}
        if key == "result":
            rec["token_counts"] = r["result"].token_counts
            rec["cache"] = r["result"].cache
            rec["diagnostic"] = r["result"].diagnostic
        recs.append(rec)
    return recs


def cmd_decode(cfg):
    lex = Lexicon.read(cfg["lexicon"])
    models = _models(cfg, lex)
    corpus = read_corpus_jsonl(cfg["corpus"])
    frames = _frames(corpus, cfg["frames_dir"], lex)
    fcfg = _fusion_cfg(cfg) if cfg["fusion.enabled"] else None
    if fcfg is not None and models.lstm is None and fcfg.weights[1] > 0:
        raise ConfigError("fusion with a positive LSTM weight needs --lstm")
    proto, dcfg = _protocol(cfg), _decode_cfg(cfg)
    recs, hyps = [], []
    for conv in corpus:
        results = decode_session(models, conv, frames, proto, dcfg, fcfg)
        recs += _nbest_records(models.vocab, conv, results, "result")
        hyps += [" ".join(models.vocab.decode(r["words"])) for r in results]
    _write_json(cfg["out"], {"config": _echo(cfg), "utterances": recs})
    if cfg.get("hyp_out"):
        _write_lines(cfg["hyp_out"], hyps)
    return 0


def _read_nbest(path, vocab):
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
            out = {}
            for rec in data["utterances"]:
                out[rec["utt"]] = [Hypothesis(tuple(vocab.encode(h["words"])), float(h["ac_cost"]),
                                              float(h["lm_cost"])) for h in rec["nbest"]]
        except (ValueError, KeyError, TypeError):
            raise InputError(f"{path}: not a decode n-best file") from None
    return out


def cmd_rescore(cfg):
    lex = Lexicon.read(cfg["lexicon"])
    g = _read_arpa_file(cfg["g"])
    lstm = _load_lstm(cfg.get("lstm"), g.vocab)
    models = ExperimentModels(g.vocab, lex, g, g, None, lstm)
    corpus = read_corpus_jsonl(cfg["corpus"])
    base = _read_nbest(cfg["nbest"], g.vocab)
    missing = [u.utt_id for c in corpus for u in c.utterances if u.utt_id not in base]
    if missing:
        raise InputError(f"n-best file lacks utterances: {' '.join(missing[:5])}")
    proto, fcfg = _protocol(cfg), _fusion_cfg(cfg)
    recs, hyps = [], []
    for conv in corpus:
        results = rescore_session(models, conv, base, proto, fcfg)
        recs += _nbest_records(g.vocab, conv, results, "nbest")
        hyps += [" ".join(g.vocab.decode(r["words"])) for r in results]
    _write_json(cfg["out"], {"config": _echo(cfg), "utterances": recs})
    if cfg.get("hyp_out"):
        _write_lines(cfg["hyp_out"], hyps)
    return 0


def cmd_ppl(cfg):
    corpus = read_corpus_jsonl(cfg["corpus"])
    if bool(cfg.get("arpa")) == bool(cfg.get("lstm")):
        raise ConfigError("give exactly one of --arpa or --lstm")
    proto = _protocol(cfg)
    hyps = None
    if cfg.get("arpa"):
        model = _read_arpa_file(cfg["arpa"])
        vocab = model.vocab
    else:
        vocab = _vocab(cfg, corpus)
        model = _load_lstm(cfg["lstm"], vocab)
    if cfg.get("hyp"):
        with open(cfg["hyp"], encoding="utf-8") as f:
            data = json.load(f)
        hyps = {}
        for rec in data["utterances"]:
            best = rec["nbest"][0]["words"] if rec["nbest"] else []
            hyps.setdefault(rec["session"], []).append(vocab.encode(best))
    value = perplexity(model, corpus, proto, vocab, hypotheses=hyps)
    print(f"{value:.4f}")
    return 0


def _read_lines(path):
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f.read().splitlines()]


def cmd_wer(cfg):
    ref, hyp = _read_lines(cfg["ref"]), _read_lines(cfg["hyp"])
    if len(ref) != len(hyp):
        raise InputError(f"{cfg['ref']} has {len(ref)} lines, {cfg['hyp']} has {len(hyp)}")
    stats = corpus_wer(zip(ref, hyp))
    print(f"{stats.wer:.2f}")
    if cfg["verbose"]:
        print(f"sub={stats.substitutions} ins={stats.insertions} del={stats.deletions} "
              f"ref_words={stats.ref_words}")
    return 0


def _protocols(cfg):
    c = _group(cfg, "context")
    protos = []
    for src in c["source"]:
        for bos in c["trailing_bos"]:
            for k in c["k"]:
                protos.append(ContextProtocol(k, src, bos, False, cfg["seed"]))
    if c["shuffle"] and c["k"]:
        kmax = max(c["k"])
        if kmax != 0:
            protos.append(ContextProtocol(kmax, "reference", True, True, cfg["seed"]))
    return protos


def cmd_experiment(cfg):
    lex = Lexicon.read(cfg["lexicon"])
    models = _models(cfg, lex)
    if models.lstm is None:
        raise ConfigError("experiment needs --lstm")
    corpus = read_corpus_jsonl(cfg["corpus"])
    frames = _frames(corpus, cfg["frames_dir"], lex)
    echo = _echo({k: v for k, v in cfg.items() if k != "jobs"})
    report = run_context_experiment(corpus, models, frames, _protocols(cfg), _decode_cfg(cfg),
                                    _fusion_cfg(cfg), cfg["experiment.second_pass_nbest"],
                                    jobs=cfg["jobs"], config_echo=echo)
    with open(cfg["out"], "w", encoding="utf-8") as f:
        f.write(report_json(report) + "\n")
    if cfg.get("tsv"):
        with open(cfg["tsv"], "w", encoding="utf-8") as f:
            f.write(report_tsv(report))
    return 0


COMMANDS = {"gen": cmd_gen, "train-ngram": cmd_train_ngram, "prune": cmd_prune,
            "compile-graph": cmd_compile_graph, "train-lstm": cmd_train_lstm,
            "decode": cmd_decode, "rescore": cmd_rescore, "ppl": cmd_ppl, "wer": cmd_wer,
            "experiment": cmd_experiment}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        cfg = parse(argv)
        return COMMANDS[cfg["command"]](cfg)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:     # --help / --version
        return int(e.code or 0)
    except (InputError, ConfigError, NotImplementedError, OSError) as e:
        print(f"fusiondec: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:      # noqa: BLE001
        print(f"fusiondec: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
