"""First-pass fusion of n-gram and LSTM language models in a WFST decoder,
with cross-utterance LSTM context."""

from .errors import (ArpaFormatError, ConfigError, ContractError, InputError,
                     TrainingDivergenceError)
from .wfst import (EPSILON, PHI, Arc, Path, SymbolTable, Tropical, Wfst, accept_cost,
                   best_cost, compose, distance_to_final, shortest_path, trim)
from .ngram import NGramModel, Vocabulary, prune, read_arpa, to_fst, write_arpa
from .ngram import train as train_ngram
from .lstm import (LmHistoryState, LstmConfig, LstmModel, grad_check, init_state_from_context,
                   scoring_state)
from .lstm import train as train_lstm
from .fusion import FusionConfig, FusionScorer, FusionState, ScoreCache
from .decoder import (DecodeConfig, DecodeResult, DecodingGraph, Hypothesis, Lexicon,
                      build_graph, decode, rescore_nbest)
from .corpus import (Conversation, SimSpec, Utterance, gen_corpus, lexicon_for,
                     read_corpus_jsonl, read_frames, synth_frames, write_corpus_jsonl,
                     write_frames)
from .evaluation import (ContextProtocol, ExperimentModels, WerStats, corpus_wer, perplexity,
                         run_context_experiment, wer)

__version__ = "0.1.0"
