"""Adaptive ensembling of domain-specific translation models.

Modules:

* corpus: tokenization, parallel corpora, BPE, vocabularies
* ngram: source-side n-gram LMs and the source task posterior
* seqmodel: next-token models (count tables and a small neural model)
* training: fine-tuning with no regularization, L2 or EWC
* ensemble: weighting schemes and the task posterior during decoding
* decoder: beam search, exhaustive search, weight trajectories
* bleu: corpus BLEU
* synth, config, experiment, cli: synthetic domains and the experiment driver
"""

from .bleu import BleuReport, corpus_bleu
from .corpus import (BOS_ID, EOS_ID, UNK_ID, BpeModel, ParallelCorpus, Sentence, Vocabulary, apply_bpe, build_vocab,
                     load_parallel, train_bpe)
from .decoder import DecodeResult, beam_decode, decode_corpus, exhaustive_decode, trajectory_tsv
from .ensemble import (SCHEMES, EnsembleSpec, LambdaMatrix, TaskPosteriorState, combined_step, ensemble_weights,
                       estimate_lambda, identity_lambda, init_posterior, make_spec, uniform_lambda, update_posterior)
from .ngram import NgramLm, log_prob_sentence, read_arpa, source_task_posterior, train_ngram, write_arpa
from .seqmodel import ConditionalSequenceModel, TableModel, ToyNeuralModel, load_model
from .training import (FisherEstimate, RegularizerConfig, estimate_fisher_diagonal, fine_tune, perplexity,
                       regularized_gradient, regularized_loss)

__version__ = "0.1.0"

__all__ = [
    "BleuReport", "corpus_bleu",
    "BOS_ID", "EOS_ID", "UNK_ID", "BpeModel", "ParallelCorpus", "Sentence", "Vocabulary", "apply_bpe", "build_vocab",
    "load_parallel", "train_bpe",
    "DecodeResult", "beam_decode", "decode_corpus", "exhaustive_decode", "trajectory_tsv",
    "SCHEMES", "EnsembleSpec", "LambdaMatrix", "TaskPosteriorState", "combined_step", "ensemble_weights",
    "estimate_lambda", "identity_lambda", "init_posterior", "make_spec", "uniform_lambda", "update_posterior",
    "NgramLm", "log_prob_sentence", "read_arpa", "source_task_posterior", "train_ngram", "write_arpa",
    "ConditionalSequenceModel", "TableModel", "ToyNeuralModel", "load_model",
    "FisherEstimate", "RegularizerConfig", "estimate_fisher_diagonal", "fine_tune", "perplexity",
    "regularized_gradient", "regularized_loss",
]
