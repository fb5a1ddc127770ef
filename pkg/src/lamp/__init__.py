"""Linear additive Markov processes: evaluation, learning, analysis, baselines."""

from lamp.core import (
    Corpus,
    DataError,
    EmptyRowError,
    HistoryDistribution,
    LampError,
    LampModel,
    LogLikelihood,
    NonErgodicError,
    NumericError,
    SparseStochasticMatrix,
    Vocabulary,
    VocabularyMismatch,
    generate,
    load_model,
    log_likelihood,
    model_from_dict,
    model_to_dict,
    perplexity,
    save_model,
    transition_distribution,
)

__version__ = "0.1.0"
