"""Zero-resource cross-domain named entity recognition.

A BiLSTM-CRF tagger trained only on source-domain data, with an
entity-detection auxiliary task and a mixture of entity experts whose
softmax gate is supervised by the collapsed gold categories. Ships its own
reverse-mode autodiff core, CoNLL tooling, entity-level F1 scoring, a CLI
and a scikit-learn style estimator.
"""

from .autograd import Adam, Tape, Tensor, finite_difference_check
from .corpus import (AnnotatedSentence, PretrainedVectors, TagScheme,
                     Vocabulary, load_vectors, read_conll, write_conll)
from .estimator import NerTagger
from .evaluation import EntitySpan, F1Report, compare, extract_spans, f1
from .model import LossBreakdown, NerModel, TrainConfig, load, save, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "AnnotatedSentence", "EntitySpan", "F1Report", "LossBreakdown",
    "NerModel", "NerTagger", "PretrainedVectors", "TagScheme", "Tape",
    "Tensor", "TrainConfig", "Vocabulary", "compare", "extract_spans", "f1",
    "finite_difference_check", "load", "load_vectors", "read_conll", "save",
    "train", "write_conll", "__version__",
]
