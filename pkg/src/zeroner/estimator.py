"""Scikit-learn style estimator wrapping the tagger.

Lets the model sit in sklearn pipelines and searches: X is a list of
token-string lists, y a list of IOB tag-string lists. Everything the
training run needs is a constructor parameter, so ``get_params`` /
``set_params`` / ``clone`` behave as usual.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import corpus, evaluation, model


def check_sentences(X):
    """Validate a list of token-sequence inputs."""
    if not isinstance(X, (list, tuple)):
        raise ValueError("X must be a list of token lists")
    for i, sent in enumerate(X):
        if not isinstance(sent, (list, tuple)) or len(sent) == 0:
            raise ValueError("X[%d] must be a non-empty token list" % i)
        if not all(isinstance(t, str) for t in sent):
            raise ValueError("X[%d] contains non-string tokens" % i)
    return list(list(s) for s in X)


def check_labels(X, y):
    """Validate IOB label sequences against their token sequences."""
    if y is None or len(y) != len(X):
        raise ValueError("y must align with X (%d sentences)" % len(X))
    for i, (sent, tags) in enumerate(zip(X, y)):
        if len(tags) != len(sent):
            raise ValueError("y[%d] has %d tags for %d tokens"
                             % (i, len(tags), len(sent)))
        if not all(isinstance(t, str) for t in tags):
            raise ValueError("y[%d] contains non-string tags" % i)
    return list(list(t) for t in y)


class NerTagger(BaseEstimator):
    """Sequence tagger: BiLSTM encoder, CRF decoding, optional
    entity-detection auxiliary task and mixture of entity experts.

    Parameters mirror the training configuration; `vectors` may be a
    path to a text-format vector file or a PretrainedVectors instance.
    """

    def __init__(self, hidden_size=200, num_layers=2, expert_dim=200,
                 embed_dim=64, learning_rate=1e-3, batch_size=32, dropout=0.3,
                 epochs=30, patience=5, seed=0, freeze_embeddings=True,
                 use_mtl=True, use_moee=True, lambda_task1=1.0,
                 lambda_task2=1.0, lambda_gate=1.0, min_count=1,
                 ngram_buckets=4096, vectors=None):
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.expert_dim = expert_dim
        self.embed_dim = embed_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.dropout = dropout
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.freeze_embeddings = freeze_embeddings
        self.use_mtl = use_mtl
        self.use_moee = use_moee
        self.lambda_task1 = lambda_task1
        self.lambda_task2 = lambda_task2
        self.lambda_gate = lambda_gate
        self.min_count = min_count
        self.ngram_buckets = ngram_buckets
        self.vectors = vectors

    def _config(self):
        return model.TrainConfig(
            embed_dim=self.embed_dim, hidden_size=self.hidden_size,
            num_layers=self.num_layers, expert_dim=self.expert_dim,
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            dropout=self.dropout, epochs=self.epochs, patience=self.patience,
            seed=self.seed, freeze_embeddings=self.freeze_embeddings,
            use_mtl=self.use_mtl, use_moee=self.use_moee,
            lambda_task1=self.lambda_task1, lambda_task2=self.lambda_task2,
            lambda_gate=self.lambda_gate, min_count=self.min_count,
            ngram_buckets=self.ngram_buckets)

    def fit(self, X, y):
        """Train on tokenized sentences X with gold IOB tag strings y."""
        X = check_sentences(X)
        y = check_labels(X, y)
        scheme = corpus.TagScheme.from_tags(t for tags in y for t in tags)
        sentences = [
            corpus.AnnotatedSentence.from_task2(
                tokens, [scheme.task2_id(t) for t in tags], scheme)
            for tokens, tags in zip(X, y)]
        vectors = self.vectors
        if isinstance(vectors, str):
            vectors = corpus.load_vectors(vectors)
        self.model_, self.history_ = model.train(
            sentences, None, scheme, self._config(), vectors=vectors)
        self.scheme_ = scheme
        self.classes_ = list(scheme.task2_tags)
        return self

    def predict(self, X):
        """Decode IOB tag strings for tokenized sentences."""
        check_is_fitted(self, "model_")
        X = check_sentences(X)
        out = []
        for tokens in X:
            tags, _ = self.model_.decode_sentence(tokens)
            out.append([self.scheme_.task2_tags[t] for t in tags])
        return out

    def gate_confidences(self, X):
        """Per-token expert-gate distributions, one [n x E] array per
        sentence (requires the expert module)."""
        check_is_fitted(self, "model_")
        if not self.use_moee:
            raise ValueError("gate confidences need use_moee=True")
        X = check_sentences(X)
        return [np.asarray(self.model_.decode_sentence(tokens)[1])
                for tokens in X]

    def score(self, X, y):
        """Entity micro-F1 against gold tags, as a fraction in [0, 1]."""
        check_is_fitted(self, "model_")
        X = check_sentences(X)
        y = check_labels(X, y)
        gold = [[self.scheme_.task2_id(t) for t in tags] for tags in y]
        pred = [[self.scheme_.task2_id(t) for t in tags]
                for tags in self.predict(X)]
        return evaluation.f1(gold, pred, self.scheme_).micro_f1 / 100.0
