"""Token embedding and the bidirectional LSTM encoder.

The embedding layer serves pretrained rows for in-vocabulary words (frozen
or trainable) and composes hashed character n-gram rows for everything
else. The encoder stacks bidirectional LSTM layers; each position's output
is the concatenation of the forward state after reading the prefix and the
backward state after reading the suffix.
"""

import numpy as np

from . import autograd as ag
from . import corpus
from .autograd import Tensor


class LstmCell:
    """Single-direction LSTM cell with gates stacked as [i, f, g, o].

    Weights use the fan-in uniform init; biases start at zero except the
    forget gate, which starts at +1 to help small-data convergence.
    """

    def __init__(self, input_size, hidden_size, rng):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w = ag.uniform_init(rng, (input_size, 4 * hidden_size), input_size)
        self.u = ag.uniform_init(rng, (hidden_size, 4 * hidden_size), hidden_size)
        bias = np.zeros(4 * hidden_size)
        bias[hidden_size:2 * hidden_size] = 1.0
        self.b = Tensor(bias, requires_grad=True)

    def premix(self, x):
        """Input contribution x @ W + b for all timesteps at once."""
        return ag.matmul(x, self.w) + self.b

    def step(self, zrow, h, c):
        """One timestep; zrow is the premixed input row [1 x 4H]."""
        hs = self.hidden_size
        z = zrow + ag.matmul(h, self.u)
        gate_i = ag.sigmoid(z[:, 0:hs])
        gate_f = ag.sigmoid(z[:, hs:2 * hs])
        gate_g = ag.tanh(z[:, 2 * hs:3 * hs])
        gate_o = ag.sigmoid(z[:, 3 * hs:4 * hs])
        c_new = gate_f * c + gate_i * gate_g
        h_new = gate_o * ag.tanh(c_new)
        return h_new, c_new

    def run(self, premixed, reverse=False):
        """Full pass over a premixed sequence; returns the per-step h list."""
        n = premixed.shape[0]
        h = Tensor(np.zeros((1, self.hidden_size)))
        c = Tensor(np.zeros((1, self.hidden_size)))
        states = [None] * n
        steps = range(n - 1, -1, -1) if reverse else range(n)
        for i in steps:
            h, c = self.step(premixed[i:i + 1, :], h, c)
            states[i] = h
        return states

    def named_parameters(self, prefix=""):
        return [(prefix + "w", self.w), (prefix + "u", self.u),
                (prefix + "b", self.b)]


class BiLstmEncoder:
    """Stack of bidirectional LSTM layers.

    Layer l > 0 consumes the concatenated bidirectional output of layer
    l-1, with dropout on the layer boundary during training (never on
    recurrent connections).
    """

    def __init__(self, input_size, hidden_size, num_layers, rng):
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.layers = []
        for layer in range(num_layers):
            size = input_size if layer == 0 else 2 * hidden_size
            self.layers.append((LstmCell(size, hidden_size, rng),
                                LstmCell(size, hidden_size, rng)))

    @property
    def output_dim(self):
        return 2 * self.hidden_size

    def encode(self, x, training=False, rng=None, dropout_rate=0.0):
        """Encode [n x d] embeddings to [n x 2H] hidden states."""
        for layer, (fwd, bwd) in enumerate(self.layers):
            if layer > 0:
                x = ag.dropout(x, dropout_rate, rng, training)
            forward_states = fwd.run(fwd.premix(x))
            backward_states = bwd.run(bwd.premix(x), reverse=True)
            rows = [ag.concat([f, b], axis=1)
                    for f, b in zip(forward_states, backward_states)]
            x = ag.concat(rows, axis=0)
        return x

    def named_parameters(self, prefix=""):
        out = []
        for layer, (fwd, bwd) in enumerate(self.layers):
            out.extend(fwd.named_parameters("%sl%d.fwd." % (prefix, layer)))
            out.extend(bwd.named_parameters("%sl%d.bwd." % (prefix, layer)))
        return out


class EmbeddingLayer:
    """Word embeddings with hashed-n-gram composition for OOV tokens.

    The main table is drawn from the init distribution, then rows of
    in-vocabulary words are overwritten with their pretrained vectors.
    When frozen, the main table takes no gradients and is bit-identical
    across training; the n-gram table always trains.
    """

    def __init__(self, vocab, dim, rng, vectors=None, frozen=True,
                 ngram_buckets=2 ** 20, hash_seed=0):
        self.vocab = vocab
        self.dim = dim
        self.frozen = frozen
        self.ngram_buckets = ngram_buckets
        self.hash_seed = hash_seed
        if rng is None:
            main = np.zeros((len(vocab), dim))
        else:
            main = rng.uniform(-np.sqrt(1.0 / dim), np.sqrt(1.0 / dim),
                               size=(len(vocab), dim))
            main[0] = 0.0  # padding row, unused but kept deterministic
        if vectors is not None:
            if vectors.dim != dim:
                raise ValueError("vector dimension %d does not match embedding "
                                 "dimension %d" % (vectors.dim, dim))
            for word, idx in vocab.word_to_index.items():
                vec = vectors.get(word)
                if vec is not None:
                    main[idx] = vec
        self.main = Tensor(main, requires_grad=not frozen)
        self.ngram = ag.uniform_init(rng, (ngram_buckets, dim), dim)

    def embed(self, tokens, training=False, rng=None, dropout_rate=0.0):
        """Embed a token sequence to [n x d]; OOV tokens are composed from
        their n-gram rows, everything else reads the main table."""
        oov = [tok not in self.vocab for tok in tokens]
        if not any(oov):
            idxs = np.array([self.vocab.lookup(t) for t in tokens], dtype=np.intp)
            x = ag.embedding_lookup(self.main, idxs)
        else:
            rows = []
            for tok, is_oov in zip(tokens, oov):
                if is_oov:
                    rows.append(corpus.compose_oov_vector(
                        tok, self.ngram, self.hash_seed))
                else:
                    rows.append(ag.embedding_lookup(
                        self.main, np.array([self.vocab.lookup(tok)], dtype=np.intp)))
            x = ag.concat(rows, axis=0)
        return ag.dropout(x, dropout_rate, rng, training)

    def named_parameters(self, prefix=""):
        return [(prefix + "main", self.main), (prefix + "ngram", self.ngram)]
