"""Model assembly, joint loss, training loop and checkpointing.

The model wires embedding -> BiLSTM -> {entity-detection CRF, expert
mixture -> full-tag CRF}. Both heads train with CRF sequence NLL, the gate
with token-level cross-entropy; the total is a weighted sum. Training is
plain Adam over shuffled mini-batches with best-validation-F1 model
selection, all randomness drawn from one generator seeded by the config.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, asdict, fields, replace

import numpy as np

from . import autograd as ag
from . import corpus
from . import crf
from . import encoder as enc
from . import evaluation
from . import experts
from .autograd import Tensor

CHECKPOINT_MAGIC = b"ZRNERCK1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch_index, components):
        self.epoch = epoch
        self.batch_index = batch_index
        self.components = components
        super().__init__(
            "non-finite loss at epoch %d, batch %d (%s)" % (
                epoch, batch_index,
                ", ".join("%s=%r" % kv for kv in sorted(components.items()))))


@dataclass
class TrainConfig:
    """Everything that determines a training run, model wiring included."""

    embed_dim: int = 300
    hidden_size: int = 200          # per direction
    num_layers: int = 2
    expert_dim: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 32
    dropout: float = 0.3
    epochs: int = 30
    patience: int = 5
    seed: int = 0
    freeze_embeddings: bool = True
    use_mtl: bool = True
    use_moee: bool = True
    lambda_task1: float = 1.0
    lambda_task2: float = 1.0
    lambda_gate: float = 1.0
    token_ce: bool = False          # token-level CE on CRF marginals
    crf2_concat_hidden: bool = False
    gate_supervise_outside: bool = True
    min_count: int = 1
    ngram_buckets: int = 2 ** 20
    hash_seed: int = 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise CheckpointError("unknown config keys: %s" % sorted(unknown))
        return cls(**data)


@dataclass
class LossBreakdown:
    """Scalar loss tensors; total = sum of the weighted components."""

    l_task1: Tensor
    l_task2: Tensor
    l_gate: Tensor
    total: Tensor

    def values(self):
        return {"l_task1": self.l_task1.item(), "l_task2": self.l_task2.item(),
                "l_gate": self.l_gate.item(), "total": self.total.item()}


@dataclass
class ForwardOutput:
    """Per-sentence emission/gate tensors for one batch, plus the padding
    mask implied by the sentence lengths."""

    task1_emissions: list
    task2_emissions: list
    alpha: list
    mask: np.ndarray


def _tokens_of(sentence):
    return sentence.tokens if isinstance(sentence, corpus.AnnotatedSentence) \
        else list(sentence)


class NerModel:
    """The assembled tagger.

    Construction order of parameter groups is fixed (embedding, encoder,
    detection head, expert bank, full head) so that runs with the same seed
    draw identical initializations, including when components are disabled.
    Passing rng=None allocates zeroed parameters for a checkpoint load to
    fill.
    """

    def __init__(self, scheme, vocab, config, vectors=None, rng=None):
        self.scheme = scheme
        self.vocab = vocab
        dim = vectors.dim if vectors is not None else config.embed_dim
        # own snapshot recording the effective embedding width, so a
        # checkpoint rebuilds the exact same shapes
        self.config = config = replace(config, embed_dim=dim)
        self.embedding = enc.EmbeddingLayer(
            vocab, dim, rng, vectors=vectors, frozen=config.freeze_embeddings,
            ngram_buckets=config.ngram_buckets, hash_seed=config.hash_seed)
        self.encoder = enc.BiLstmEncoder(dim, config.hidden_size,
                                         config.num_layers, rng)
        width = self.encoder.output_dim
        self.crf1 = crf.CrfHead(width, scheme.num_task1, rng) \
            if config.use_mtl else None
        self.bank = experts.ExpertBank(width, config.expert_dim,
                                       scheme.num_experts, rng) \
            if config.use_moee else None
        if config.use_moee:
            crf2_in = config.expert_dim + (width if config.crf2_concat_hidden else 0)
        else:
            crf2_in = width
        self.crf2 = crf.CrfHead(crf2_in, scheme.num_task2, rng)
        self._start_pen, self._trans_pen = corpus.iob_decode_penalties(
            scheme.task2_tags)

    # -- parameters -----------------------------------------------------

    def named_parameters(self):
        out = self.embedding.named_parameters("embedding.")
        out += self.encoder.named_parameters("encoder.")
        if self.crf1 is not None:
            out += self.crf1.named_parameters("crf1.")
        if self.bank is not None:
            out += self.bank.named_parameters("moee.")
        out += self.crf2.named_parameters("crf2.")
        return out

    def trainable_parameters(self):
        return [t for _, t in self.named_parameters() if t.requires_grad]

    # -- forward / loss --------------------------------------------------

    def forward_sentence(self, sentence, training=False, rng=None):
        """Run one sentence; returns (task1 emissions, task2 emissions,
        gate distribution), the first and last None for disabled parts."""
        cfg = self.config
        x = self.embedding.embed(_tokens_of(sentence), training=training,
                                 rng=rng, dropout_rate=cfg.dropout)
        h = self.encoder.encode(x, training=training, rng=rng,
                                dropout_rate=cfg.dropout)
        em1 = self.crf1.emissions(h) if self.crf1 is not None else None
        alpha = None
        if self.bank is not None:
            moee = experts.run_experts(h, self.bank)
            alpha = moee.alpha
            rep = ag.concat([moee.meta, h], axis=1) \
                if cfg.crf2_concat_hidden else moee.meta
        else:
            rep = h
        em2 = self.crf2.emissions(rep)
        return em1, em2, alpha

    def forward(self, batch, training=False, rng=None):
        """Forward pass over a batch of sentences.

        Sentences are processed at their own lengths (never truncated or
        padded into a shared tensor), so the returned mask is the
        all-lengths-true matrix downstream losses would mask with.
        """
        em1s, em2s, alphas = [], [], []
        for sentence in batch:
            em1, em2, alpha = self.forward_sentence(sentence, training, rng)
            em1s.append(em1)
            em2s.append(em2)
            alphas.append(alpha)
        lengths = [len(_tokens_of(s)) for s in batch]
        mask = np.zeros((len(batch), max(lengths)), dtype=bool)
        for i, n in enumerate(lengths):
            mask[i, :n] = True
        return ForwardOutput(em1s, em2s, alphas, mask)

    def _head_loss(self, head, emissions, tags):
        """Sequence NLL, or summed token-level CE on marginals when the
        token_ce alternative is enabled."""
        tags = np.asarray(tags, dtype=np.intp)
        if not self.config.token_ce:
            return crf.nll(emissions, tags, head)
        logp = crf.log_marginals(emissions, head)
        picked = ag.gather2d(logp, np.arange(len(tags)), tags)
        return ag.mul(picked.sum(), -1.0)

    def loss(self, batch, training=True, rng=None):
        """Joint loss of a batch.

        Head losses are means over the batch's sentences; the gate loss is
        the mean over all supervised tokens in the batch.
        """
        cfg = self.config
        out = self.forward(batch, training=training, rng=rng)
        task1_terms, task2_terms = [], []
        gate_sum, gate_count = None, 0
        for sentence, em1, em2, alpha in zip(
                batch, out.task1_emissions, out.task2_emissions, out.alpha):
            if em1 is not None:
                task1_terms.append(self._head_loss(self.crf1, em1,
                                                   sentence.tags_task1))
            task2_terms.append(self._head_loss(self.crf2, em2,
                                               sentence.tags_task2))
            if alpha is not None:
                labels = np.asarray(sentence.gate_labels, dtype=np.intp)
                keep = np.ones(len(labels), dtype=bool) \
                    if cfg.gate_supervise_outside else labels != 0
                if keep.any():
                    rows = np.flatnonzero(keep)
                    picked = ag.log(ag.gather2d(alpha, rows, labels[rows]))
                    term = ag.mul(picked.sum(), -1.0)
                    gate_sum = term if gate_sum is None else gate_sum + term
                    gate_count += rows.size

        scale = 1.0 / len(batch)
        l_task1 = ag.mul(_sum_terms(task1_terms), scale) \
            if task1_terms else Tensor(0.0)
        l_task2 = ag.mul(_sum_terms(task2_terms), scale)
        l_gate = ag.mul(gate_sum, 1.0 / gate_count) \
            if gate_sum is not None else Tensor(0.0)
        total = ag.mul(l_task1, cfg.lambda_task1) \
            + ag.mul(l_task2, cfg.lambda_task2) \
            + ag.mul(l_gate, cfg.lambda_gate)
        return LossBreakdown(l_task1, l_task2, l_gate, total)

    # -- inference --------------------------------------------------------

    def decode_sentence(self, sentence):
        """Viterbi decode under IOB transition constraints.

        Returns (tag ids, gate distribution or None); always a valid IOB
        sequence thanks to the decode-time penalties.
        """
        _, em2, alpha = self.forward_sentence(sentence, training=False)
        tags, _ = crf.viterbi(em2, self.crf2, self._start_pen, self._trans_pen)
        return tags, None if alpha is None else alpha.data

    def predict(self, sentences):
        """Decode a list of sentences (AnnotatedSentence or token lists)."""
        return [self.decode_sentence(s) for s in sentences]


def _sum_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def _snapshot(model):
    return {name: t.data.copy() for name, t in model.named_parameters()}


def _restore(model, snapshot):
    for name, t in model.named_parameters():
        t.data = snapshot[name].copy()


def predicted_f1(model, sentences):
    """Entity micro-F1 of the model's decode against the sentences' gold."""
    gold = [s.tags_task2 for s in sentences]
    pred = [tags for tags, _ in model.predict(sentences)]
    return evaluation.f1(gold, pred, model.scheme).micro_f1


def train(train_sentences, dev_sentences, scheme, config, vectors=None,
          progress=None):
    """Train a fresh model; returns (model, per-epoch history records).

    Model selection keeps the epoch with the best validation micro-F1 and
    restores it at the end; training stops early once the score fails to
    improve for more than `patience` consecutive epochs. When no separate
    validation set is supplied the training set is used for selection.
    """
    if not train_sentences:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    vocab = corpus.Vocabulary.from_sentences(train_sentences, config.min_count)
    model = NerModel(scheme, vocab, config, vectors=vectors, rng=rng)
    selection_set = dev_sentences if dev_sentences else train_sentences
    optimizer = ag.Adam(model.trainable_parameters(), lr=config.learning_rate,
                        skip_missing=True)

    history = []
    best_f1, best_params, bad_epochs = -1.0, None, 0
    for epoch in range(1, config.epochs + 1):
        shuffle_seed = int(rng.integers(2 ** 63))
        sums = {"l_task1": 0.0, "l_task2": 0.0, "l_gate": 0.0, "total": 0.0}
        batches = corpus.batches(train_sentences, config.batch_size, shuffle_seed)
        for batch_index, batch in enumerate(batches):
            with ag.Tape() as tape:
                breakdown = model.loss(batch, training=True, rng=rng)
                values = breakdown.values()
                if not all(np.isfinite(v) for v in values.values()):
                    raise TrainingDivergedError(epoch, batch_index, values)
                tape.backward(breakdown.total)
            optimizer.step()
            for key in sums:
                sums[key] += values[key]
        val_f1 = predicted_f1(model, selection_set)
        record = {"epoch": epoch, "val_f1": val_f1}
        record.update({k: v / len(batches) for k, v in sums.items()})
        history.append(record)
        if progress is not None:
            progress(record)
        if val_f1 > best_f1:
            best_f1, best_params, bad_epochs = val_f1, _snapshot(model), 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break
    if best_params is not None:
        _restore(model, best_params)
    return model, history


# -- checkpoint format ---------------------------------------------------------
#
# magic | u32 version | u32 section count | sections | sha256 of all before.
# Each section: u16 name length, name, u64 payload length, payload. The
# params payload is its own record stream: u32 count, then per parameter
# u16+name, u8 ndim, u64 per dim, raw little-endian float64 bytes.


def _pack_params(named):
    parts = [struct.pack("<I", len(named))]
    for name, tensor in named:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack("<%dQ" % arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _unpack_params(payload):
    view = memoryview(payload)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("params section truncated while reading %s"
                                  % what)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "count"))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack("<%dQ" % ndim, take(8 * ndim, "shape"))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(8 * size, name), dtype="<f8").reshape(shape)
        out[name] = data.astype(np.float64)
    return out


def save(model, path):
    """Serialize parameters, vocab, scheme and config with a checksum."""
    sections = [
        ("config", model.config.to_json().encode("utf-8")),
        ("scheme", model.scheme.to_json().encode("utf-8")),
        ("vocab", model.vocab.to_json().encode("utf-8")),
        ("params", _pack_params(model.named_parameters())),
    ]
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION,
                                           len(sections))]
    for name, payload in sections:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<Q", len(payload)) + payload)
    body = b"".join(parts)
    with open(path, "wb") as handle:
        handle.write(body + hashlib.sha256(body).digest())


def load(path, expect_scheme=None):
    """Load a checkpoint; verifies checksum, version and section layout."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise CheckpointError("checkpoint file too short (truncated?)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: file is truncated or corrupt")
    if body[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint version %d" % version)
    sections = {}
    for _ in range(count):
        if pos + 2 > len(body):
            raise CheckpointError("truncated section header")
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (payload_len,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        if pos + payload_len > len(body):
            raise CheckpointError("section %r overruns the file" % name)
        sections[name] = body[pos:pos + payload_len]
        pos += payload_len
    for required in ("config", "scheme", "vocab", "params"):
        if required not in sections:
            raise CheckpointError("missing section %r" % required)

    config = TrainConfig.from_json(sections["config"].decode("utf-8"))
    scheme = corpus.TagScheme.from_json(sections["scheme"].decode("utf-8"))
    if expect_scheme is not None and scheme != expect_scheme:
        raise CheckpointError("scheme mismatch: checkpoint has %r, expected %r"
                              % (scheme, expect_scheme))
    vocab = corpus.Vocabulary.from_json(sections["vocab"].decode("utf-8"))
    params = _unpack_params(sections["params"])

    model = NerModel(scheme, vocab, config, vectors=None, rng=None)
    expected = model.named_parameters()
    if set(params) != {name for name, _ in expected}:
        raise CheckpointError("params section does not match the model layout")
    for name, tensor in expected:
        if params[name].shape != tensor.data.shape:
            raise CheckpointError("parameter %r has shape %s, expected %s"
                                  % (name, params[name].shape,
                                     tensor.data.shape))
        tensor.data = params[name].copy()
    return model
