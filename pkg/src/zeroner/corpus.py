"""CoNLL data handling.

Covers the tag scheme (full IOB task, collapsed entity-detection task and
the expert-category space), reading and writing whitespace-separated CoNLL
files, label derivation, vocabularies, pretrained word vectors in the text
format, hashed character n-grams for out-of-vocabulary words, and
deterministic batching.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag


class CorpusError(ValueError):
    """Base class for data errors; carries a 1-based line number if known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = "line %d: %s" % (line, message)
        super().__init__(message)


class ParseError(CorpusError):
    pass


class TagError(CorpusError):
    pass


class IobError(CorpusError):
    pass


class VectorFormatError(CorpusError):
    pass


OUTSIDE = "O"
ENTITY_CATEGORY = "ENT"
DECODE_MASK = -1.0e4


def _split_tag(name):
    """'B-PER' -> ('B', 'PER'); 'O' -> ('O', None)."""
    if name == OUTSIDE:
        return OUTSIDE, None
    if len(name) > 2 and name[1] == "-" and name[0] in ("B", "I"):
        return name[0], name[2:]
    return None, None


class TagScheme:
    """Tag inventories for the full task, the collapsed task and the experts.

    Tag ids are positions in the corresponding tuple; the mapping is stable
    across save/load because the category order is part of the scheme.
    """

    def __init__(self, entity_categories):
        cats = tuple(entity_categories)
        if len(set(cats)) != len(cats) or OUTSIDE in cats:
            raise TagError("invalid entity categories: %r" % (cats,))
        self.entity_categories = cats
        self.task2_tags = (OUTSIDE,) + tuple(
            p + "-" + c for c in cats for p in ("B", "I"))
        # with no categories there is no entity class to detect either
        self.task1_tags = (OUTSIDE,) if not cats else \
            (OUTSIDE, "B-" + ENTITY_CATEGORY, "I-" + ENTITY_CATEGORY)
        self.expert_categories = (OUTSIDE,) + cats
        self._task2_ids = {t: i for i, t in enumerate(self.task2_tags)}
        self._cat_ids = {c: i for i, c in enumerate(self.expert_categories)}
        # id-level maps for label derivation
        self._to_task1 = np.zeros(len(self.task2_tags), dtype=np.intp)
        self._to_gate = np.zeros(len(self.task2_tags), dtype=np.intp)
        for i, t in enumerate(self.task2_tags):
            prefix, cat = _split_tag(t)
            if prefix == OUTSIDE:
                self._to_task1[i] = 0
                self._to_gate[i] = 0
            else:
                self._to_task1[i] = 1 if prefix == "B" else 2
                self._to_gate[i] = self._cat_ids[cat]

    @classmethod
    def from_tags(cls, tag_names):
        """Build a scheme from observed tag strings; categories are sorted."""
        cats = set()
        for name in tag_names:
            prefix, cat = _split_tag(name)
            if prefix is None:
                raise TagError("unknown tag %r" % (name,))
            if cat is not None:
                cats.add(cat)
        return cls(sorted(cats))

    @property
    def num_task2(self):
        return len(self.task2_tags)

    @property
    def num_task1(self):
        return len(self.task1_tags)

    @property
    def num_experts(self):
        return len(self.expert_categories)

    def task2_id(self, name):
        try:
            return self._task2_ids[name]
        except KeyError:
            raise TagError("unknown tag %r" % (name,))

    def __eq__(self, other):
        return (isinstance(other, TagScheme)
                and self.entity_categories == other.entity_categories)

    def __repr__(self):
        return "TagScheme(%r)" % (list(self.entity_categories),)

    def to_json(self):
        return json.dumps({"entity_categories": list(self.entity_categories)},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text)["entity_categories"])


def validate_iob(tag_ids, tags):
    """Return the index of the first invalid transition, or None if valid.

    `tags` is the tag-name tuple the ids index into. An I-X tag is valid
    only directly after B-X or I-X.
    """
    prev = OUTSIDE
    for i, tid in enumerate(tag_ids):
        name = tags[tid]
        prefix, cat = _split_tag(name)
        if prefix == "I":
            pprefix, pcat = _split_tag(prev)
            if pprefix not in ("B", "I") or pcat != cat:
                return i
        prev = name
    return None


def repair_iob(tag_ids, tags, tag_index):
    """Rewrite I-X after an incompatible predecessor to B-X, left to right."""
    out = []
    prev = OUTSIDE
    for tid in tag_ids:
        name = tags[tid]
        prefix, cat = _split_tag(name)
        if prefix == "I":
            pprefix, pcat = _split_tag(prev)
            if pprefix not in ("B", "I") or pcat != cat:
                name = "B-" + cat
        out.append(tag_index[name])
        prev = name
    return out


def iob_decode_penalties(tags):
    """(start, transition) score penalties that forbid invalid IOB moves.

    Applied at decode time only; entries are 0 for legal moves and a large
    negative constant for illegal ones.
    """
    k = len(tags)
    start = np.zeros(k)
    trans = np.zeros((k, k))
    for b, name in enumerate(tags):
        prefix, cat = _split_tag(name)
        if prefix != "I":
            continue
        start[b] = DECODE_MASK
        for a, prev in enumerate(tags):
            pprefix, pcat = _split_tag(prev)
            if pprefix not in ("B", "I") or pcat != cat:
                trans[a, b] = DECODE_MASK
    return start, trans


def derive_task1_labels(tags_task2, scheme):
    """Collapse per-category IOB ids to the entity-vs-not IOB ids."""
    return [int(scheme._to_task1[t]) for t in tags_task2]


def derive_gate_labels(tags_task2, scheme):
    """Collapse IOB ids to expert-category ids (O stays the O category)."""
    return [int(scheme._to_gate[t]) for t in tags_task2]


@dataclass
class AnnotatedSentence:
    """One sentence with gold tags and the two derived label sequences."""

    tokens: list
    tags_task2: list
    tags_task1: list
    gate_labels: list

    def __post_init__(self):
        n = len(self.tokens)
        if n < 1:
            raise ValueError("empty sentence")
        if not (len(self.tags_task2) == len(self.tags_task1)
                == len(self.gate_labels) == n):
            raise ValueError("label sequences disagree with token count %d" % n)

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_task2(cls, tokens, tags_task2, scheme):
        bad = validate_iob(tags_task2, scheme.task2_tags)
        if bad is not None:
            raise IobError("invalid IOB transition at token %d (%s)"
                           % (bad, scheme.task2_tags[tags_task2[bad]]))
        return cls(list(tokens), list(tags_task2),
                   derive_task1_labels(tags_task2, scheme),
                   derive_gate_labels(tags_task2, scheme))


def _parse_blocks(path, column):
    """Yield (tokens, tag_names, line_numbers) per sentence from a CoNLL file."""
    tokens, tags, lines = [], [], []
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            fields = raw.split()
            if not fields:
                if tokens:
                    yield tokens, tags, lines
                    tokens, tags, lines = [], [], []
                continue
            if fields[0] == "-DOCSTART-":
                continue
            idx = column if column >= 0 else len(fields) + column
            if idx < 1 or idx >= len(fields):
                raise ParseError("expected a token and a tag column, got %d "
                                 "field(s)" % len(fields), line=lineno)
            tokens.append(fields[0])
            tags.append(fields[idx])
            lines.append(lineno)
    if tokens:
        yield tokens, tags, lines


def read_conll(path, scheme, column=-1, repair=False):
    """Read an annotated CoNLL file into sentences under `scheme`.

    Tags live in `column` (negative counts from the end). With
    repair=False an invalid IOB transition raises; with repair=True the
    documented I-X -> B-X rewrite is applied instead.
    """
    sentences = []
    for tokens, tag_names, lines in _parse_blocks(path, column):
        ids = []
        prev = OUTSIDE
        for name, lineno in zip(tag_names, lines):
            prefix, cat = _split_tag(name)
            if name not in scheme._task2_ids:
                raise TagError("unknown tag %r" % (name,), line=lineno)
            if prefix == "I":
                pprefix, pcat = _split_tag(prev)
                if pprefix not in ("B", "I") or pcat != cat:
                    if not repair:
                        raise IobError("tag %s cannot follow %s" % (name, prev),
                                       line=lineno)
                    name = "B-" + cat
            ids.append(scheme._task2_ids[name])
            prev = name
        sentences.append(AnnotatedSentence(
            tokens, ids,
            derive_task1_labels(ids, scheme),
            derive_gate_labels(ids, scheme)))
    return sentences


def read_raw(path, column=-1):
    """Read (tokens, tag_names) pairs without interpreting the tags."""
    return [(tokens, tags) for tokens, tags, _ in _parse_blocks(path, column)]


def read_tokens(path):
    """Read sentences from a token-only or annotated file.

    Returns (tokens, tag_names_or_None) per sentence; single-column files
    yield None for the tags.
    """
    out = []
    tokens, tags = [], []
    with open(path, encoding="utf-8") as handle:
        for raw in handle:
            fields = raw.split()
            if not fields:
                if tokens:
                    out.append((tokens, tags if any(t is not None for t in tags) else None))
                    tokens, tags = [], []
                continue
            if fields[0] == "-DOCSTART-":
                continue
            tokens.append(fields[0])
            tags.append(fields[-1] if len(fields) > 1 else None)
    if tokens:
        out.append((tokens, tags if any(t is not None for t in tags) else None))
    return out


def write_conll(path, sentences, scheme):
    """Write sentences in canonical two-column form.

    One "token tag" line per token (single space), one blank line between
    sentences, trailing newline after the last token line. Reading a
    canonical file and writing it back is byte-identical.
    """
    blocks = []
    for sent in sentences:
        blocks.append("\n".join(
            "%s %s" % (tok, scheme.task2_tags[tid])
            for tok, tid in zip(sent.tokens, sent.tags_task2)))
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n\n".join(blocks) + "\n")


def write_tagged(path, tagged):
    """Write (tokens, tag_names) pairs in the same canonical form."""
    blocks = ["\n".join("%s %s" % (tok, tag) for tok, tag in zip(tokens, tags))
              for tokens, tags in tagged]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n\n".join(blocks) + "\n")


# -- vocabulary and vectors ---------------------------------------------------

PAD = "<pad>"
UNK = "<unk>"


class Vocabulary:
    """Word-to-index map built from source-domain training tokens.

    Lookup is total: unseen words map to the unknown index. Out-of-vocab
    embedding composition is handled separately by the n-gram table.
    """

    def __init__(self, words):
        self.index_to_word = [PAD, UNK] + list(words)
        self.word_to_index = {w: i for i, w in enumerate(self.index_to_word)}
        if len(self.word_to_index) != len(self.index_to_word):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def from_sentences(cls, sentences, min_count=1):
        counts = {}
        for sent in sentences:
            for tok in sent.tokens:
                counts[tok] = counts.get(tok, 0) + 1
        words = [w for w, c in counts.items() if c >= min_count]
        return cls(words)

    def lookup(self, word):
        return self.word_to_index.get(word, 1)

    def __contains__(self, word):
        return word in self.word_to_index

    def __len__(self):
        return len(self.index_to_word)

    def to_json(self):
        return json.dumps({"words": self.index_to_word[2:]}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text)["words"])


@dataclass
class PretrainedVectors:
    """Word vectors loaded from the text format ('count dim' header)."""

    dim: int
    vectors: dict = field(default_factory=dict)

    def get(self, word):
        return self.vectors.get(word)

    def __len__(self):
        return len(self.vectors)


def load_vectors(path):
    """Load a text-format vector file; duplicate words keep the first row."""
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().split()
        if len(header) != 2:
            raise VectorFormatError("expected 'count dim' header", line=1)
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise VectorFormatError("expected 'count dim' header", line=1)
        table = PretrainedVectors(dim)
        for lineno, raw in enumerate(handle, start=2):
            fields = raw.rstrip("\n").split(" ")
            fields = [f for f in fields if f]
            if not fields:
                continue
            word, values = fields[0], fields[1:]
            if len(values) != dim:
                raise VectorFormatError(
                    "expected %d components for %r, got %d"
                    % (dim, word, len(values)), line=lineno)
            try:
                vec = np.array([float(v) for v in values])
            except ValueError:
                raise VectorFormatError("non-numeric component for %r" % (word,),
                                        line=lineno)
            if not np.all(np.isfinite(vec)):
                raise VectorFormatError("non-finite component for %r" % (word,),
                                        line=lineno)
            if word not in table.vectors:
                table.vectors[word] = vec
        if len(table.vectors) != count:
            raise VectorFormatError(
                "header declares %d vectors, file holds %d after deduplication"
                % (count, len(table.vectors)))
    return table


# -- OOV composition from hashed character n-grams ----------------------------


def char_ngrams(word, min_n=3, max_n=6):
    """All length-[min_n, max_n] substrings of '<word>' with boundary marks."""
    padded = "<" + word + ">"
    out = []
    for i in range(len(padded)):
        for n in range(min_n, max_n + 1):
            if i + n > len(padded):
                break
            out.append(padded[i:i + n])
    return out


def ngram_bucket(ngram, buckets, seed=0):
    """FNV-1a 32-bit hash of the n-gram, folded with the seed, mod buckets."""
    h = 2166136261
    for byte in ngram.encode("utf-8"):
        h ^= byte
        h = (h * 16777619) & 0xFFFFFFFF
    return (h ^ (seed & 0xFFFFFFFF)) % buckets


def compose_oov_vector(word, ngram_table, hash_seed=0, min_n=3, max_n=6):
    """Mean of the hashed n-gram rows for `word`; shape [1 x d].

    Differentiable through the table, so the rows train jointly with the
    rest of the model whenever OOV words occur in training batches.
    """
    if not word:
        raise ValueError("cannot compose a vector for the empty word")
    buckets = ngram_table.shape[0]
    idxs = [ngram_bucket(g, buckets, hash_seed)
            for g in char_ngrams(word, min_n, max_n)]
    rows = ag.embedding_lookup(ngram_table, np.array(idxs, dtype=np.intp))
    return ag.tmean(rows, axis=0).reshape((1, ngram_table.shape[1]))


# -- batching -----------------------------------------------------------------


def batches(sentences, size, shuffle_seed):
    """Deterministically shuffled batches; the final one may be smaller."""
    if size < 1:
        raise ValueError("batch size must be >= 1, got %d" % size)
    order = np.random.default_rng(shuffle_seed).permutation(len(sentences))
    shuffled = [sentences[i] for i in order]
    return [shuffled[i:i + size] for i in range(0, len(shuffled), size)]
