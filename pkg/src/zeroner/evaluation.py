"""Entity-level scoring with CoNLL IOB semantics.

A predicted span counts as correct only when its start, end and category
all match a gold span. Precision (recall) falls back to 0 when nothing is
predicted (gold is empty), matching the standard scorer's convention.
"""

import json
from dataclasses import dataclass

from . import corpus
from .corpus import AnnotatedSentence, IobError


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class EntitySpan:
    """Half-open token span [start, end) with its entity category."""

    start: int
    end: int
    category: str


def extract_spans(tag_ids, scheme, repair=False):
    """Maximal entity spans of an IOB sequence.

    A span starts at B-C (or at an I-C the repair rule rewrites to B-C),
    extends through consecutive I-C, and ends before any other tag.
    Invalid sequences raise unless repair is enabled.
    """
    tags = scheme.task2_tags
    if repair:
        tag_ids = corpus.repair_iob(tag_ids, tags, scheme._task2_ids)
    else:
        bad = corpus.validate_iob(tag_ids, tags)
        if bad is not None:
            raise IobError("invalid IOB transition at token %d" % bad)
    spans = []
    open_start, open_cat = None, None
    for i, tid in enumerate(tag_ids):
        name = tags[tid]
        prefix, cat = corpus._split_tag(name)
        if prefix != "I" and open_start is not None:
            spans.append(EntitySpan(open_start, i, open_cat))
            open_start, open_cat = None, None
        if prefix == "B":
            open_start, open_cat = i, cat
    if open_start is not None:
        spans.append(EntitySpan(open_start, len(tag_ids), open_cat))
    return spans


def spans_to_tags(spans, length, scheme):
    """Rewrite spans back into a tag-id sequence (inverse of extraction)."""
    ids = [0] * length
    for span in spans:
        ids[span.start] = scheme.task2_id("B-" + span.category)
        for i in range(span.start + 1, span.end):
            ids[i] = scheme.task2_id("I-" + span.category)
    return ids


def _prf(tp, pred, gold):
    precision = 100.0 * tp / pred if pred else 0.0
    recall = 100.0 * tp / gold if gold else 0.0
    f = 2.0 * precision * recall / (precision + recall) \
        if precision + recall else 0.0
    return precision, recall, f


@dataclass
class CategoryScore:
    precision: float
    recall: float
    f1: float
    tp: int
    pred: int
    gold: int           # support


@dataclass
class F1Report:
    """Micro-averaged and per-category span scores."""

    per_category: dict
    micro_precision: float
    micro_recall: float
    micro_f1: float
    tp: int
    pred_total: int
    gold_total: int
    token_count: int

    def to_json(self):
        data = {
            "micro": {"precision": self.micro_precision,
                      "recall": self.micro_recall, "f1": self.micro_f1,
                      "tp": self.tp, "pred": self.pred_total,
                      "gold": self.gold_total},
            "tokens": self.token_count,
            "categories": {
                name: {"precision": s.precision, "recall": s.recall,
                       "f1": s.f1, "tp": s.tp, "pred": s.pred,
                       "gold": s.gold}
                for name, s in self.per_category.items()},
        }
        return json.dumps(data, sort_keys=True)

    def to_text(self):
        lines = ["processed %d tokens; gold spans %d, predicted %d, correct %d"
                 % (self.token_count, self.gold_total, self.pred_total, self.tp),
                 "micro  P %6.2f  R %6.2f  F1 %6.2f"
                 % (self.micro_precision, self.micro_recall, self.micro_f1)]
        for name in sorted(self.per_category):
            s = self.per_category[name]
            lines.append("%-6s P %6.2f  R %6.2f  F1 %6.2f  (support %d)"
                         % (name, s.precision, s.recall, s.f1, s.gold))
        return "\n".join(lines)


def _tag_sequence(x):
    return x.tags_task2 if isinstance(x, AnnotatedSentence) else x


def f1(gold, pred, scheme, repair=False):
    """Score predicted sentences against gold.

    Both arguments are lists of tag-id sequences (or AnnotatedSentence);
    they must align in sentence count and per-sentence length.
    """
    if len(gold) != len(pred):
        raise AlignmentError("sentence counts differ: %d gold vs %d predicted"
                             % (len(gold), len(pred)))
    tp = {c: 0 for c in scheme.entity_categories}
    pred_counts = {c: 0 for c in scheme.entity_categories}
    gold_counts = {c: 0 for c in scheme.entity_categories}
    tokens = 0
    for index, (g, p) in enumerate(zip(gold, pred)):
        g, p = _tag_sequence(g), _tag_sequence(p)
        if len(g) != len(p):
            raise AlignmentError(
                "sentence %d: lengths differ (%d gold vs %d predicted)"
                % (index, len(g), len(p)))
        tokens += len(g)
        gold_spans = set(extract_spans(g, scheme, repair=repair))
        pred_spans = set(extract_spans(p, scheme, repair=repair))
        for span in gold_spans:
            gold_counts[span.category] += 1
        for span in pred_spans:
            pred_counts[span.category] += 1
            if span in gold_spans:
                tp[span.category] += 1
    per_category = {}
    for cat in scheme.entity_categories:
        precision, recall, f = _prf(tp[cat], pred_counts[cat], gold_counts[cat])
        per_category[cat] = CategoryScore(precision, recall, f, tp[cat],
                                          pred_counts[cat], gold_counts[cat])
    total_tp = sum(tp.values())
    total_pred = sum(pred_counts.values())
    total_gold = sum(gold_counts.values())
    precision, recall, f = _prf(total_tp, total_pred, total_gold)
    return F1Report(per_category, precision, recall, f, total_tp, total_pred,
                    total_gold, tokens)


def score_files(gold_path, pred_path, column=-1):
    """Standalone scorer over two aligned CoNLL files.

    The scheme is inferred from the union of observed tags; predictions
    (and gold) from external files go through the IOB repair rule, which
    reproduces the standard scorer's treatment of stray I-X tags.
    """
    gold_raw = corpus.read_raw(gold_path, column)
    pred_raw = corpus.read_raw(pred_path, column)
    if len(gold_raw) != len(pred_raw):
        raise AlignmentError("sentence counts differ: %d gold vs %d predicted"
                             % (len(gold_raw), len(pred_raw)))
    names = [t for _, tags in gold_raw for t in tags]
    names += [t for _, tags in pred_raw for t in tags]
    scheme = corpus.TagScheme.from_tags(names)
    gold = [[scheme.task2_id(t) for t in tags] for _, tags in gold_raw]
    pred = [[scheme.task2_id(t) for t in tags] for _, tags in pred_raw]
    return f1(gold, pred, scheme, repair=True), scheme


@dataclass
class ComparisonRow:
    name: str
    micro_f1: float
    delta: float
    category_f1: dict
    category_delta: dict


def compare(named_reports, baseline=None):
    """Delta table of micro and per-category F1 against a baseline row.

    `named_reports` is a list of (name, F1Report); the baseline defaults
    to the first entry.
    """
    if len(named_reports) < 2:
        raise ValueError("need at least two reports to compare")
    names = [name for name, _ in named_reports]
    if baseline is None:
        baseline = names[0]
    if baseline not in names:
        raise ValueError("baseline %r is not among the reports" % (baseline,))
    base = dict(named_reports)[baseline]
    rows = []
    for name, report in named_reports:
        cat_f1 = {c: s.f1 for c, s in report.per_category.items()}
        cat_delta = {c: cat_f1[c] - base.per_category[c].f1
                     for c in cat_f1 if c in base.per_category}
        rows.append(ComparisonRow(name, report.micro_f1,
                                  report.micro_f1 - base.micro_f1,
                                  cat_f1, cat_delta))
    return rows


def comparison_text(rows):
    categories = sorted({c for row in rows for c in row.category_f1})
    width = max(len(row.name) for row in rows)
    header = "%-*s  %8s  %8s" % (width, "model", "micro", "delta")
    header += "".join("  %12s" % c for c in categories)
    lines = [header]
    for row in rows:
        line = "%-*s  %8.2f  %+8.2f" % (width, row.name, row.micro_f1, row.delta)
        for c in categories:
            line += "  %5.2f(%+5.2f)" % (row.category_f1.get(c, 0.0),
                                         row.category_delta.get(c, 0.0))
        lines.append(line)
    return "\n".join(lines)
