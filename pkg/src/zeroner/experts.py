"""Mixture of entity experts.

One affine expert per entity category plus one for non-entity tokens. A
softmax gate over the encoder's hidden state weighs the expert features
into a per-token meta feature, and the gate itself is supervised with the
collapsed gold categories.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ExpertBank:
    """E affine experts [2H -> d_e] plus the gate projection [2H -> E]."""

    def __init__(self, input_dim, expert_dim, num_experts, rng):
        self.input_dim = input_dim
        self.expert_dim = expert_dim
        self.num_experts = num_experts
        self.experts = []
        for _ in range(num_experts):
            w = ag.uniform_init(rng, (input_dim, expert_dim), input_dim)
            b = Tensor(np.zeros(expert_dim), requires_grad=True)
            self.experts.append((w, b))
        self.gate_w = ag.uniform_init(rng, (input_dim, num_experts), input_dim)
        self.gate_b = Tensor(np.zeros(num_experts), requires_grad=True)

    def expert_features(self, h):
        """Affine expert outputs, one [n x d_e] matrix per expert.

        No nonlinearity: each expert is a single linear layer.
        """
        if h.shape[1] != self.input_dim:
            raise ag.ShapeError("expert input width %d, bank expects %d"
                                % (h.shape[1], self.input_dim))
        return [ag.matmul(h, w) + b for w, b in self.experts]

    def gate(self, h):
        """Confidence distribution over experts, rowwise softmax [n x E]."""
        return ag.softmax(ag.matmul(h, self.gate_w) + self.gate_b, axis=-1)

    def named_parameters(self, prefix=""):
        out = []
        for a, (w, b) in enumerate(self.experts):
            out.append(("%sexpert%d.w" % (prefix, a), w))
            out.append(("%sexpert%d.b" % (prefix, a), b))
        out.append((prefix + "gate_w", self.gate_w))
        out.append((prefix + "gate_b", self.gate_b))
        return out


def combine(features, alpha):
    """Convex combination of expert features under the gate weights.

    features is the length-E list from expert_features, alpha the [n x E]
    gate matrix; returns the [n x d_e] meta feature.
    """
    if len(features) != alpha.shape[1]:
        raise ag.ShapeError("%d feature blocks vs %d gate columns"
                            % (len(features), alpha.shape[1]))
    meta = ag.mul(alpha[:, 0:1], features[0])
    for a in range(1, len(features)):
        meta = meta + ag.mul(alpha[:, a:a + 1], features[a])
    return meta


def gate_loss(alpha, gate_labels, mask=None):
    """Mean over selected positions of -log alpha[i, label_i].

    `mask`, when given, is a per-position boolean include flag; an
    all-false mask contributes a zero loss.
    """
    labels = np.asarray(gate_labels, dtype=np.intp)
    n, num_experts = alpha.shape
    if labels.shape != (n,):
        raise ag.ShapeError("expected %d gate labels, got shape %s"
                            % (n, labels.shape))
    if labels.size and (labels.min() < 0 or labels.max() >= num_experts):
        raise ValueError("gate label out of range [0, %d)" % num_experts)
    rows = np.arange(n)
    if mask is not None:
        rows = rows[np.asarray(mask, dtype=bool)]
        labels = np.asarray(gate_labels, dtype=np.intp)[np.asarray(mask, dtype=bool)]
    if rows.size == 0:
        return Tensor(0.0)
    # gather before log so unselected zero entries never meet log's gradient
    picked = ag.log(ag.gather2d(alpha, rows, labels))
    return ag.mul(picked.sum(), -1.0 / rows.size)


@dataclass
class MoeeOutput:
    """Meta features, gate distribution and raw expert features for a
    sentence."""

    meta: Tensor
    alpha: Tensor
    features: list


def run_experts(h, bank):
    """Full pass: expert features, gate, and their combination."""
    features = bank.expert_features(h)
    alpha = bank.gate(h)
    return MoeeOutput(meta=combine(features, alpha), alpha=alpha,
                      features=features)


def write_gate_tsv(path, sentences, expert_names):
    """Export per-token gate confidences.

    `sentences` holds one list of (token, gold_tag, predicted_tag,
    alpha_row) per sentence. Columns are token, gold_tag, predicted_tag
    and one confidence per expert category; sentences are separated by
    blank lines.
    """
    header = "token\tgold_tag\tpredicted_tag\t" + "\t".join(expert_names)
    blocks = []
    for rows in sentences:
        lines = []
        for token, gold_tag, predicted_tag, alpha_row in rows:
            confidences = "\t".join("%.6f" % v for v in alpha_row)
            lines.append("%s\t%s\t%s\t%s"
                         % (token, gold_tag, predicted_tag, confidences))
        blocks.append("\n".join(lines))
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(header + "\n" + "\n\n".join(blocks) + "\n")
