"""Linear-chain CRF head.

Scores a tag sequence as start + per-token emissions + tag-to-tag
transitions + stop, normalizes with the forward algorithm in log space,
decodes with Viterbi, and exposes exhaustive-enumeration oracles for small
instances so the recursions can be checked against ground truth.
"""

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class CrfHead:
    """Emission projection plus transition, start and stop scores.

    The projection follows the fan-in uniform init; transition-family
    scores start at zero so an untrained head scores every sequence
    equally.
    """

    def __init__(self, input_dim, num_tags, rng):
        self.input_dim = input_dim
        self.num_tags = num_tags
        self.proj_w = ag.uniform_init(rng, (input_dim, num_tags), input_dim)
        self.proj_b = Tensor(np.zeros(num_tags), requires_grad=True)
        self.trans = Tensor(np.zeros((num_tags, num_tags)), requires_grad=True)
        self.start = Tensor(np.zeros(num_tags), requires_grad=True)
        self.stop = Tensor(np.zeros(num_tags), requires_grad=True)

    def emissions(self, h):
        """Project hidden states [n x input_dim] to scores [n x num_tags]."""
        return ag.matmul(h, self.proj_w) + self.proj_b

    def named_parameters(self, prefix=""):
        return [(prefix + "proj_w", self.proj_w),
                (prefix + "proj_b", self.proj_b),
                (prefix + "trans", self.trans),
                (prefix + "start", self.start),
                (prefix + "stop", self.stop)]


def _check_tags(emissions, tags):
    n, k = emissions.shape
    tags = np.asarray(tags, dtype=np.intp)
    if tags.ndim != 1 or tags.shape[0] != n:
        raise ag.ShapeError("expected %d tags, got shape %s" % (n, tags.shape))
    if tags.size and (tags.min() < 0 or tags.max() >= k):
        raise ValueError("tag id out of range [0, %d)" % k)
    return tags


def sequence_score(emissions, tags, head):
    """Score of one tag sequence under the head (differentiable scalar)."""
    tags = _check_tags(emissions, tags)
    n = emissions.shape[0]
    score = head.start[int(tags[0])] + head.stop[int(tags[-1])]
    score = score + ag.gather2d(emissions, np.arange(n), tags).sum()
    if n > 1:
        score = score + ag.gather2d(head.trans, tags[:-1], tags[1:]).sum()
    return score


def log_partition(emissions, head):
    """log sum over all K^n sequences of exp(sequence score), via the
    forward recursion in log space."""
    n, k = emissions.shape
    alpha = head.start + emissions[0:1, :]
    for i in range(1, n):
        scores = alpha.transpose() + head.trans + emissions[i:i + 1, :]
        alpha = ag.logsumexp(scores, axis=0, keepdims=True)
    return ag.logsumexp(alpha + head.stop, axis=None)


def nll(emissions, tags, head):
    """Sequence negative log-likelihood: log Z - score(gold). Always >= 0
    up to rounding."""
    return log_partition(emissions, head) - sequence_score(emissions, tags, head)


def log_marginals(emissions, head):
    """Log posterior marginals [n x K] from the forward-backward recursions.

    Differentiable; used by the optional token-level cross-entropy loss.
    """
    n, k = emissions.shape
    alphas = [head.start + emissions[0:1, :]]
    for i in range(1, n):
        scores = alphas[-1].transpose() + head.trans + emissions[i:i + 1, :]
        alphas.append(ag.logsumexp(scores, axis=0, keepdims=True))
    betas = [None] * n
    betas[n - 1] = head.stop.reshape((1, k))
    for i in range(n - 2, -1, -1):
        row = emissions[i + 1:i + 2, :] + betas[i + 1]
        betas[i] = ag.logsumexp(head.trans + row, axis=1, keepdims=False).reshape((1, k))
    log_z = ag.logsumexp(alphas[-1] + head.stop, axis=None)
    joined = ag.concat([a + b for a, b in zip(alphas, betas)], axis=0)
    return joined + ag.mul(log_z, -1.0)


def viterbi(emissions, head, start_penalty=None, trans_penalty=None):
    """Best tag sequence and its score.

    Penalty arrays (decode-time constraints) are added to the start and
    transition scores before the search. Ties resolve to the lowest tag id
    at the final step and at every backtracking step.
    """
    em = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions)
    n, k = em.shape
    trans = head.trans.data.copy()
    start = head.start.data.copy()
    if start_penalty is not None:
        start = start + start_penalty
    if trans_penalty is not None:
        trans = trans + trans_penalty
    score = start + em[0]
    backptr = np.zeros((n, k), dtype=np.intp)
    for i in range(1, n):
        cand = score[:, None] + trans
        backptr[i] = np.argmax(cand, axis=0)
        score = cand[backptr[i], np.arange(k)] + em[i]
    score = score + head.stop.data
    last = int(np.argmax(score))
    best = [last]
    for i in range(n - 1, 0, -1):
        best.append(int(backptr[i][best[-1]]))
    best.reverse()
    return best, float(score[last])


# -- enumeration oracles -------------------------------------------------------

ENUMERATION_LIMIT = 10 ** 6


def _all_sequences(n, k):
    """All K^n tag sequences, ordered so the first argmax matches Viterbi's
    tie-break (lexicographic on the reversed sequence)."""
    if k ** n > ENUMERATION_LIMIT:
        raise ValueError("instance too large to enumerate: %d^%d sequences" % (k, n))
    rows = np.indices((k,) * n).reshape(n, -1).T
    return rows[:, ::-1]


def enumerate_scores(emissions, head):
    """Scores of every possible tag sequence (see _all_sequences order)."""
    em = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions)
    n, k = em.shape
    seqs = _all_sequences(n, k)
    scores = (head.start.data[seqs[:, 0]]
              + em[np.arange(n)[None, :], seqs].sum(axis=1)
              + head.stop.data[seqs[:, -1]])
    if n > 1:
        scores = scores + head.trans.data[seqs[:, :-1], seqs[:, 1:]].sum(axis=1)
    return seqs, scores


def brute_force_log_partition(emissions, head):
    _, scores = enumerate_scores(emissions, head)
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()))


def brute_force_best(emissions, head):
    seqs, scores = enumerate_scores(emissions, head)
    idx = int(np.argmax(scores))
    return list(int(t) for t in seqs[idx]), float(scores[idx])
