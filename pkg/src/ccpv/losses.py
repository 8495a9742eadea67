"""Cross-entropy and the chirality-consistency (CC) contrastive loss.

Notation used below, per identity slot ``i`` of a batch of ``n`` identities:
``e_l`` left, ``e_r`` right, ``e_fl`` flipped-left and ``e_fr`` flipped-right
embeddings. The CC loss averages four supervised contrastive terms, each
pulling an anchor view towards a positive view of the same identity:

    (e_l, e_fr), (e_fl, e_r), (e_r, e_l), (e_fr, e_fl)
"""

import math
from dataclasses import dataclass

import torch

from .errors import DegenerateBatch, LabelOutOfRange, NonFiniteLoss

CC_PAIRINGS = (
    ("l_fr", "e_l", "e_fr"),
    ("fl_r", "e_fl", "e_r"),
    ("r_l", "e_r", "e_l"),
    ("fr_fl", "e_fr", "e_fl"),
)


@dataclass(frozen=True)
class LossWeights:
    w_ce: float = 1.0
    w_cc: float = 1.0

    def __post_init__(self):
        if self.w_ce < 0 or self.w_cc < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_ce == 0 and self.w_cc == 0:
            raise ValueError("w_ce and w_cc cannot both be zero")


@dataclass
class CCBatch:
    e_l: torch.Tensor
    e_r: torch.Tensor
    e_fl: torch.Tensor
    e_fr: torch.Tensor
    labels: torch.Tensor
    tau: float = 0.07
    as_written_denominator: bool = True

    def __post_init__(self):
        n = self.e_l.shape[0]
        if any(v.shape != self.e_l.shape for v in (self.e_r, self.e_fl, self.e_fr)):
            raise ValueError("the four views must have identical shapes")
        if n < 2:
            raise ValueError("a CC batch needs at least two slots")
        if self.labels.shape[0] != n:
            raise ValueError("labels must align with the views")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class (log-sum-exp stabilized)."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    n_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    m = logits.max(dim=1, keepdim=True).values.detach()
    lse = m.squeeze(1) + torch.log(torch.exp(logits - m).sum(dim=1))
    true = logits.gather(1, labels[:, None]).squeeze(1)
    return (lse - true).mean()


def _masked_logsumexp(x, mask):
    x = x.masked_fill(~mask, float("-inf"))
    m = x.max(dim=1, keepdim=True).values.detach()
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    return m.squeeze(1) + torch.log(torch.exp(x - m).sum(dim=1))


def cc_term(anchor, positive, labels, tau, as_written=True, positive_labels=None):
    """One supervised contrastive term between an anchor view and a positive view.

    The contrastive index set is the union of both views (``2n`` samples).
    For anchor ``i``, the positives ``P(i)`` are all positive-view slots with
    the anchor's label; the slot of the same identity in the other view
    counts, because it is a different sample. The denominator ranges over

    * ``as_written=True``: the other anchor-view slots ``a != i``, compared
      as ``anchor[i] . anchor[a]``;
    * ``as_written=False``: every positive-view slot, compared as
      ``anchor[i] . positive[a]`` (standard cross-view form).

    The per-anchor value is averaged over ``P(i)``; anchors with no positive
    are skipped and the result is the mean over the contributing anchors.
    """
    labels = torch.as_tensor(labels, device=anchor.device)
    pos_labels = labels if positive_labels is None else torch.as_tensor(positive_labels, device=anchor.device)
    n = anchor.shape[0]
    pos_mask = labels[:, None] == pos_labels[None, :]
    n_pos = pos_mask.sum(dim=1)
    contributing = n_pos > 0
    if not bool(contributing.any()):
        raise DegenerateBatch("no anchor has a positive in the batch")

    sim_pos = anchor @ positive.T / tau
    if as_written:
        if n < 2:
            raise DegenerateBatch("the as-written denominator needs at least two anchors")
        den = _masked_logsumexp(anchor @ anchor.T / tau,
                                ~torch.eye(n, dtype=torch.bool, device=anchor.device))
    else:
        den = torch.logsumexp(sim_pos, dim=1)

    log_prob = sim_pos - den[:, None]
    per_anchor = -(log_prob * pos_mask).sum(dim=1) / n_pos.clamp(min=1)
    return per_anchor[contributing].mean()


def cc_terms(batch):
    """The four CC terms keyed ``l_fr``, ``fl_r``, ``r_l``, ``fr_fl``."""
    return {
        name: cc_term(getattr(batch, a), getattr(batch, p), batch.labels, batch.tau,
                      batch.as_written_denominator)
        for name, a, p in CC_PAIRINGS
    }


def cc_loss(batch, term_weights=None):
    """Average of the four CC terms.

    ``term_weights`` (name -> weight) overrides the uniform 1/4 weighting;
    dropping terms this way reproduces loss ablations.
    """
    terms = cc_terms(batch)
    if term_weights is None:
        return sum(terms.values()) / 4.0
    return sum(term_weights.get(k, 0.0) * v for k, v in terms.items())


def total_loss(l_ce, l_cc, w):
    """``w_ce * l_ce + w_cc * l_cc``; raises :class:`NonFiniteLoss` on NaN/inf."""
    for name, val in (("l_ce", l_ce), ("l_cc", l_cc)):
        v = float(val.detach()) if isinstance(val, torch.Tensor) else float(val)
        if not math.isfinite(v):
            raise NonFiniteLoss(f"{name} is not finite ({v})")
    out = w.w_ce * l_ce + w.w_cc * l_cc
    v = float(out.detach()) if isinstance(out, torch.Tensor) else float(out)
    if not math.isfinite(v):
        raise NonFiniteLoss(f"total loss is not finite ({v})")
    return out
