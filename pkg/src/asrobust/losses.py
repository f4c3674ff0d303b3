"""Training objectives: contrastive pre-training and self-distilled fine-tuning.

Pre-training combines an in-batch contrastive loss over paired clean/noisy
utterance representations with a masked-LM term. Fine-tuning combines cross
entropy, a supervised contrastive loss over hard labels, self-distillation
against the previous epoch's predictions, and a soft contrastive loss whose
pair weights are inner products of those previous predictions.

All losses are composed from diffcore primitives, so gradients flow through
every representation appearing in an expression; cached previous predictions
enter as constants. Similarities are cosine, so losses are invariant to
positive rescaling of any representation row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

DIAG_MASK = -1e30  # removes self-similarity from every denominator


@dataclass(frozen=True)
class LossWeights:
    """Temperatures and mixing weights; defaults follow the reference setting."""

    tau_c: float = 0.2
    tau_sc: float = 0.2
    tau_d: float = 5.0
    lam_mlm: float = 1.0
    lam_sc: float = 0.1
    lam_d: float = 10.0

    def __post_init__(self):
        if min(self.tau_c, self.tau_sc, self.tau_d) <= 0.0:
            raise ValueError("temperatures must be strictly positive")
        if min(self.lam_mlm, self.lam_sc, self.lam_d) < 0.0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class ContrastiveBatch:
    """Index-aligned clean/noisy representation pairs from one mini-batch."""

    reps_clean: Tensor
    reps_asr: Tensor

    def __post_init__(self):
        if self.reps_clean.shape != self.reps_asr.shape:
            raise ValueError("clean and asr representations must have equal shapes")
        if self.reps_clean.ndim != 2:
            raise ValueError("representations must be (N, D) matrices")

    @property
    def n(self) -> int:
        return self.reps_clean.shape[0]


@dataclass
class LabeledBatch:
    """Representations with per-head labels and cached previous predictions.

    ``labels`` holds one index tuple per example (one entry per head);
    ``prev_probs`` holds one (N, C_head) probability matrix per head, treated
    as constants by every loss.
    """

    reps: Tensor
    labels: list[tuple[int, ...]]
    prev_probs: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.reps.ndim != 2 or len(self.labels) != self.reps.shape[0]:
            raise ValueError("labels must align with an (N, D) representation matrix")
        if self.prev_probs is not None:
            for probs in self.prev_probs:
                if probs.shape[0] != self.n:
                    raise ValueError("prev_probs rows must align with the batch")
                if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-9:
                    raise ValueError("prev_probs rows must sum to 1")

    @property
    def n(self) -> int:
        return self.reps.shape[0]

    def label_array(self) -> np.ndarray:
        return np.array(self.labels, dtype=np.int64).reshape(self.n, -1)


def _pairwise_log_softmax(reps: Tensor, tau: float) -> Tensor:
    """Row-wise log softmax of the cosine-similarity matrix, self-pairs removed."""
    u = dc.unit_rows(reps)
    sims = dc.scale(dc.matmul(u, dc.transpose(u)), 1.0 / tau)
    n = reps.shape[0]
    masked = sims + dc.constant(np.diag(np.full(n, DIAG_MASK)))
    return dc.log_softmax(masked, axis=1)


def l_c(batch: ContrastiveBatch, tau_c: float) -> Tensor:
    """Self-supervised contrastive loss over 2N pooled representations.

    Every (clean_i, asr_i) and (asr_i, clean_i) pair is a directed positive;
    the denominator for an anchor runs over all other pooled representations.
    """
    if tau_c <= 0.0:
        raise ValueError("tau_c must be positive")
    n = batch.n
    if n < 1:
        raise ValueError("contrastive loss needs a nonempty batch")
    pooled = dc.concat([batch.reps_clean, batch.reps_asr], axis=0)
    log_probs = _pairwise_log_softmax(pooled, tau_c)
    anchors = np.arange(2 * n)
    positives = np.concatenate([anchors[n:], anchors[:n]])
    return dc.scale(dc.take_pairs(log_probs, anchors, positives).sum(), -1.0 / (2 * n))


def l_mlm(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross entropy over masked positions; exactly 0 when none are masked."""
    targets = np.asarray(targets, dtype=np.intp)
    if targets.size == 0:
        return dc.constant(0.0)
    return dc.cross_entropy_rows(logits, targets)


def l_pt(l_c_val: Tensor, l_mlm_val: Tensor, lam_mlm: float) -> Tensor:
    """Pre-training objective: contrastive term plus weighted MLM term."""
    return l_c_val + dc.scale(l_mlm_val, lam_mlm)


def l_hard(batch: LabeledBatch, tau_sc: float) -> Tensor:
    """Supervised contrastive loss: same-label pairs are positives.

    Uses the 1/N outer normalization (not per-positive-count); anchors with no
    positive in the batch contribute 0. In two-head mode two examples count as
    same-label only when every head's label matches.
    """
    if batch.n < 2:
        raise ValueError("supervised contrastive loss needs at least 2 examples")
    labels = batch.label_array()
    same = np.all(labels[:, None, :] == labels[None, :, :], axis=-1).astype(np.float64)
    np.fill_diagonal(same, 0.0)
    log_probs = _pairwise_log_softmax(batch.reps, tau_sc)
    return dc.scale(dc.mul(dc.constant(same), log_probs).sum(), -1.0 / batch.n)


def l_d(batch: LabeledBatch, current_logits: list[Tensor], tau_d: float) -> Tensor:
    """Self-distillation: mean KL(previous prediction || current prediction).

    Both sides are temperature-scaled; the previous predictions are constants
    (no gradient reaches the cache), with the 0*log(0) = 0 convention so
    one-hot first-epoch targets are handled exactly. Gradients reach only
    ``current_logits``. Two heads contribute additively.
    """
    if batch.prev_probs is None:
        raise ValueError("self-distillation needs cached previous predictions")
    if len(current_logits) != len(batch.prev_probs):
        raise ValueError("one logits tensor per head required")
    total = dc.constant(0.0)
    for logits, prev in zip(current_logits, batch.prev_probs):
        log_current = dc.log_softmax(dc.scale(logits, 1.0 / tau_d), axis=1)
        nonzero = prev > 0.0
        entropy = float(np.sum(prev[nonzero] * np.log(prev[nonzero])))
        cross = dc.mul(dc.constant(prev), log_current).sum()
        total = total + dc.scale(dc.constant(entropy) - cross, 1.0 / batch.n)
    return total


def l_soft(batch: LabeledBatch, tau_sc: float) -> Tensor:
    """Soft contrastive loss: pair weights are previous-prediction inner products.

    The weight for (i, j) is p_i . p_j from the cached distributions (a
    constant in [0, 1]); per head in two-head mode, summed across heads.
    """
    if batch.n < 2:
        raise ValueError("soft contrastive loss needs at least 2 examples")
    if batch.prev_probs is None:
        raise ValueError("soft contrastive loss needs cached previous predictions")
    log_probs = _pairwise_log_softmax(batch.reps, tau_sc)
    total = dc.constant(0.0)
    for prev in batch.prev_probs:
        weights = prev @ prev.T
        np.fill_diagonal(weights, 0.0)
        total = total + dc.scale(dc.mul(dc.constant(weights), log_probs).sum(),
                                 -1.0 / batch.n)
    return total


def l_ce_multihead(logits_list: list[Tensor], labels: list[tuple[int, ...]]) -> Tensor:
    """Sum over heads of mean cross entropy against that head's labels."""
    label_arr = np.array(labels, dtype=np.intp).reshape(len(labels), -1)
    if label_arr.shape[1] != len(logits_list):
        raise ValueError(f"{label_arr.shape[1]} label components for "
                         f"{len(logits_list)} heads")
    total = dc.cross_entropy_rows(logits_list[0], label_arr[:, 0])
    for j in range(1, len(logits_list)):
        total = total + dc.cross_entropy_rows(logits_list[j], label_arr[:, j])
    return total


def l_ft(l_ce_val: Tensor, l_d_val: Tensor, l_hard_val: Tensor, l_soft_val: Tensor,
         weights: LossWeights) -> Tensor:
    """Fine-tuning objective: ce + lam_d*d + lam_sc*(hard + lam_d*soft)."""
    contrastive = l_hard_val + dc.scale(l_soft_val, weights.lam_d)
    return l_ce_val + dc.scale(l_d_val, weights.lam_d) + dc.scale(contrastive, weights.lam_sc)
