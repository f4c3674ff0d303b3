"""Two-stage training: contrastive pre-training, then self-distilled fine-tuning.

Pre-training draws mini-batches of (clean, noisy) pairs, encodes both sides
with dropout on, and optimizes the contrastive + masked-LM objective. In
``simcse_dropout`` pairing mode the second view is a second dropout pass of
the same noisy sentence instead of the clean transcript.

Fine-tuning optimizes cross entropy plus supervised contrastive, self
distillation, and soft contrastive terms. A prediction cache holds the
previous epoch's temperature-scaled distributions (one-hot labels before the
first epoch); it is rebuilt by a full dropout-off inference pass at each epoch
boundary, never mid-epoch, so every batch in epoch t distills from epoch t-1.

Every random choice (init, batch order, dropout, masking) comes from one
generator seeded by the config, so a fixed (seed, config, data) triple yields
bitwise-identical loss logs and final parameters on one machine.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field, fields

import numpy as np

from . import diffcore as dc
from . import losses as L
from .corpus import LabelMap, PairedExample
from .encoder import EncoderConfig, Model, classify, encode_batch, mlm_logits
from .losses import ContrastiveBatch, LabeledBatch, LossWeights
from .textproc import Vocab, apply_mlm_mask, encode, tokenize

PAIRING_MODES = ("clean_asr", "simcse_dropout")
MLM_SIDES = ("clean", "asr", "both")
FINETUNE_DATA = ("asr", "manual", "manual_plus_asr")


@dataclass
class TrainingConfig:
    """All knobs for both stages; defaults follow the reference hyperparameters."""

    # temperatures and loss weights
    tau_c: float = 0.2
    tau_sc: float = 0.2
    tau_d: float = 5.0
    lam_mlm: float = 1.0
    lam_sc: float = 0.1
    lam_d: float = 10.0
    mask_ratio: float = 0.15
    # schedules
    pretrain_steps: int = 10000
    pretrain_batch: int = 128
    finetune_epochs: int = 10
    finetune_batch: int = 256
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.05
    patience: int = 3
    val_fraction: float = 0.1
    seed: int = 0
    # data routing
    pairing_mode: str = "clean_asr"
    mlm_side: str = "both"
    finetune_data: str = "asr"
    slurp_mode: bool = False
    # ablation switches (weights of 0 disable the matching loss terms)
    use_contrastive: bool = True
    use_soft: bool = True
    # encoder
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 32
    dropout_prob: float = 0.1
    min_freq: int = 1

    def __post_init__(self):
        if self.pairing_mode not in PAIRING_MODES:
            raise ValueError(f"pairing_mode must be one of {PAIRING_MODES}")
        if self.mlm_side not in MLM_SIDES:
            raise ValueError(f"mlm_side must be one of {MLM_SIDES}")
        if self.finetune_data not in FINETUNE_DATA:
            raise ValueError(f"finetune_data must be one of {FINETUNE_DATA}")
        if self.pretrain_batch < 2 or self.finetune_batch < 2:
            raise ValueError("contrastive stages need batch sizes of at least 2")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        self.weights()  # validates temperatures / weights

    def weights(self) -> LossWeights:
        return LossWeights(self.tau_c, self.tau_sc, self.tau_d,
                           self.lam_mlm, self.lam_sc, self.lam_d)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size, self.d_model, self.n_layers, self.n_heads,
                             self.d_ff, self.max_len, self.dropout_prob)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainingConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


class Adam:
    """Per-parameter adaptive steps with optional linear warmup."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 warmup_steps=0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.t += 1
        lr_t = self.lr
        if self.warmup_steps > 0:
            lr_t *= min(1.0, self.t / self.warmup_steps)
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.values = p.values - lr_t * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class PredictionCache:
    """Per-example previous-epoch distributions p^{t-1}, one row per head.

    ``epoch`` stamps which epoch produced the rows; 0 means the one-hot labels
    that seed self-distillation before the first epoch.
    """

    probs: dict[str, list[np.ndarray]]
    epoch: int = 0

    def rows(self, uids) -> list[np.ndarray]:
        """Stacked (N, C_head) matrices per head for a batch of example ids."""
        missing = [u for u in uids if u not in self.probs]
        if missing:
            raise RuntimeError(f"examples missing from prediction cache: {missing[:3]}")
        n_heads = len(next(iter(self.probs.values())))
        return [np.stack([self.probs[u][h] for u in uids]) for h in range(n_heads)]


def init_cache(examples: list[PairedExample], label_map: LabelMap) -> PredictionCache:
    """Epoch-0 cache: the exact one-hot of each example's label, per head."""
    probs = {}
    for ex in examples:
        if ex.label is None:
            raise ValueError(f"example {ex.id} has no label")
        probs[ex.id] = _onehots(label_map.index(ex.label), label_map.head_sizes)
    return PredictionCache(probs, epoch=0)


def _onehots(indices, head_sizes) -> list[np.ndarray]:
    rows = []
    for idx, size in zip(indices, head_sizes):
        row = np.zeros(size)
        row[idx] = 1.0
        rows.append(row)
    return rows


def snapshot_predictions(model: Model, seqs, uids, tau_d: float, epoch: int = 0,
                         batch_size: int = 128) -> PredictionCache:
    """Dropout-off inference pass caching softmax(logits / tau_d) per head."""
    probs: dict[str, list[np.ndarray]] = {}
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        reps = encode_batch(model, chunk, dropout_on=False)
        head_probs = [_stable_softmax(lg.values / tau_d) for lg in classify(model, reps)]
        for row, uid in enumerate(uids[start:start + batch_size]):
            probs[uid] = [hp[row] for hp in head_probs]
    return PredictionCache(probs, epoch=epoch)


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _effective_len(texts, max_len: int) -> int:
    longest = max((len(tokenize(t)) for t in texts), default=0)
    return max(2, min(max_len, longest + 1))


def _open_log(path):
    return open(path, "w", encoding="utf-8") if path else None


# ---------------------------------------------------------------------------
# stage 1: contrastive pre-training

def pretrain(model: Model, pairs: list[PairedExample], vocab: Vocab,
             cfg: TrainingConfig, log_path=None) -> tuple[Model, list[dict]]:
    """Run cfg.pretrain_steps of L_c + lam_mlm * L_mlm; returns (model, history)."""
    if not pairs:
        raise ValueError("pre-training needs a nonempty pair list")
    rng = np.random.default_rng(cfg.seed)
    seq_len = _effective_len([p.clean for p in pairs] + [p.asr for p in pairs], cfg.max_len)
    clean_seqs = [encode(p.clean, vocab, seq_len) for p in pairs]
    asr_seqs = [encode(p.asr, vocab, seq_len) for p in pairs]
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
               cfg.adam_eps, warmup_steps=math.ceil(cfg.warmup_frac * cfg.pretrain_steps))
    history = []
    log = _open_log(log_path)
    try:
        for step in range(cfg.pretrain_steps):
            idx = rng.choice(len(pairs), size=cfg.pretrain_batch,
                             replace=len(pairs) < cfg.pretrain_batch)
            if cfg.pairing_mode == "simcse_dropout":
                view_a = view_b = [asr_seqs[i] for i in idx]
            else:
                view_a = [clean_seqs[i] for i in idx]
                view_b = [asr_seqs[i] for i in idx]

            lc_term = None
            if cfg.use_contrastive:
                reps_a = encode_batch(model, view_a, dropout_on=True, rng=rng)
                reps_b = encode_batch(model, view_b, dropout_on=True, rng=rng)
                lc_term = L.l_c(ContrastiveBatch(reps_a, reps_b), cfg.tau_c)

            mlm_term = None
            if cfg.lam_mlm > 0.0:
                mlm_term = _mlm_loss(model, cfg, rng, view_a, view_b, vocab)

            if lc_term is None and mlm_term is None:
                raise ValueError("pre-training has no active loss terms")
            if lc_term is None:
                total = dc.scale(mlm_term, cfg.lam_mlm)
            elif mlm_term is None:
                total = lc_term
            else:
                total = L.l_pt(lc_term, mlm_term, cfg.lam_mlm)

            dc.zero_grads(model.parameters())
            dc.backward(total)
            opt.step()
            record = {"step": step,
                      "l_c": 0.0 if lc_term is None else lc_term.item(),
                      "l_mlm": 0.0 if mlm_term is None else mlm_term.item(),
                      "l_pt": total.item()}
            history.append(record)
            if log:
                log.write(json.dumps(record) + "\n")
    finally:
        if log:
            log.close()
    return model, history


def _mlm_loss(model, cfg, rng, view_a, view_b, vocab):
    """Masked-LM loss over the configured side(s); masked copies get their own pass."""
    if cfg.pairing_mode == "simcse_dropout":
        sides = [view_b]  # only one distinct text stream exists
    else:
        sides = {"clean": [view_a], "asr": [view_b], "both": [view_a, view_b]}[cfg.mlm_side]
    logits_parts, target_parts = [], []
    for side in sides:
        masked, pairs_pos, targets = [], [], []
        for row, seq in enumerate(side):
            mseq, positions, tgt = apply_mlm_mask(seq, cfg.mask_ratio, rng, vocab)
            masked.append(mseq)
            pairs_pos.extend((row, pos) for pos in positions)
            targets.extend(tgt)
        if pairs_pos:
            logits_parts.append(mlm_logits(model, masked, pairs_pos,
                                           dropout_on=True, rng=rng))
            target_parts.append(np.array(targets, dtype=np.intp))
    if not logits_parts:
        return dc.constant(0.0)
    logits = logits_parts[0] if len(logits_parts) == 1 else dc.concat(logits_parts, axis=0)
    return L.l_mlm(logits, np.concatenate(target_parts))


# ---------------------------------------------------------------------------
# stage 2: fine-tuning with supervised contrastive learning + self-distillation

@dataclass
class _Items:
    """Fine-tuning rows after side selection; uids stay unique across sides."""

    uids: list[str] = field(default_factory=list)
    seqs: list = field(default_factory=list)
    labels: list[tuple[int, ...]] = field(default_factory=list)


def _finetune_batch_loss(model: Model, seqs, labels, prev_probs, cfg: TrainingConfig,
                         rng) -> tuple[dc.Tensor, dict]:
    """One fine-tuning forward: L_ce + lam_d*L_d + lam_sc*(L_hard + lam_d*L_soft).

    Zero-weighted terms are never evaluated (their log columns stay exactly 0),
    which also makes the lam_d = lam_sc = 0 reduction bitwise-identical to a
    plain cross-entropy trainer.
    """
    reps = encode_batch(model, seqs, dropout_on=cfg.dropout_prob > 0.0, rng=rng)
    logits = classify(model, reps)
    ce = L.l_ce_multihead(logits, labels)
    use_d = cfg.lam_d > 0.0
    use_sc = cfg.lam_sc > 0.0 and len(seqs) >= 2
    use_soft = use_d and use_sc and cfg.use_soft
    zero = dc.constant(0.0)
    batch = LabeledBatch(reps, labels, prev_probs if (use_d or use_soft) else None)
    ld = L.l_d(batch, logits, cfg.tau_d) if use_d else zero
    lhard = L.l_hard(batch, cfg.tau_sc) if use_sc else zero
    lsoft = L.l_soft(batch, cfg.tau_sc) if use_soft else zero
    total = L.l_ft(ce, ld, lhard, lsoft, cfg.weights())
    parts = {"l_ce": ce.item(), "l_d": ld.item(), "l_hard": lhard.item(),
             "l_soft": lsoft.item(), "l_ft": total.item()}
    return total, parts


def _split_metric(model: Model, seqs, labels) -> float:
    """Accuracy (single head) or joint accuracy (all heads correct)."""
    correct = 0
    for start in range(0, len(seqs), 128):
        chunk = seqs[start:start + 128]
        reps = encode_batch(model, chunk, dropout_on=False)
        preds = np.stack([lg.values.argmax(axis=1) for lg in classify(model, reps)], axis=1)
        gold = np.array(labels[start:start + len(chunk)])
        correct += int(np.all(preds == gold, axis=1).sum())
    return correct / len(seqs)


def finetune(model: Model, examples: list[PairedExample], vocab: Vocab,
             cfg: TrainingConfig, label_map: LabelMap | None = None,
             log_path=None) -> tuple[Model, dict]:
    """Fine-tune with early stopping; returns (best-validation model, history)."""
    labeled = [ex for ex in examples if ex.label is not None]
    if not labeled:
        raise ValueError("fine-tuning needs labeled examples")
    if label_map is None:
        label_map = LabelMap.from_examples(labeled)
    if not model.head_sizes:
        model.attach_heads(label_map.head_sizes, [list(h) for h in label_map.heads])
    elif tuple(model.head_sizes) != label_map.head_sizes:
        raise ValueError(f"model heads {model.head_sizes} do not match "
                         f"label map {label_map.head_sizes}")

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(labeled))
    n_val = int(round(cfg.val_fraction * len(labeled)))
    val_examples = [labeled[i] for i in perm[:n_val]]
    train_examples = [labeled[i] for i in perm[n_val:]]
    if not train_examples:
        raise ValueError("validation split consumed every labeled example")

    items = _Items()
    for ex in train_examples:
        if cfg.finetune_data in ("asr", "manual_plus_asr"):
            items.uids.append(ex.id + "#asr")
            items.seqs.append(ex.asr)
            items.labels.append(label_map.index(ex.label))
        if cfg.finetune_data in ("manual", "manual_plus_asr"):
            items.uids.append(ex.id + "#clean")
            items.seqs.append(ex.clean)
            items.labels.append(label_map.index(ex.label))
    seq_len = _effective_len(items.seqs + [ex.asr for ex in val_examples], cfg.max_len)
    items.seqs = [encode(t, vocab, seq_len) for t in items.seqs]
    val_seqs = [encode(ex.asr, vocab, seq_len) for ex in val_examples]
    val_labels = [label_map.index(ex.label) for ex in val_examples]

    cache = PredictionCache(
        {uid: _onehots(lab, label_map.head_sizes)
         for uid, lab in zip(items.uids, items.labels)}, epoch=0)

    n = len(items.uids)
    steps_per_epoch = math.ceil(n / cfg.finetune_batch)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
               cfg.adam_eps,
               warmup_steps=math.ceil(cfg.warmup_frac * steps_per_epoch * cfg.finetune_epochs))

    history: list[dict] = []
    best_metric, best_state, best_epoch, since_best = -np.inf, None, 0, 0
    global_step = 0
    log = _open_log(log_path)
    try:
        for epoch in range(1, cfg.finetune_epochs + 1):
            order = rng.permutation(n)
            sums = {"l_ce": 0.0, "l_d": 0.0, "l_hard": 0.0, "l_soft": 0.0, "l_ft": 0.0}
            for start in range(0, n, cfg.finetune_batch):
                bidx = order[start:start + cfg.finetune_batch]
                uids = [items.uids[i] for i in bidx]
                seqs = [items.seqs[i] for i in bidx]
                labels = [items.labels[i] for i in bidx]
                prev = cache.rows(uids)
                total, parts = _finetune_batch_loss(model, seqs, labels, prev, cfg, rng)
                dc.zero_grads(model.parameters())
                dc.backward(total)
                opt.step()
                for k in sums:
                    sums[k] += parts[k]
                if log:
                    log.write(json.dumps({"epoch": epoch, "step": global_step, **parts}) + "\n")
                global_step += 1
            # epoch boundary: refresh the cache, then validate
            cache = snapshot_predictions(model, items.seqs, items.uids, cfg.tau_d, epoch)
            val_metric = _split_metric(model, val_seqs, val_labels) if val_seqs else None
            row = {"epoch": epoch, "val_metric": val_metric,
                   **{k: v / steps_per_epoch for k, v in sums.items()}}
            history.append(row)
            if val_metric is None:
                continue
            if val_metric > best_metric:
                best_metric, best_state, best_epoch, since_best = \
                    val_metric, model.state_values(), epoch, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    finally:
        if log:
            log.close()
    if best_state is not None:
        model.load_state_values(best_state)
    return model, {"epochs": history, "best_epoch": best_epoch,
                   "best_val_metric": None if best_state is None else best_metric,
                   "label_heads": [list(h) for h in label_map.heads]}
