"""A small pre-layer-norm transformer encoder over the autodiff core.

Produces utterance representations (the hidden state at the [CLS] slot after
the final layer norm), masked-LM logits at selected positions, and logits from
one or more classification heads sharing the trunk. Desk-scale defaults train
on a CPU in minutes while exercising every code path a full-size encoder
would.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from .textproc import TokenSeq, Vocab

PAD_BIAS = -1e30  # additive attention bias; exp() underflows to exactly 0.0


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 32
    dropout_prob: float = 0.1

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ValueError("all encoder dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")


class Model:
    """Parameter container: shared trunk, MLM projection, classification heads.

    Heads are listed in ``head_sizes``; SLURP-style runs use two (scenario and
    action) over the shared trunk, single-task runs use one. ``head_labels``
    optionally carries the class names per head so checkpoints are
    self-describing for evaluation.
    """

    def __init__(self, config: EncoderConfig, head_sizes=(), params=None, head_labels=None):
        self.config = config
        self.head_sizes = tuple(head_sizes)
        self.head_labels = head_labels
        self.params: dict[str, dc.Tensor] = params if params is not None else {}

    @classmethod
    def init(cls, config: EncoderConfig, head_sizes=(), seed: int = 0, head_labels=None) -> "Model":
        rng = np.random.default_rng(seed)
        model = cls(config, head_sizes, {}, head_labels)
        d, ff, v = config.d_model, config.d_ff, config.vocab_size

        def normal(name, shape):
            model.params[name] = dc.param(rng.normal(0.0, 0.02, size=shape))

        def zeros(name, shape):
            model.params[name] = dc.param(np.zeros(shape))

        def ones(name, shape):
            model.params[name] = dc.param(np.ones(shape))

        normal("tok_emb", (v, d))
        normal("pos_emb", (config.max_len, d))
        for i in range(config.n_layers):
            p = f"layer{i}."
            ones(p + "ln1.g", (d,)); zeros(p + "ln1.b", (d,))
            for w in ("wq", "wk", "wv", "wo"):
                normal(p + w, (d, d))
            for b in ("bq", "bk", "bv", "bo"):
                zeros(p + b, (d,))
            ones(p + "ln2.g", (d,)); zeros(p + "ln2.b", (d,))
            normal(p + "w1", (d, ff)); zeros(p + "b1", (ff,))
            normal(p + "w2", (ff, d)); zeros(p + "b2", (d,))
        ones("ln_f.g", (d,)); zeros("ln_f.b", (d,))
        normal("mlm.w", (d, v)); zeros("mlm.b", (v,))
        for j, c in enumerate(model.head_sizes):
            zeros(f"head{j}.w", (d, c))  # zero heads -> uniform initial predictions
            zeros(f"head{j}.b", (c,))
        return model

    def parameters(self) -> list[dc.Tensor]:
        return list(self.params.values())

    def attach_heads(self, head_sizes, head_labels=None) -> None:
        """Add fresh zero-initialized classification heads (fine-tune entry point)."""
        if self.head_sizes:
            raise ValueError("model already has classification heads")
        d = self.config.d_model
        self.head_sizes = tuple(head_sizes)
        self.head_labels = head_labels
        for j, c in enumerate(self.head_sizes):
            self.params[f"head{j}.w"] = dc.param(np.zeros((d, c)))
            self.params[f"head{j}.b"] = dc.param(np.zeros((c,)))

    def state_values(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.params.items()}

    def load_state_values(self, state: dict[str, np.ndarray]) -> None:
        for name, values in state.items():
            self.params[name].values = np.array(values, dtype=np.float64)


def _batch_arrays(seqs: list[TokenSeq]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.stack([s.ids for s in seqs])
    lengths = np.array([s.true_length for s in seqs])
    return ids, lengths


def _forward_hidden(model: Model, ids: np.ndarray, lengths: np.ndarray,
                    dropout_on: bool, rng) -> dc.Tensor:
    """Final-layer-norm hidden states (B, L, d_model), [PAD] masked out of attention."""
    cfg = model.config
    batch, seq_len = ids.shape
    if seq_len > cfg.max_len:
        raise ValueError(f"sequence length {seq_len} exceeds max_len {cfg.max_len}")
    p = model.params
    heads, d_head = cfg.n_heads, cfg.d_model // cfg.n_heads
    drop = cfg.dropout_prob if dropout_on else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("dropout_on requires a seeded rng")

    key_bias = dc.constant(
        np.where(np.arange(seq_len)[None, :] < lengths[:, None], 0.0, PAD_BIAS)
        .reshape(batch, 1, 1, seq_len))

    x = dc.gather_rows(p["tok_emb"], ids) + dc.gather_rows(p["pos_emb"], np.arange(seq_len))
    if drop:
        x = dc.dropout(x, drop, rng)
    for i in range(cfg.n_layers):
        lp = f"layer{i}."
        h = dc.layer_norm(x, p[lp + "ln1.g"], p[lp + "ln1.b"])
        q = dc.matmul(h, p[lp + "wq"]) + p[lp + "bq"]
        k = dc.matmul(h, p[lp + "wk"]) + p[lp + "bk"]
        v = dc.matmul(h, p[lp + "wv"]) + p[lp + "bv"]
        q4 = dc.transpose(dc.reshape(q, (batch, seq_len, heads, d_head)), (0, 2, 1, 3))
        k4 = dc.transpose(dc.reshape(k, (batch, seq_len, heads, d_head)), (0, 2, 3, 1))
        v4 = dc.transpose(dc.reshape(v, (batch, seq_len, heads, d_head)), (0, 2, 1, 3))
        scores = dc.scale(dc.matmul(q4, k4), 1.0 / np.sqrt(d_head)) + key_bias
        probs = dc.softmax(scores, axis=-1)
        ctx = dc.reshape(dc.transpose(dc.matmul(probs, v4), (0, 2, 1, 3)),
                         (batch, seq_len, cfg.d_model))
        attn_out = dc.matmul(ctx, p[lp + "wo"]) + p[lp + "bo"]
        if drop:
            attn_out = dc.dropout(attn_out, drop, rng)
        x = x + attn_out
        h2 = dc.layer_norm(x, p[lp + "ln2.g"], p[lp + "ln2.b"])
        ff = dc.matmul(dc.gelu(dc.matmul(h2, p[lp + "w1"]) + p[lp + "b1"]), p[lp + "w2"])
        ff = ff + p[lp + "b2"]
        if drop:
            ff = dc.dropout(ff, drop, rng)
        x = x + ff
    return dc.layer_norm(x, p["ln_f.g"], p["ln_f.b"])


def encode_batch(model: Model, seqs: list[TokenSeq], dropout_on: bool = False,
                 rng: np.random.Generator | None = None) -> dc.Tensor:
    """Utterance representations: last-layer hidden state at position 0, (N, d_model)."""
    ids, lengths = _batch_arrays(seqs)
    hidden = _forward_hidden(model, ids, lengths, dropout_on, rng)
    return dc.index_axis(hidden, axis=1, index=0)


def mlm_logits(model: Model, seqs: list[TokenSeq], positions,
               dropout_on: bool = False, rng: np.random.Generator | None = None) -> dc.Tensor:
    """Vocab logits at the given (sequence, position) pairs, (P, vocab_size).

    Zero positions yield an empty (0, vocab_size) tensor, so a downstream MLM
    loss contributes exactly 0.
    """
    ids, lengths = _batch_arrays(seqs)
    positions = np.asarray(positions, dtype=np.intp).reshape(-1, 2)
    if positions.size:
        if positions[:, 0].max() >= ids.shape[0] or positions[:, 1].max() >= ids.shape[1] \
                or positions.min() < 0:
            raise IndexError("masked position out of range")
    hidden = _forward_hidden(model, ids, lengths, dropout_on, rng)
    picked = dc.gather_positions(hidden, positions[:, 0], positions[:, 1])
    return dc.matmul(picked, model.params["mlm.w"]) + model.params["mlm.b"]


def classify(model: Model, reps: dc.Tensor) -> list[dc.Tensor]:
    """Per-head logits over shared representations; one (N, C_head) tensor per head."""
    return [dc.matmul(reps, model.params[f"head{j}.w"]) + model.params[f"head{j}.b"]
            for j in range(len(model.head_sizes))]


# ---------------------------------------------------------------------------
# checkpointing: a zip of .npy arrays + meta.json + vocab.txt with fixed
# timestamps, so identical runs produce bitwise-identical files

_EPOCH_STAMP = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, model: Model, vocab: Vocab) -> None:
    meta = {
        "format": 1,
        "encoder": asdict(model.config),
        "head_sizes": list(model.head_sizes),
        "head_labels": model.head_labels,
        "min_freq": vocab.min_freq,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        def put(name, data: bytes):
            zf.writestr(zipfile.ZipInfo(name, date_time=_EPOCH_STAMP), data)

        put("meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        put("vocab.txt", vocab.to_text().encode())
        for name in sorted(model.params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, model.params[name].values, allow_pickle=False)
            put(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path) -> tuple[Model, Vocab]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        vocab = Vocab.from_text(zf.read("vocab.txt").decode(), meta.get("min_freq", 1))
        params = {}
        prefix = "params/"
        for name in zf.namelist():
            if name.startswith(prefix) and name.endswith(".npy"):
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                params[name[len(prefix):-4]] = dc.param(arr)
    config = EncoderConfig(**meta["encoder"])
    model = Model(config, meta["head_sizes"], params, meta.get("head_labels"))
    return model, vocab
