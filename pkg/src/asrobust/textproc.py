"""Word-level vocabulary, tokenization with special tokens, and MLM masking.

Tokenization is lowercased whitespace splitting: word-level corruption, WER
scoring, and the masked-LM head all operate on the same units, which keeps the
desk-scale pipeline coherent without a subword tokenizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
MASK_ID = 3
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[MASK]")
NUM_RESERVED = len(RESERVED_TOKENS)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class Vocab:
    """Token-to-id map with fixed reserved ids; unknown tokens map to [UNK]."""

    token_to_id: dict[str, int]
    min_freq: int = 1

    def __post_init__(self):
        for tok, i in zip(RESERVED_TOKENS, range(NUM_RESERVED)):
            if self.token_to_id.get(tok) != i:
                raise ValueError(f"reserved token {tok} must have id {i}")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocab ids must be contiguous from 0")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_to_token(self) -> list[str]:
        out = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            out[i] = tok
        return out

    def save(self, path) -> None:
        """Two-column text file (token, id), sorted by id, for reproducible checkpoints."""
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    def to_text(self) -> str:
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.id_to_token())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, min_freq: int = 1) -> "Vocab":
        mapping = {}
        for line in text.splitlines():
            if not line:
                continue
            tok, _, i = line.rpartition("\t")
            mapping[tok] = int(i)
        return cls(mapping, min_freq)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


def build_vocab(corpus, min_freq: int = 1) -> Vocab:
    """Build a vocab from an iterable of texts; tokens below min_freq become [UNK].

    Deterministic given corpus order and min_freq: surviving tokens are id'd by
    descending frequency, ties broken lexicographically.
    """
    counts: dict[str, int] = {}
    saw_text = False
    for text in corpus:
        saw_text = True
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    if not saw_text:
        raise ValueError("cannot build a vocab from an empty corpus")
    kept = sorted((tok for tok, n in counts.items() if n >= min_freq),
                  key=lambda tok: (-counts[tok], tok))
    mapping = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
    for tok in kept:
        mapping[tok] = len(mapping)
    return Vocab(mapping, min_freq)


@dataclass
class TokenSeq:
    """Fixed-length id sequence: [CLS] at position 0, [PAD] beyond true_length."""

    ids: np.ndarray
    true_length: int

    def maskable_positions(self) -> np.ndarray:
        """Positions eligible for MLM masking: everything but [CLS] and padding."""
        return np.arange(1, self.true_length)


def encode(text: str, vocab: Vocab, max_len: int) -> TokenSeq:
    """Lowercase, whitespace-split, [CLS]-prefix, truncate to max_len, pad."""
    if max_len < 2:
        raise ValueError(f"max_len must be at least 2, got {max_len}")
    ids = [CLS_ID] + [vocab.lookup(tok) for tok in tokenize(text)]
    ids = ids[:max_len]
    true_length = len(ids)
    ids.extend([PAD_ID] * (max_len - true_length))
    return TokenSeq(np.array(ids, dtype=np.int64), true_length)


def apply_mlm_mask(seq: TokenSeq, ratio: float, rng: np.random.Generator,
                   vocab: Vocab) -> tuple[TokenSeq, np.ndarray, np.ndarray]:
    """Independently mask non-special positions with probability `ratio`.

    Selected positions get [MASK] 80% of the time, a random non-reserved vocab
    token 10%, and stay unchanged 10%; [CLS] and [PAD] are never selected.
    Returns (masked copy, selected positions, original ids at those positions).
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    candidates = seq.maskable_positions()
    # fixed-count draws keep the rng stream deterministic per sequence length
    selected = candidates[rng.random(candidates.size) < ratio]
    action = rng.random(candidates.size)[: selected.size]
    if len(vocab) > NUM_RESERVED:
        random_ids = rng.integers(NUM_RESERVED, len(vocab),
                                  size=candidates.size)[: selected.size]
    else:  # degenerate vocab with no real words
        random_ids = np.full(selected.size, UNK_ID, dtype=np.int64)
    masked = seq.ids.copy()
    targets = seq.ids[selected].copy()
    masked[selected[action < 0.8]] = MASK_ID
    swap = selected[(action >= 0.8) & (action < 0.9)]
    masked[swap] = random_ids[(action >= 0.8) & (action < 0.9)]
    return TokenSeq(masked, seq.true_length), selected, targets
