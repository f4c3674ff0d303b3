"""Paired-data ingestion, synthetic ASR noise, word error rate, and WER buckets.

The noise channel stands in for a real recognizer: per utterance it draws a
target error rate from a triangular distribution around the configured median,
then applies that fraction of word-level edits. Substitutions pick the
lexicon word closest in character edit distance (a cheap acoustic-confusion
proxy), deletions drop the word, insertions add a frequent short word.
Since every applied edit moves the optimal alignment by at most one operation
and the per-utterance edit count is capped at the word count, the achieved
WER of a corrupted sentence never exceeds 1.0 (well inside the 1.5 bound).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class PairedExample:
    """One utterance: clean transcript, noisy transcript, optional label(s)."""

    id: str
    clean: str
    asr: str
    label: str | tuple[str, str] | None = None
    wer: float = 0.0


def _words(text: str) -> list[str]:
    return text.lower().split()


def _edit_distance(ref: list, hyp: list) -> int:
    """Levenshtein distance over sequences (two-row dynamic program)."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: str, hypothesis: str) -> float:
    """(substitutions + deletions + insertions) / reference length, word level.

    Case- and extra-whitespace-insensitive; an empty reference has no defined
    error rate and raises.
    """
    ref = _words(reference)
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    return _edit_distance(ref, _words(hypothesis)) / len(ref)


# ---------------------------------------------------------------------------
# data files: line-delimited JSON records {id, clean, asr?, label? | scenario?+action?}

def load_pairs(path) -> list[PairedExample]:
    """Parse a JSONL pair file; a missing asr field means asr := clean."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                examples.append(_parse_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from e
    return examples


def _parse_record(rec: dict) -> PairedExample:
    if not isinstance(rec, dict):
        raise ValueError("record must be a JSON object")
    ex_id = str(rec["id"])
    clean = rec["clean"]
    asr = rec.get("asr", clean)
    if "scenario" in rec or "action" in rec:
        if "label" in rec:
            raise ValueError("record has both label and scenario/action")
        label = (str(rec["scenario"]), str(rec["action"]))
    else:
        label = str(rec["label"]) if "label" in rec else None
    return PairedExample(ex_id, clean, asr, label, wer(clean, asr))


def dump_pairs(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            rec = {"id": ex.id, "clean": ex.clean, "asr": ex.asr}
            if isinstance(ex.label, tuple):
                rec["scenario"], rec["action"] = ex.label
            elif ex.label is not None:
                rec["label"] = ex.label
            f.write(json.dumps(rec) + "\n")


@dataclass(frozen=True)
class LabelMap:
    """Sorted class names per head; single-task has one head, SLURP-style two."""

    heads: tuple[tuple[str, ...], ...]

    @classmethod
    def from_examples(cls, examples) -> "LabelMap":
        labeled = [ex for ex in examples if ex.label is not None]
        if not labeled:
            raise ValueError("no labeled examples to build a label map from")
        if isinstance(labeled[0].label, tuple):
            scenarios = sorted({ex.label[0] for ex in labeled})
            actions = sorted({ex.label[1] for ex in labeled})
            return cls((tuple(scenarios), tuple(actions)))
        return cls((tuple(sorted({ex.label for ex in labeled})),))

    @property
    def head_sizes(self) -> tuple[int, ...]:
        return tuple(len(h) for h in self.heads)

    def index(self, label) -> tuple[int, ...]:
        parts = label if isinstance(label, tuple) else (label,)
        if len(parts) != len(self.heads):
            raise ValueError(f"label {label!r} does not match {len(self.heads)} heads")
        try:
            return tuple(head.index(part) for head, part in zip(self.heads, parts))
        except ValueError:
            raise ValueError(f"unknown label {label!r}") from None

    def name(self, indices: tuple[int, ...]):
        parts = tuple(head[i] for head, i in zip(self.heads, indices))
        return parts if len(parts) > 1 else parts[0]


# ---------------------------------------------------------------------------
# synthetic ASR-noise channel

@dataclass(frozen=True)
class NoiseConfig:
    """Channel parameters; the edit mix must sum to 1."""

    target_wer_median: float = 0.25
    wer_spread: float = 0.15
    sub_frac: float = 0.6
    del_frac: float = 0.2
    ins_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_wer_median < 1.0:
            raise ValueError("target_wer_median must be in [0, 1)")
        if self.wer_spread < 0.0:
            raise ValueError("wer_spread must be nonnegative")
        if min(self.sub_frac, self.del_frac, self.ins_frac) < 0.0:
            raise ValueError("edit mix fractions must be nonnegative")
        if abs(self.sub_frac + self.del_frac + self.ins_frac - 1.0) > 1e-9:
            raise ValueError("edit mix must sum to 1")


class NoiseChannel:
    """Reusable corruptor with a lexicon for substitutions and insertions."""

    def __init__(self, cfg: NoiseConfig, lexicon_texts):
        self.cfg = cfg
        counts: dict[str, int] = {}
        for text in lexicon_texts:
            for w in _words(text):
                counts[w] = counts.get(w, 0) + 1
        self.words = sorted(counts, key=lambda w: (-counts[w], w))
        short = [w for w in self.words if len(w) <= 3]
        self.fillers = short[:5] if short else ["a"]
        self._neighbor_cache: dict[str, list[str]] = {}

    def _nearest_words(self, word: str) -> list[str]:
        cached = self._neighbor_cache.get(word)
        if cached is None:
            best, cached = None, []
            for cand in self.words:
                if cand == word:
                    continue
                d = _edit_distance(list(word), list(cand))
                if best is None or d < best:
                    best, cached = d, [cand]
                elif d == best:
                    cached.append(cand)
            self._neighbor_cache[word] = cached
        return cached

    def corrupt(self, clean: str, rng: np.random.Generator) -> str:
        words = clean.split()
        n = len(words)
        if n == 0 or self.cfg.target_wer_median == 0.0:  # median 0 is the identity channel
            return clean
        if self.cfg.wer_spread == 0.0:
            target = self.cfg.target_wer_median
        else:
            lo = self.cfg.target_wer_median - self.cfg.wer_spread
            hi = self.cfg.target_wer_median + self.cfg.wer_spread
            target = float(np.clip(rng.triangular(lo, self.cfg.target_wer_median, hi),
                                   0.0, 0.999))
        if target == 0.0:
            return clean
        # probabilistic rounding keeps the corpus-level rate on target;
        # capping at n word edits bounds the achieved WER at 1.0
        exact = target * n
        n_edits = min(n, int(exact) + (1 if rng.random() < exact - int(exact) else 0))
        if n_edits == 0:
            return clean
        out: list[str | None] = list(words)
        untouched = list(range(n))  # indices into `out` that are still original words
        mix = (self.cfg.sub_frac, self.cfg.del_frac, self.cfg.ins_frac)
        for _ in range(n_edits):
            op = rng.choice(3, p=mix)
            if op != 2 and not untouched:
                op = 2
            if op == 0:  # substitution: nearest lexicon word by char edit distance
                i = untouched.pop(rng.integers(len(untouched)))
                choices = self._nearest_words(out[i]) or [self.fillers[0]]
                out[i] = choices[rng.integers(len(choices))]
            elif op == 1:  # deletion
                i = untouched.pop(rng.integers(len(untouched)))
                out[i] = None
            else:  # insertion of a frequent short word, at a random gap
                gap = rng.integers(len(out) + 1)
                out.insert(gap, self.fillers[rng.integers(len(self.fillers))])
                untouched = [k if k < gap else k + 1 for k in untouched]
        return " ".join(w for w in out if w is not None)


def synthesize_noise(clean: str, cfg: NoiseConfig, rng: np.random.Generator,
                     lexicon=None) -> str:
    """Corrupt one sentence; the substitution lexicon defaults to the sentence itself."""
    if not clean.split():
        raise ValueError("cannot corrupt an empty sentence")
    return NoiseChannel(cfg, lexicon if lexicon is not None else [clean]).corrupt(clean, rng)


def corrupt_corpus(sentences: list[str], cfg: NoiseConfig) -> list[str]:
    """Corrupt a whole corpus deterministically, lexicon built from all sentences."""
    channel = NoiseChannel(cfg, sentences)
    rng = np.random.default_rng(cfg.seed)
    return [channel.corrupt(s, rng) for s in sentences]


# ---------------------------------------------------------------------------
# WER buckets

@dataclass(frozen=True)
class WerBuckets:
    """Ordered half-open intervals covering [0, inf).

    Bucket i holds w with uppers[i-1] < w <= uppers[i]; the first bucket also
    includes its lower edge so w = 0 always lands in bucket 0. Boundary values
    belong to the lower bucket.
    """

    names: tuple[str, ...]
    uppers: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) != len(self.uppers) or not self.names:
            raise ValueError("need one upper bound per bucket name")
        if list(self.uppers) != sorted(set(self.uppers)):
            raise ValueError("bucket bounds must be strictly increasing")
        if self.uppers[-1] != np.inf:
            raise ValueError("last bucket must extend to infinity")

    def assign(self, w: float) -> str:
        return self.names[int(np.searchsorted(self.uppers, w, side="left"))]

    def intervals(self) -> list[tuple[str, float, float]]:
        lowers = (0.0,) + self.uppers[:-1]
        return list(zip(self.names, lowers, self.uppers))

    @classmethod
    def google(cls) -> "WerBuckets":
        """clean = 0, low (0, 0.16], medium (0.16, 0.4], high > 0.4."""
        return cls(("clean", "low", "medium", "high"), (0.0, 0.16, 0.4, np.inf))

    @classmethod
    def wav2vec(cls) -> "WerBuckets":
        """low [0, 0.25], medium (0.25, 0.5], high (0.5, 0.83], severe > 0.83."""
        return cls(("low", "medium", "high", "severe"), (0.25, 0.5, 0.83, np.inf))

    @classmethod
    def from_quartiles(cls, wers) -> "WerBuckets":
        """Empirical quartile boundaries; degenerate quartiles are merged away."""
        qs = np.quantile(np.asarray(list(wers), dtype=np.float64), [0.25, 0.5, 0.75])
        uppers, names = [], []
        for i, q in enumerate(qs):
            if not uppers or q > uppers[-1]:
                uppers.append(float(q))
                names.append(f"q{i + 1}")
        uppers.append(np.inf)
        names.append(f"q{len(qs) + 1}")
        return cls(tuple(names), tuple(uppers))


def bucketize(examples, buckets: WerBuckets) -> dict[str, list]:
    """Partition examples by their wer field; every example lands in one bucket."""
    out: dict[str, list] = {name: [] for name in buckets.names}
    for ex in examples:
        out[buckets.assign(ex.wer)].append(ex)
    return out
