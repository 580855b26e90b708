"""Report-quality, label-agreement and accuracy metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .labels import LABELS, N_LABELS

BLEU_EPS = 1e-9
KL_FLOOR = 1e-12
SCHEMA_VERSION = 1


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, reference, n: int = 4) -> float:
    """Sentence BLEU-n: geometric mean of clipped 1..n-gram precisions times brevity penalty.

    Zero match counts (or no candidate n-grams at all) are replaced by 1e-9
    before taking logs. An empty candidate scores 0.
    """
    if n not in (1, 2, 3, 4):
        raise ValueError("n must be in 1..4")
    candidate, reference = list(candidate), list(reference)
    if not reference:
        raise ValueError("reference must be non-empty")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for i in range(1, n + 1):
        cand, ref = _ngrams(candidate, i), _ngrams(reference, i)
        total = sum(cand.values())
        matched = sum(min(c, ref[g]) for g, c in cand.items())
        if matched == 0:
            p = BLEU_EPS / max(total, 1)
        else:
            p = matched / total
        log_sum += math.log(p)
    c, r = len(candidate), len(reference)
    bp = math.exp(1.0 - r / c) if c < r else 1.0
    return bp * math.exp(log_sum / n)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """ROUGE-L F1 from longest-common-subsequence precision and recall."""
    candidate, reference = list(candidate), list(reference)
    if not reference:
        raise ValueError("reference must be non-empty")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def corpus_bleu(candidates, references, n: int) -> float:
    """Mean of sentence-level BLEU-n."""
    scores = [bleu_n(c, r, n) for c, r in zip(candidates, references, strict=True)]
    if not scores:
        raise ValueError("no sentence pairs")
    return float(np.mean(scores))


def corpus_rouge_l(candidates, references) -> float:
    scores = [rouge_l(c, r) for c, r in zip(candidates, references, strict=True)]
    if not scores:
        raise ValueError("no sentence pairs")
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# label agreement


def top_k_labels(scores, k: int) -> set[int]:
    """Indices of the k highest scores; equal scores go to the lower label index."""
    scores = np.asarray(scores, dtype=float)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return set(order[:k])


def top_k_common(real, gen, k: int) -> int:
    if not 1 <= k <= N_LABELS:
        raise ValueError(f"k must be in 1..{N_LABELS}")
    return len(top_k_labels(real, k) & top_k_labels(gen, k))


def aggregate_top_k(pairs, k: int) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("aggregate_top_k needs at least one pair")
    return sum(top_k_common(a, b, k) for a, b in pairs) / len(pairs)


def precision_at_k(mean_top_k: float, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return mean_top_k / k


def recall_at_k(mean_top_k: float) -> float:
    return mean_top_k / N_LABELS


def _normalize(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    total = s.sum()
    if total <= 0:
        return np.full(len(s), 1.0 / len(s))
    return s / total


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats after normalising both score vectors to sum to one."""
    p_hat, q_hat = _normalize(p), np.maximum(_normalize(q), KL_FLOOR)
    nz = p_hat > 0
    return max(0.0, float(np.sum(p_hat[nz] * np.log(p_hat[nz] / q_hat[nz]))))


def per_label_accuracy(predicted, truth) -> list[float]:
    predicted = np.asarray(predicted, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if predicted.shape != truth.shape:
        raise ValueError(f"prediction/truth shape mismatch {predicted.shape} vs {truth.shape}")
    if predicted.ndim != 2 or len(predicted) < 1:
        raise ValueError("need at least one label row")
    return (predicted == truth).mean(axis=0).tolist()


# ---------------------------------------------------------------------------
# bundle


@dataclass
class MetricsBundle:
    bleu: dict[int, float] = field(default_factory=dict)
    rouge: float | None = None
    top_k: dict[int, float] = field(default_factory=dict)
    precision_at_k: dict[int, float] = field(default_factory=dict)
    recall_at_k: dict[int, float] = field(default_factory=dict)
    kl_mean: float | None = None
    per_label_accuracy: list[float] = field(default_factory=list)
    pair_count: int = 0
    meta: dict = field(default_factory=dict)

    def check(self) -> None:
        for name, value in self._flat():
            if not math.isfinite(value):
                raise ValueError(f"{name} is not finite")
        unit = [*self.bleu.values(), *self.precision_at_k.values(),
                *self.recall_at_k.values(), *self.per_label_accuracy]
        if self.rouge is not None:
            unit.append(self.rouge)
        if any(not 0.0 <= v <= 1.0 for v in unit):
            raise ValueError("a [0, 1] score is out of range")
        if any(not 0.0 <= v <= k for k, v in self.top_k.items()):
            raise ValueError("top-k mean outside [0, k]")
        if self.kl_mean is not None and self.kl_mean < 0:
            raise ValueError("negative KL")

    def _flat(self):
        for n, v in sorted(self.bleu.items()):
            yield f"bleu_{n}", v
        if self.rouge is not None:
            yield "rouge_l", self.rouge
        for k, v in sorted(self.top_k.items()):
            yield f"top_{k}", v
        for k, v in sorted(self.precision_at_k.items()):
            yield f"precision_at_{k}", v
        for k, v in sorted(self.recall_at_k.items()):
            yield f"recall_at_{k}", v
        if self.kl_mean is not None:
            yield "kl_mean", self.kl_mean
        for name, v in zip(LABELS, self.per_label_accuracy):
            yield f"acc_{name.lower().replace(' ', '_')}", v

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("bleu", "top_k", "precision_at_k", "recall_at_k"):
            d[key] = {str(k): v for k, v in sorted(d[key].items())}
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsBundle":
        d = dict(d)
        d.pop("schema_version", None)
        for key in ("bleu", "top_k", "precision_at_k", "recall_at_k"):
            d[key] = {int(k): v for k, v in d.get(key, {}).items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> str:
        items = [("pair_count", self.pair_count), *self._flat()]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([k for k, _ in items])
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for _, v in items])
        return buf.getvalue()


def label_agreement(pairs, ks=(2, 5, 8)) -> MetricsBundle:
    """Top-k, Precision@k, Recall@k and mean KL over (real scores, generated scores) pairs."""
    pairs = [(np.asarray(a), np.asarray(b)) for a, b in pairs]
    bundle = MetricsBundle(pair_count=len(pairs))
    for k in ks:
        mean = aggregate_top_k(pairs, k)
        bundle.top_k[k] = mean
        bundle.precision_at_k[k] = precision_at_k(mean, k)
        bundle.recall_at_k[k] = recall_at_k(mean)
    bundle.kl_mean = float(np.mean([kl_divergence(a, b) for a, b in pairs]))
    return bundle


def text_scores(candidates, references, bundle: MetricsBundle | None = None) -> MetricsBundle:
    bundle = bundle or MetricsBundle()
    for n in (1, 2, 3, 4):
        bundle.bleu[n] = corpus_bleu(candidates, references, n)
    bundle.rouge = corpus_rouge_l(candidates, references)
    bundle.pair_count = bundle.pair_count or len(candidates)
    bundle.meta.setdefault("bleu", "mean of sentence-level BLEU, eps=1e-9 smoothing")
    bundle.meta.setdefault("rouge", "ROUGE-L F1")
    return bundle
