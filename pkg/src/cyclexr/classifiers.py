"""Label oracles: a pluggable multi-label image classifier and a naive Bayes report classifier."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PairSet, SHAPES, TokenizedReport, Vocabulary, split_words, toy_shape_labels
from .errors import DataError, ShapeError
from .labels import LABELS, N_LABELS, TOY_LABEL_SLOTS


@dataclass(frozen=True)
class LabelScores:
    scores: tuple[float, ...]
    labels: tuple[str, ...] = LABELS

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if len(self.scores) != N_LABELS:
            raise ShapeError(f"expected {N_LABELS} scores, got {len(self.scores)}")
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ValueError("label scores must lie in [0, 1]")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.scores, dtype=dtype or float)


@dataclass(frozen=True)
class LabelSet:
    values: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        if len(self.values) != N_LABELS:
            raise ShapeError(f"expected {N_LABELS} indicators, got {len(self.values)}")
        if any(v not in (0, 1) for v in self.values):
            raise ValueError("label indicators must be 0 or 1")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype or int)


def toy_label_set(text: str) -> LabelSet:
    """Shape presence from templated toy report text, placed in the shape slots."""
    values = [0] * N_LABELS
    for shape, present in zip(SHAPES, toy_shape_labels(text)):
        values[TOY_LABEL_SLOTS[shape]] = present
    return LabelSet(tuple(values))


def write_scores_csv(rows, path) -> None:
    """rows: iterable of (study_id, LabelScores) -> CSV ``study_id,label_1..label_14``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["study_id", *LABELS])
        for sid, ls in rows:
            w.writerow([sid, *(f"{s:.6f}" for s in ls.scores)])


# ---------------------------------------------------------------------------
# image classifier


@runtime_checkable
class ImageClassifier(Protocol):
    descriptor: str
    resolution: int

    def classify(self, image) -> LabelScores: ...


class ToyImageClassifier(nn.Module):
    """Small CNN with a global-average-pooled linear head over 14 sigmoid outputs.

    ``feature_maps`` exposes the last convolutional activations and
    ``scores_from_features`` maps them to logits, which is what Grad-CAM needs.
    """

    def __init__(self, resolution: int = 64, channels=(16, 32, 64)):
        super().__init__()
        self.resolution = resolution
        self.descriptor = f"toy-cnn-{resolution}px"
        c1, c2, c3 = channels
        self.block1 = nn.Sequential(nn.Conv2d(1, c1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.block2 = nn.Sequential(nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.block3 = nn.Sequential(nn.Conv2d(c2, c3, 3, padding=1), nn.ReLU())
        self.head = nn.Linear(c3, N_LABELS)

    def feature_maps(self, x):
        return self.block3(self.block2(self.block1(x)))

    def scores_from_features(self, fmap):
        return self.head(fmap.mean(dim=(2, 3)))

    def forward(self, x):
        return self.scores_from_features(self.feature_maps(x))

    def _prepare(self, image) -> torch.Tensor:
        x = torch.as_tensor(image, dtype=torch.float32)
        while x.ndim < 4:
            x = x.unsqueeze(0)
        if tuple(x.shape[-2:]) != (self.resolution, self.resolution):
            raise ShapeError(f"{self.descriptor} expects {self.resolution}x{self.resolution} "
                             f"images, got {tuple(x.shape[-2:])}")
        return x

    def score_batch(self, images) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            return torch.sigmoid(self(self._prepare(images))).numpy().astype(float)

    def classify(self, image) -> LabelScores:
        return LabelScores(tuple(self.score_batch(image)[0]))


def classify_image(classifier: ImageClassifier, image) -> LabelScores:
    return classifier.classify(image)


def classify_images(classifier: ImageClassifier, images) -> list[LabelScores]:
    if hasattr(classifier, "score_batch"):
        return [LabelScores(tuple(row)) for row in classifier.score_batch(images)]
    return [classifier.classify(im) for im in images]


def toy_targets(captions) -> torch.Tensor:
    return torch.tensor([toy_label_set(c).values for c in captions], dtype=torch.float32)


def train_toy_image_classifier(train: PairSet, epochs: int = 120, seed: int = 0,
                               lr: float = 1e-3, batch_size: int = 16) -> ToyImageClassifier:
    """Fit the surrogate on toy shape presence; unused label slots are trained towards 0."""
    if len(train) < 50:
        raise DataError(f"need at least 50 studies to train the toy classifier, got {len(train)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToyImageClassifier(resolution=train.images.shape[-1])
    targets = toy_targets(train.captions)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        model.train()
        order = torch.randperm(len(train), generator=gen)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = F.binary_cross_entropy_with_logits(model(train.images[idx]), targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


# ---------------------------------------------------------------------------
# naive Bayes over report tokens


def report_tokens(report, vocab: Vocabulary | None = None) -> set[str]:
    if isinstance(report, TokenizedReport):
        if vocab is None:
            raise ValueError("a vocabulary is needed to read a TokenizedReport")
        return set(report.words(vocab))
    if isinstance(report, str):
        return set(split_words(report))
    return set(report)


@dataclass
class NaiveBayesReportClassifier:
    """Fourteen independent Bernoulli naive Bayes models over token presence.

    ``log_prior[l, c]`` is log P(label l = c); ``log_present[l, c, t]`` is
    log P(token t present | label l = c) with Laplace smoothing.
    """

    tokens: list[str]
    log_prior: np.ndarray
    log_present: np.ndarray
    log_absent: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def _features(self, report, vocab=None) -> np.ndarray:
        x = np.zeros(len(self.tokens))
        for t in report_tokens(report, vocab):
            i = self.index.get(t)
            if i is not None:
                x[i] = 1.0
        return x

    def joint_log_likelihood(self, report, vocab=None) -> np.ndarray:
        """(14, 2) unnormalised log posteriors; reports with no known token use the prior only."""
        x = self._features(report, vocab)
        if not x.any():
            return self.log_prior.copy()
        with np.errstate(invalid="ignore"):
            like = self.log_present @ x + self.log_absent @ (1.0 - x)
        return self.log_prior + like

    def posterior(self, report, vocab=None) -> np.ndarray:
        """P(label = 1 | report) for each of the 14 labels."""
        jll = self.joint_log_likelihood(report, vocab)
        top = jll.max(axis=1, keepdims=True)
        w = np.exp(jll - top)
        return w[:, 1] / w.sum(axis=1)

    def to_dict(self) -> dict:
        def enc(a):
            return [[None if np.isneginf(v) else float(v) for v in row] for row in a]
        return {
            "labels": list(LABELS),
            "alpha": self.alpha,
            "tokens": self.tokens,
            "log_prior": enc(self.log_prior),
            "log_present": [enc(m) for m in self.log_present],
            "log_absent": [enc(m) for m in self.log_absent],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NaiveBayesReportClassifier":
        if list(d["labels"]) != list(LABELS):
            raise ShapeError("label order in file differs from the fixed label list")

        def dec(a):
            return np.array([[-np.inf if v is None else v for v in row] for row in a], dtype=float)
        return cls(list(d["tokens"]), dec(d["log_prior"]),
                   np.stack([dec(m) for m in d["log_present"]]),
                   np.stack([dec(m) for m in d["log_absent"]]), float(d["alpha"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NaiveBayesReportClassifier":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def train_report_classifier(reports, label_sets, alpha: float = 1.0,
                            vocab: Vocabulary | None = None) -> NaiveBayesReportClassifier:
    reports = list(reports)
    if not reports:
        raise DataError("cannot train the report classifier on an empty corpus")
    y = np.array([np.asarray(ls) for ls in label_sets], dtype=int)
    if y.shape != (len(reports), N_LABELS):
        raise ShapeError(f"expected {len(reports)} label rows of {N_LABELS}, got {y.shape}")
    docs = [report_tokens(r, vocab) for r in reports]
    tokens = sorted(set().union(*docs))
    index = {t: i for i, t in enumerate(tokens)}
    x = np.zeros((len(docs), len(tokens)))
    for i, d in enumerate(docs):
        x[i, [index[t] for t in d]] = 1.0

    n = len(docs)
    log_prior = np.empty((N_LABELS, 2))
    log_present = np.empty((N_LABELS, 2, len(tokens)))
    for lab in range(N_LABELS):
        for c in (0, 1):
            rows = y[:, lab] == c
            n_c = rows.sum()
            with np.errstate(divide="ignore"):
                log_prior[lab, c] = np.log(n_c / n)
            log_present[lab, c] = np.log((x[rows].sum(axis=0) + alpha) / (n_c + 2 * alpha))
    log_absent = np.log1p(-np.exp(log_present))
    return NaiveBayesReportClassifier(tokens, log_prior, log_present, log_absent, alpha)


def classify_report(classifier: NaiveBayesReportClassifier, report,
                    vocab: Vocabulary | None = None) -> LabelSet:
    """Label l is 1 iff its positive log posterior strictly exceeds the negative one."""
    jll = classifier.joint_log_likelihood(report, vocab)
    return LabelSet(tuple(int(a > b) for b, a in jll))
