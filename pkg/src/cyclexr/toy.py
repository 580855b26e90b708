"""Scoring helpers that read the toy corpus templates back out of generated output."""

from __future__ import annotations

import numpy as np

from .data import QUADRANTS, SHAPES, Vocabulary, parse_toy_report, quadrant_slices, report_text


def quadrant_means(image) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    img = img.reshape(img.shape[-2:])
    size = img.shape[-1]
    return np.array([img[quadrant_slices(size, q)].mean() for q in QUADRANTS])


def quadrant_mass(saliency, quadrant: str) -> float:
    """Fraction of total map mass inside ``quadrant``; 0 for an all-zero map."""
    m = np.asarray(saliency, dtype=float)
    total = m.sum()
    if total <= 0:
        return 0.0
    return float(m[quadrant_slices(m.shape[-1], quadrant)].sum() / total)


def brightest_quadrants(image, n: int) -> set[str]:
    means = quadrant_means(image)
    order = sorted(range(len(QUADRANTS)), key=lambda i: (-means[i], i))
    return {QUADRANTS[i] for i in order[:n]}


def quadrant_hit(image, caption: str) -> bool | None:
    """True when the n brightest quadrants are exactly the n quadrants the caption names.

    None when the caption names no quadrant.
    """
    named = {q for q in parse_toy_report(caption).values() if q}
    if not named:
        return None
    return brightest_quadrants(image, len(named)) == named


def quadrant_conditioning(images, captions) -> float:
    hits = [h for h in (quadrant_hit(im, c) for im, c in zip(images, captions)) if h is not None]
    if not hits:
        raise ValueError("no caption names a quadrant")
    return float(np.mean(hits))


def shape_set(text: str) -> frozenset[str]:
    return frozenset(parse_toy_report(text))


def shape_set_accuracy(reports, captions, vocab: Vocabulary) -> float:
    """Fraction of generated reports naming exactly the shapes of the reference caption."""
    hits = [shape_set(report_text(r, vocab)) == shape_set(c) for r, c in zip(reports, captions)]
    return float(np.mean(hits))


def shape_presence_accuracy(predicted_texts, captions) -> np.ndarray:
    """Per-shape presence accuracy, in SHAPES order."""
    pred = np.array([[s in shape_set(t) for s in SHAPES] for t in predicted_texts])
    true = np.array([[s in shape_set(c) for s in SHAPES] for c in captions])
    return (pred == true).mean(axis=0)
