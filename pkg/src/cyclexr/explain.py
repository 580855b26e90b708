"""Explanation protocols: trust, faithfulness under weight randomization, and Grad-CAM."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from . import image_gen as ig
from . import report_gen as rg
from .classifiers import (LabelScores, NaiveBayesReportClassifier, classify_images,
                          classify_report)
from .data import PairSet, Vocabulary, resize_tensor
from .errors import DataError
from .labels import LABELS
from .metrics import MetricsBundle, label_agreement, per_label_accuracy, text_scores

OVERLAY_ALPHA = 0.4


@dataclass
class SaliencyMap:
    values: np.ndarray
    label_index: int
    source_resolution: int

    def __post_init__(self):
        v = self.values
        if (v < 0).any():
            raise ValueError("saliency values must be non-negative")
        if v.max() not in (0.0, 1.0):
            raise ValueError("saliency map must be normalised to max 1 (or be all zero)")


@dataclass
class ProtocolReport:
    protocol: str
    baseline: MetricsBundle | None = None
    treated: MetricsBundle | None = None
    per_label_accuracy: list[float] | None = None
    seeds: dict = field(default_factory=dict)
    verdict: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "baseline": self.baseline.to_dict() if self.baseline else None,
            "treated": self.treated.to_dict() if self.treated else None,
            "per_label_accuracy": (dict(zip(LABELS, self.per_label_accuracy))
                                   if self.per_label_accuracy is not None else None),
            "seeds": self.seeds,
            "verdict": self.verdict,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# generator adapters: protocols accept trained models or plain callables


def report_fn(report_model, vocab: Vocabulary | None = None):
    """images (B, 1, S, S) -> list of TokenizedReport."""
    if isinstance(report_model, rg.ReportGenModel):
        return lambda images: rg.generate_reports(report_model, images, vocab)
    return report_model


def image_fn(image_model, seed: int = 0):
    """(reports, size) -> images (B, 1, size, size) in [0, 1]."""
    if isinstance(image_model, ig.ImageGenModel):
        return lambda reports, size: resize_tensor(
            ig.generate_images(image_model, reports, seed), size).clamp(0.0, 1.0)
    return image_model


def _require(test: PairSet) -> None:
    if len(test) == 0:
        raise DataError("evaluation needs a non-empty test set")


def _batches(n: int, size: int = 64):
    for start in range(0, n, size):
        yield list(range(start, min(n, start + size)))


def _image_size(report_model, test: PairSet) -> int:
    if isinstance(report_model, rg.ReportGenModel):
        return report_model.config.image_size
    return test.images.shape[-1]


def trust_evaluation(report_model, image_model, test: PairSet,
                     report_classifier: NaiveBayesReportClassifier,
                     vocab: Vocabulary | None = None, seed: int = 0) -> ProtocolReport:
    """image -> report -> prototypical image -> second report; naive Bayes labels of the
    ground-truth report vs the second report, per-label accuracy over the test set."""
    _require(test)
    to_report, to_image = report_fn(report_model, vocab), image_fn(image_model, seed)
    size = _image_size(report_model, test)
    truth, pred = [], []
    for idx in _batches(len(test)):
        first = to_report(test.images[idx])
        prototypes = to_image(first, size)
        second = to_report(prototypes)
        truth += [classify_report(report_classifier, test.reports[i], vocab) for i in idx]
        pred += [classify_report(report_classifier, r, vocab) for r in second]
    acc = per_label_accuracy(pred, truth)
    return ProtocolReport("trust", per_label_accuracy=acc, seeds={"noise": seed},
                          verdict={"mean_accuracy": float(np.mean(acc)),
                                   "studies": len(test)})


def regeneration_pairs(report_model, image_model, classifier, test: PairSet,
                       vocab: Vocabulary | None = None, seed: int = 0):
    """Classifier scores for each (real image, image regenerated from its generated report)."""
    to_report, to_image = report_fn(report_model, vocab), image_fn(image_model, seed)
    res = classifier.resolution
    pairs, reports = [], []
    for idx in _batches(len(test)):
        generated = to_report(test.images[idx])
        regen = to_image(generated, res)
        real = classify_images(classifier, resize_tensor(test.images[idx], res))
        fake = classify_images(classifier, regen)
        pairs += list(zip(real, fake))
        reports += generated
    return pairs, reports


def randomize_weights(checkpoint: dict, seed: int) -> dict:
    """Re-draw every parameter from its layer's initializer under ``seed``; buffers are kept."""
    kind = checkpoint["kind"]
    builders = {"report_gen": (rg.ReportGenConfig, rg.ReportGenModel),
                "image_gen": (ig.ImageGenConfig, ig.ImageGenModel)}
    if kind not in builders:
        raise ValueError(f"cannot randomize a {kind!r} checkpoint")
    config_cls, model_cls = builders[kind]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        fresh = model_cls(config_cls(**checkpoint["config"]), checkpoint["vocab_size"])
    param_names = {n for n, _ in fresh.named_parameters()}
    state = {}
    for name, tensor in fresh.state_dict().items():
        state[name] = tensor.clone() if name in param_names else checkpoint["state"][name].clone()
    out = dict(checkpoint)
    out["state"] = state
    out["meta"] = {**checkpoint.get("meta", {}), "randomized": True, "randomize_seed": seed}
    return out


def load_report_model(checkpoint: dict) -> rg.ReportGenModel:
    model = rg.ReportGenModel(rg.ReportGenConfig(**checkpoint["config"]),
                              checkpoint["vocab_size"])
    return ckpt_io.restore(model, checkpoint).eval()


def faithfulness_verdict(baseline: MetricsBundle, treated: MetricsBundle, k: int) -> int:
    """+1 if the baseline top-k beats the treated one, -1 if it loses, 0 on a tie."""
    a, b = baseline.top_k[k], treated.top_k[k]
    return int(a > b) - int(a < b)


def faithfulness_evaluation(report_model: rg.ReportGenModel, image_model, classifier,
                            test: PairSet, k: int = 2, seed: int = 0,
                            vocab: Vocabulary | None = None) -> ProtocolReport:
    """Top-k/P@k/R@k on (real, regenerated) pairs with the trained and a randomized report model."""
    _require(test)
    pairs, _ = regeneration_pairs(report_model, image_model, classifier, test, vocab, seed)
    baseline = label_agreement(pairs, ks=(k,))
    randomized = load_report_model(randomize_weights(ckpt_io.pack("report_gen", report_model),
                                                     seed))
    pairs_r, _ = regeneration_pairs(randomized, image_model, classifier, test, vocab, seed)
    treated = label_agreement(pairs_r, ks=(k,))
    sign = faithfulness_verdict(baseline, treated, k)
    return ProtocolReport(
        "faithfulness", baseline=baseline, treated=treated,
        seeds={"noise": seed, "randomize": seed},
        verdict={"k": k, "trained_top_k": baseline.top_k[k],
                 "randomized_top_k": treated.top_k[k], "sign": sign, "faithful": sign > 0})


def evaluate(report_model, image_model, classifier, report_classifier, test: PairSet,
             vocab: Vocabulary, ks=(2, 5, 8), seed: int = 0) -> MetricsBundle:
    """Report NLG scores, label agreement of regenerated images and report-label accuracy."""
    _require(test)
    pairs, generated = regeneration_pairs(report_model, image_model, classifier, test, vocab,
                                          seed)
    bundle = label_agreement(pairs, ks=ks)
    text_scores([r.words(vocab) for r in generated], [r.words(vocab) for r in test.reports],
                bundle)
    truth = [classify_report(report_classifier, r, vocab) for r in test.reports]
    pred = [classify_report(report_classifier, r, vocab) for r in generated]
    bundle.per_label_accuracy = per_label_accuracy(pred, truth)
    bundle.meta["kl"] = "mean over pairs of KL(real || generated), natural log"
    bundle.meta["noise_seed"] = seed
    bundle.check()
    return bundle


# ---------------------------------------------------------------------------
# Grad-CAM


def gradcam(classifier, image, label_index: int) -> SaliencyMap:
    """Rectified, gradient-weighted sum of the classifier's last conv activations for one label."""
    if not (hasattr(classifier, "feature_maps") and hasattr(classifier, "scores_from_features")):
        raise TypeError(f"{type(classifier).__name__} does not expose convolutional features")
    x = classifier._prepare(image) if hasattr(classifier, "_prepare") else \
        torch.as_tensor(image, dtype=torch.float32).reshape(1, 1, *np.shape(image)[-2:])
    classifier.eval()
    with torch.no_grad():
        fmap = classifier.feature_maps(x[:1])
    fmap = fmap.detach().requires_grad_(True)
    score = classifier.scores_from_features(fmap)[0, label_index]
    grads, = torch.autograd.grad(score, fmap, allow_unused=True)
    if grads is None:
        grads = torch.zeros_like(fmap)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * fmap).sum(1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    cam = cam.clamp(min=0.0).double().numpy()
    peak = cam.max()
    cam = cam / peak if peak > 0 else np.zeros_like(cam)
    return SaliencyMap(cam, label_index, int(x.shape[-1]))


def overlay(image, saliency: SaliencyMap, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """RGB uint8 rendering of the map alpha-blended over the grayscale image."""
    from matplotlib import colormaps

    gray = np.asarray(image, dtype=float).reshape(saliency.values.shape)
    heat = colormaps["jet"](saliency.values)[..., :3]
    rgb = (1 - alpha) * np.repeat(gray[..., None], 3, axis=2) + alpha * heat
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def save_overlay(image, saliency: SaliencyMap, path, alpha: float = OVERLAY_ALPHA) -> None:
    from PIL import Image

    Image.fromarray(overlay(image, saliency, alpha), mode="RGB").save(path)


def top_labels(scores: LabelScores, n: int = 3) -> list[int]:
    s = np.asarray(scores)
    return sorted(range(len(s)), key=lambda i: (-s[i], i))[:n]
