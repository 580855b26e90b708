"""Cycle pairs (image -> report -> image, report -> image -> report) and joint cycle training."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import image_gen as ig
from . import report_gen as rg
from .data import PairSet, TokenizedReport, resize_tensor
from .errors import PreconditionError, ShapeError

IMAGE_FIRST = "image_first"
REPORT_FIRST = "report_first"


@dataclass(frozen=True, eq=False)
class CyclePair:
    direction: str
    original: np.ndarray | TokenizedReport
    first_hop: TokenizedReport | np.ndarray
    reconstruction: np.ndarray | TokenizedReport

    def __post_init__(self):
        if self.direction not in (IMAGE_FIRST, REPORT_FIRST):
            raise ValueError(f"unknown cycle direction {self.direction!r}")
        if type(self.original) is not type(self.reconstruction):
            raise ShapeError("original and reconstruction differ in modality")
        if isinstance(self.original, np.ndarray) and \
                self.original.shape != self.reconstruction.shape:
            raise ShapeError("original and reconstruction differ in shape")


@dataclass
class CycleConfig:
    lambda_image: float = 10.0
    lambda_text: float = 1.0
    report_every: int = 1
    epochs: int = 10
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if self.lambda_image < 0 or self.lambda_text < 0:
            raise ValueError("cycle weights must be >= 0")
        if self.report_every < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("report_every and batch_size must be >= 1, epochs >= 0")


def _check_models(report_model: rg.ReportGenModel, image_model: ig.ImageGenModel) -> None:
    if report_model.vocab_size != image_model.vocab_size:
        raise ShapeError(f"report model vocabulary ({report_model.vocab_size}) and image model "
                         f"vocabulary ({image_model.vocab_size}) differ")


def reconstruct_images(image_model: ig.ImageGenModel, reports, size: int,
                       seed: int = 0) -> torch.Tensor:
    """Final-stage images for ``reports`` resized to ``size``: (B, 1, size, size)."""
    return resize_tensor(ig.generate_images(image_model, reports, seed), size).clamp(0.0, 1.0)


def cycle_forward_images(report_model, image_model, images, seed: int = 0) -> list[CyclePair]:
    _check_models(report_model, image_model)
    x = torch.as_tensor(images, dtype=torch.float32)
    if x.ndim == 3:
        x = x[:, None]
    reports = rg.generate_reports(report_model, x)
    recon = reconstruct_images(image_model, reports, x.shape[-1], seed)
    return [CyclePair(IMAGE_FIRST, x[i, 0].numpy(), reports[i], recon[i, 0].numpy())
            for i in range(len(reports))]


def cycle_forward_image(report_model, image_model, image, seed: int = 0) -> CyclePair:
    return cycle_forward_images(report_model, image_model, np.asarray(image)[None], seed)[0]


def cycle_forward_reports(report_model, image_model, reports, seed: int = 0) -> list[CyclePair]:
    _check_models(report_model, image_model)
    reports = list(reports)
    images = reconstruct_images(image_model, reports, report_model.config.image_size, seed)
    recon = rg.generate_reports(report_model, images)
    return [CyclePair(REPORT_FIRST, r, images[i, 0].numpy(), recon[i])
            for i, r in enumerate(reports)]


def cycle_forward_report(report_model, image_model, report: TokenizedReport,
                         seed: int = 0) -> CyclePair:
    return cycle_forward_reports(report_model, image_model, [report], seed)[0]


def image_cycle_loss(original, reconstructed) -> float:
    """Mean absolute pixel difference."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare images of shapes {a.shape} and {b.shape}")
    return float(np.abs(a - b).mean())


def report_cycle_agreement(original: TokenizedReport, reconstructed: TokenizedReport) -> float:
    """Token-level F1 between the two reports' token multisets."""
    a, b = Counter(original.token_ids()), Counter(reconstructed.token_ids())
    if not a and not b:
        return 1.0
    overlap = sum((a & b).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(b.values())
    recall = overlap / sum(a.values())
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# training

TRACE_KEYS = ("report_loss", "d_loss", "g_adv", "image_cycle", "text_agreement", "total")


def _require_pretrained(report_model, image_model) -> None:
    missing = []
    if int(report_model.epochs_trained) == 0:
        missing.append("report generator (train-report)")
    if int(image_model.stage1_epochs) == 0:
        missing.append("stage-1 image generator (train-image --stage 1)")
    if int(image_model.stage2_epochs) == 0:
        missing.append("stage-2 image generator (train-image --stage 2)")
    if missing:
        raise PreconditionError("cycle training needs individually pretrained models; "
                                "pretrain first: " + ", ".join(missing))


def _run(report_model, image_model, train: PairSet, config: CycleConfig, with_cycle: bool):
    _check_models(report_model, image_model)
    _require_pretrained(report_model, image_model)
    ic = image_model.config
    gen = torch.Generator().manual_seed(config.seed)
    r_opt = rg.make_optimizer(report_model)
    g_opt = torch.optim.Adam(image_model.generator_parameters(), lr=ic.lr, betas=ic.betas)
    d_opt = torch.optim.Adam([*image_model.d1.parameters(), *image_model.d2.parameters()],
                             lr=ic.lr, betas=ic.betas)
    size = train.images.shape[-1]
    real1 = resize_tensor(train.images, ic.stage1_size)
    real2 = resize_tensor(train.images, ic.stage2_size)
    gt_ids = ig.report_ids(train.reports, image_model.vocab_size)
    traces = {k: [] for k in TRACE_KEYS}
    step = 0
    for _ in range(config.epochs):
        sums = dict.fromkeys(TRACE_KEYS, 0.0)
        order = torch.randperm(len(train), generator=gen)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            b = len(idx)
            gt_reports = [train.reports[i] for i in idx.tolist()]

            # image -> report: supervised update on ground-truth captions
            if step % config.report_every == 0:
                report_model.train()
                r_loss = rg.report_loss(report_model, train.images[idx], gt_reports)
                r_opt.zero_grad()
                r_loss.backward()
                torch.nn.utils.clip_grad_norm_(report_model.parameters(),
                                               report_model.config.grad_clip)
                r_opt.step()
                sums["report_loss"] += r_loss.item() * b
            step += 1

            gen_reports = rg.generate_reports(report_model, train.images[idx])
            gen_ids = ig.report_ids(gen_reports, image_model.vocab_size)
            noise = torch.randn(b, ic.noise_dim, generator=gen)
            wrong = gt_ids[idx][torch.randperm(b, generator=gen)] if b > 1 else gt_ids[idx]
            image_model.train()

            # discriminators
            with torch.no_grad():
                gen_emb = image_model.embedder(gen_ids)
                true_emb = image_model.embedder(gt_ids[idx])
                wrong_emb = image_model.embedder(wrong)
                fake1 = image_model.g1(gen_emb, noise)
                fake2 = image_model.g2(fake1, gen_emb)
            d_loss = (ig.discriminator_loss(image_model.d1, real1[idx], fake1, true_emb, wrong_emb)
                      + ig.discriminator_loss(image_model.d2, real2[idx], fake2, true_emb,
                                              wrong_emb))
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()

            # generators, conditioned on the generated (detached) text
            gen_emb = image_model.embedder(gen_ids)
            fake1 = image_model.g1(gen_emb, noise)
            fake2 = image_model.g2(fake1, gen_emb)
            g_adv = (ig.generator_adv_loss(image_model.d1(fake1, gen_emb))
                     + ig.generator_adv_loss(image_model.d2(fake2, gen_emb)))
            recon = resize_tensor(fake2, size)
            cyc = (recon - train.images[idx]).abs().mean()
            g_loss = g_adv + config.lambda_image * cyc if with_cycle else g_adv
            g_opt.zero_grad()
            g_loss.backward()
            g_opt.step()

            # report -> image -> report agreement, tracked only
            with torch.no_grad():
                back = rg.generate_reports(
                    report_model, resize_tensor(image_model.g2(image_model.g1(true_emb, noise),
                                                               true_emb), size).clamp(0, 1))
            agree = float(np.mean([report_cycle_agreement(o, r)
                                   for o, r in zip(gt_reports, back)]))
            sums["d_loss"] += d_loss.item() * b
            sums["g_adv"] += g_adv.item() * b
            sums["image_cycle"] += cyc.item() * b
            sums["text_agreement"] += agree * b
            sums["total"] += (g_adv.item() + config.lambda_image * cyc.item()
                              + config.lambda_text * (1.0 - agree)) * b
        for model in (report_model, image_model):
            ig._check_finite(model, "cycle epoch")
        n = len(train)
        for k in TRACE_KEYS:
            traces[k].append(sums[k] / n)
        if any(not math.isfinite(traces[k][-1]) for k in TRACE_KEYS):
            raise FloatingPointError("non-finite cycle loss")
    report_model.eval()
    image_model.eval()
    return report_model, image_model, traces


def train_cycle(report_model, image_model, train: PairSet, config: CycleConfig):
    """Alternate report, discriminator and generator updates with the image cycle loss.

    Returns (report_model, image_model, traces) with one value per epoch for
    each key in TRACE_KEYS. Gradients never pass through decoded tokens: the
    image generator is conditioned on detached generated reports, and the
    text-side agreement is tracked but not optimised.
    """
    return _run(report_model, image_model, train, config, with_cycle=True)


def adversarial_finetune(report_model, image_model, train: PairSet, config: CycleConfig):
    """The same alternating schedule with the cycle term removed from the generator loss."""
    return _run(report_model, image_model, train, config, with_cycle=False)


def training_manifest(config: CycleConfig, traces: dict, checkpoints: dict[str, str]) -> dict:
    return {"config": asdict(config), "seed": config.seed, "checkpoints": dict(checkpoints),
            "traces": {k: list(v) for k, v in traces.items()}}
