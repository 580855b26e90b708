"""Image -> report generator: conv encoder feeding a sentence LSTM and a word LSTM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import END, PAD, START, PairSet, TokenizedReport, Vocabulary
from .errors import DataError, ShapeError


@dataclass
class ReportGenConfig:
    sentence_state_dim: int = 512
    word_state_dim: int = 512
    word_input_dim: int = 512
    visual_dim: int = 1024
    max_sentences: int = 6
    max_words_per_sentence: int = 20
    lr_encoder: float = 1e-5
    lr_decoder: float = 5e-4
    image_size: int = 224
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    stop_weight: float = 1.0
    batch_size: int = 16
    grad_clip: float = 5.0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        dims = (self.sentence_state_dim, self.word_state_dim, self.word_input_dim,
                self.visual_dim, self.max_sentences, self.max_words_per_sentence,
                self.image_size, self.batch_size, *self.encoder_channels)
        if min(dims) < 1 or len(self.encoder_channels) != 4:
            raise ValueError("report generator dimensions must be >= 1 (four encoder blocks)")
        if self.lr_encoder <= 0 or self.lr_decoder <= 0:
            raise ValueError("learning rates must be positive")

    @classmethod
    def toy(cls, **overrides) -> "ReportGenConfig":
        base = dict(sentence_state_dim=128, word_state_dim=128, word_input_dim=128,
                    visual_dim=128, image_size=64, encoder_channels=(16, 32, 64, 128),
                    lr_encoder=1e-3, lr_decoder=2e-3)
        base.update(overrides)
        return cls(**base)


class VisualEncoder(nn.Module):
    """Four conv blocks, then average pooling over a 2x2 grid of image quadrants."""

    def __init__(self, channels, visual_dim):
        super().__init__()
        blocks, c_in = [], 1
        for c in channels:
            blocks += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = c
        self.blocks = nn.Sequential(*blocks)
        self.proj = nn.Linear(4 * c_in, visual_dim)

    def forward(self, images):
        pooled = F.adaptive_avg_pool2d(self.blocks(images), 2)
        return F.relu(self.proj(pooled.flatten(1)))


class ReportGenModel(nn.Module):
    def __init__(self, config: ReportGenConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        c = config
        self.encoder = VisualEncoder(c.encoder_channels, c.visual_dim)
        self.sentence_lstm = nn.LSTMCell(c.visual_dim, c.sentence_state_dim)
        self.topic = nn.Linear(c.sentence_state_dim, c.word_input_dim)
        self.stop = nn.Linear(c.sentence_state_dim, 1)
        self.embed = nn.Embedding(vocab_size, c.word_input_dim)
        self.word_init = nn.Linear(c.word_input_dim, c.word_state_dim)
        self.word_lstm = nn.LSTMCell(c.word_input_dim, c.word_state_dim)
        self.out = nn.Linear(c.word_state_dim, vocab_size)
        self.register_buffer("epochs_trained", torch.zeros((), dtype=torch.long))

    def encoder_parameters(self):
        return list(self.encoder.parameters())

    def decoder_parameters(self):
        enc = {id(p) for p in self.encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in enc]

    def sentence_states(self, visual, n_sentences):
        """Topic vectors (B, S, D) and stop logits (B, S) for S sentence steps."""
        b = visual.shape[0]
        h = visual.new_zeros(b, self.config.sentence_state_dim)
        c = visual.new_zeros(b, self.config.sentence_state_dim)
        topics, stops = [], []
        for _ in range(n_sentences):
            h, c = self.sentence_lstm(visual, (h, c))
            topics.append(torch.tanh(self.topic(h)))
            stops.append(self.stop(h).squeeze(-1))
        return torch.stack(topics, 1), torch.stack(stops, 1)

    def word_logits(self, topics, inputs):
        """Teacher-forced logits (M, T, V) for M topics and input ids (M, T)."""
        h = torch.tanh(self.word_init(topics))
        c = torch.zeros_like(h)
        emb = self.embed(inputs)
        logits = []
        for t in range(inputs.shape[1]):
            h, c = self.word_lstm(emb[:, t] + topics, (h, c))
            logits.append(self.out(h))
        return torch.stack(logits, 1)


def new_model(config: ReportGenConfig, vocab: Vocabulary | int, seed: int = 0) -> ReportGenModel:
    size = vocab if isinstance(vocab, int) else len(vocab)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ReportGenModel(config, size)


def _check_images(model: ReportGenModel, images: torch.Tensor) -> torch.Tensor:
    if images.ndim == 2:
        images = images[None, None]
    elif images.ndim == 3:
        images = images[:, None]
    s = model.config.image_size
    if images.ndim != 4 or images.shape[1] != 1 or tuple(images.shape[-2:]) != (s, s):
        raise ShapeError(f"expected images of shape (N, 1, {s}, {s}), got {tuple(images.shape)}")
    return images.to(next(model.parameters()).dtype)


def _as_tensor(image) -> torch.Tensor:
    return image if isinstance(image, torch.Tensor) else torch.as_tensor(image, dtype=torch.float32)


def encode_image(model: ReportGenModel, image) -> torch.Tensor:
    """Visual feature vector(s); a single 2-D image gives a 1-D vector."""
    x = _as_tensor(image)
    single = x.ndim == 2
    model.eval()
    with torch.no_grad():
        v = model.encoder(_check_images(model, x))
    return v[0] if single else v


def _check_vocab(model: ReportGenModel, vocab: Vocabulary) -> None:
    if len(vocab) != model.vocab_size:
        raise ShapeError(f"vocabulary has {len(vocab)} tokens but the model was built "
                         f"for {model.vocab_size}")


def batch_targets(reports, max_sentences: int, max_words: int):
    """Pad reports into (B, S, T) word targets, sentence mask (B, S) and stop targets (B, S).

    Sentences beyond ``max_sentences`` are dropped; long sentences are cut to
    ``max_words - 1`` words followed by END.
    """
    b = len(reports)
    n_sent = [min(len(r.sentences), max_sentences) for r in reports]
    s_max = max(n_sent)
    t_max = min(max(len(sent) for r in reports for sent in r.sentences[:max_sentences]),
                max_words)
    words = torch.full((b, s_max, t_max), PAD, dtype=torch.long)
    sent_mask = torch.zeros(b, s_max)
    stop = torch.zeros(b, s_max)
    for i, r in enumerate(reports):
        for j, sent in enumerate(r.sentences[:n_sent[i]]):
            ids = list(sent[:-1])[:t_max - 1] + [END]
            words[i, j, :len(ids)] = torch.tensor(ids)
            sent_mask[i, j] = 1.0
        stop[i, n_sent[i] - 1] = 1.0
    return words, sent_mask, stop


def report_loss(model: ReportGenModel, images: torch.Tensor, reports) -> torch.Tensor:
    """Word cross-entropy plus weighted stop binary cross-entropy, teacher forced."""
    c = model.config
    words, sent_mask, stop = batch_targets(reports, c.max_sentences, c.max_words_per_sentence)
    b, s, t = words.shape
    visual = model.encoder(_check_images(model, images))
    topics, stop_logits = model.sentence_states(visual, s)
    inputs = torch.cat([torch.full((b, s, 1), START, dtype=torch.long), words[..., :-1]], -1)
    logits = model.word_logits(topics.reshape(b * s, -1), inputs.reshape(b * s, t))
    targets = words.reshape(b * s, t)
    word_mask = (targets != PAD).to(logits.dtype) * sent_mask.reshape(-1, 1).to(logits.dtype)
    ce = F.cross_entropy(logits.reshape(b * s * t, -1), targets.reshape(-1), reduction="none")
    word_loss = (ce * word_mask.reshape(-1)).sum() / word_mask.sum()
    stop_bce = F.binary_cross_entropy_with_logits(stop_logits, stop.to(stop_logits.dtype),
                                                  reduction="none")
    stop_loss = (stop_bce * sent_mask.to(stop_bce.dtype)).sum() / sent_mask.sum()
    return word_loss + c.stop_weight * stop_loss


def word_distributions(model: ReportGenModel, image, report: TokenizedReport) -> torch.Tensor:
    """Per-step next-word probabilities (S, T, V) under teacher forcing."""
    c = model.config
    words, _, _ = batch_targets([report], c.max_sentences, c.max_words_per_sentence)
    _, s, t = words.shape
    model.eval()
    with torch.no_grad():
        visual = model.encoder(_check_images(model, _as_tensor(image)))
        topics, _ = model.sentence_states(visual, s)
        inputs = torch.cat([torch.full((1, s, 1), START, dtype=torch.long), words[..., :-1]], -1)
        logits = model.word_logits(topics.reshape(s, -1), inputs.reshape(s, t))
    return logits.softmax(-1)


def generate_reports(model: ReportGenModel, images, vocab: Vocabulary | None = None,
                     sample: bool = False, generator: torch.Generator | None = None,
                     ) -> list[TokenizedReport]:
    """Decode one report per image; greedy unless ``sample`` (then draws use ``generator``)."""
    if vocab is not None:
        _check_vocab(model, vocab)
    c = model.config
    model.eval()
    x = _check_images(model, _as_tensor(images))
    b = x.shape[0]
    banned = torch.zeros(model.vocab_size, dtype=torch.bool)
    banned[[PAD, START]] = True
    with torch.no_grad():
        visual = model.encoder(x)
        topics, stop_logits = model.sentence_states(visual, c.max_sentences)
        stop_prob = torch.sigmoid(stop_logits)
        sentences = [[] for _ in range(b)]
        done = torch.zeros(b, dtype=torch.bool)
        for s in range(c.max_sentences):
            active = (~done).nonzero().flatten()
            if len(active) == 0:
                break
            topic = topics[active, s]
            h = torch.tanh(model.word_init(topic))
            cell = torch.zeros_like(h)
            prev = torch.full((len(active),), START, dtype=torch.long)
            toks = [[] for _ in range(len(active))]
            finished = torch.zeros(len(active), dtype=torch.bool)
            for _ in range(c.max_words_per_sentence):
                h, cell = model.word_lstm(model.embed(prev) + topic, (h, cell))
                logits = model.out(h).masked_fill(banned, -math.inf)
                if sample:
                    nxt = torch.multinomial(logits.softmax(-1), 1, generator=generator).squeeze(1)
                else:
                    nxt = logits.argmax(-1)
                for k in (~finished).nonzero().flatten().tolist():
                    toks[k].append(int(nxt[k]))
                finished |= nxt == END
                prev = nxt
                if bool(finished.all()):
                    break
            for k, i in enumerate(active.tolist()):
                ids = toks[k]
                if not ids or ids[-1] != END:
                    ids = ids + [END]
                sentences[i].append(tuple(ids))
                if stop_prob[i, s] > 0.5:
                    done[i] = True
    return [TokenizedReport(tuple(sents)) for sents in sentences]


def generate_report(model: ReportGenModel, image, vocab: Vocabulary | None = None,
                    **kwargs) -> TokenizedReport:
    x = _as_tensor(image)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    return generate_reports(model, x, vocab, **kwargs)[0]


def make_optimizer(model: ReportGenModel) -> torch.optim.Optimizer:
    c = model.config
    return torch.optim.Adam([
        {"params": model.encoder_parameters(), "lr": c.lr_encoder},
        {"params": model.decoder_parameters(), "lr": c.lr_decoder},
    ])


def train_report_generator(model: ReportGenModel, train: PairSet, epochs: int, seed: int = 0,
                           optimizer: torch.optim.Optimizer | None = None,
                           ) -> tuple[ReportGenModel, list[float]]:
    """Teacher-forced training; returns the model and its per-epoch mean loss."""
    if len(train) == 0:
        raise DataError("cannot train the report generator on an empty set")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    c = model.config
    opt = optimizer or make_optimizer(model)
    gen = torch.Generator().manual_seed(seed)
    trace = []
    for _ in range(epochs):
        model.train()
        order = torch.randperm(len(train), generator=gen).tolist()
        total, count = 0.0, 0
        for start in range(0, len(order), c.batch_size):
            idx = order[start:start + c.batch_size]
            loss = report_loss(model, train.images[idx], [train.reports[i] for i in idx])
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), c.grad_clip)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        model.epochs_trained += 1
        trace.append(total / count)
    model.eval()
    return model, trace
