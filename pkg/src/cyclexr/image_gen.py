"""Report -> image generator: recurrent text embedding and a two-stage conditional GAN."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PAD, PairSet, TokenizedReport, Vocabulary, resize_tensor
from .errors import DataError, PreconditionError, ShapeError

LOSS_VARIANTS = ("nonsaturating",)


@dataclass
class ImageGenConfig:
    embed_dim: int = 256
    word_dim: int = 128
    noise_dim: int = 100
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    stage1_size: int = 64
    stage2_size: int = 256
    gen_channels: int = 64
    disc_channels: int = 32
    loss: str = "nonsaturating"
    batch_size: int = 16

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for size in (self.stage1_size, self.stage2_size):
            if size < 8 or size & (size - 1):
                raise ValueError(f"stage resolution {size} is not a power of two >= 8")
        if self.stage2_size < self.stage1_size:
            raise ValueError("stage-2 resolution must not be below stage-1")
        if self.loss not in LOSS_VARIANTS:
            raise ValueError(f"unknown adversarial loss {self.loss!r}")
        if min(self.embed_dim, self.word_dim, self.noise_dim, self.gen_channels,
               self.disc_channels, self.batch_size) < 1:
            raise ValueError("image generator dimensions must be >= 1")

    @classmethod
    def toy(cls, **overrides) -> "ImageGenConfig":
        base = dict(stage1_size=32, stage2_size=64, gen_channels=32, disc_channels=16)
        base.update(overrides)
        return cls(**base)


class TextEmbedder(nn.Module):
    """Bidirectional GRU over word vectors; the two final states go through one nonlinear layer.

    Word order matters here: a bag of words cannot tell which shape sits in
    which quadrant once a report names more than one.
    """

    def __init__(self, vocab_size, word_dim, embed_dim):
        super().__init__()
        self.words = nn.Embedding(vocab_size, word_dim, padding_idx=PAD)
        self.rnn = nn.GRU(word_dim, word_dim, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * word_dim, embed_dim)

    def forward(self, ids):
        lengths = (ids != PAD).sum(1).clamp(min=1).cpu()
        packed = nn.utils.rnn.pack_padded_sequence(self.words(ids), lengths, batch_first=True,
                                                   enforce_sorted=False)
        _, h = self.rnn(packed)
        return F.leaky_relu(self.proj(torch.cat([h[0], h[1]], 1)), 0.2)


def _up(c_in, c_out):
    return nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                         nn.Conv2d(c_in, c_out, 3, padding=1),
                         nn.GroupNorm(min(8, c_out), c_out), nn.ReLU())


class Stage1Generator(nn.Module):
    def __init__(self, embed_dim, noise_dim, size, ch):
        super().__init__()
        n_up = int(math.log2(size // 4))
        chans = [max(ch, ch * 8 >> i) for i in range(n_up + 1)]
        self.c0 = chans[0]
        self.fc = nn.Sequential(nn.Linear(embed_dim + noise_dim, chans[0] * 16), nn.ReLU())
        self.ups = nn.Sequential(*[_up(chans[i], chans[i + 1]) for i in range(n_up)])
        self.to_img = nn.Conv2d(chans[-1], 1, 3, padding=1)

    def forward(self, embedding, noise):
        h = self.fc(torch.cat([noise, embedding], 1)).view(-1, self.c0, 4, 4)
        return torch.sigmoid(self.to_img(self.ups(h)))


class _Residual(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.GroupNorm(min(8, c), c),
                                  nn.ReLU(), nn.Conv2d(c, c, 3, padding=1),
                                  nn.GroupNorm(min(8, c), c))

    def forward(self, x):
        return F.relu(x + self.body(x))


class Stage2Generator(nn.Module):
    """Refines an upsampled stage-1 image; starts out as the identity refinement."""

    def __init__(self, embed_dim, in_size, out_size, ch):
        super().__init__()
        self.out_size = out_size
        cond = 16
        self.down = nn.Sequential(nn.Conv2d(1, ch, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1), nn.ReLU())
        self.cond = nn.Linear(embed_dim, cond)
        self.joint = nn.Sequential(nn.Conv2d(2 * ch + cond, 2 * ch, 3, padding=1), nn.ReLU(),
                                   _Residual(2 * ch), _Residual(2 * ch))
        n_up = int(math.log2(out_size // in_size)) + 1
        chans = [2 * ch] + [ch] * n_up
        self.ups = nn.Sequential(*[_up(chans[i], chans[i + 1]) for i in range(n_up)])
        self.to_img = nn.Conv2d(ch, 1, 3, padding=1)
        nn.init.zeros_(self.to_img.weight)
        nn.init.zeros_(self.to_img.bias)

    def forward(self, stage1, embedding):
        h = self.down(stage1)
        c = self.cond(embedding)[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        h = self.ups(self.joint(torch.cat([h, c], 1)))
        base = F.interpolate(stage1, size=(self.out_size, self.out_size), mode="bilinear",
                             align_corners=False).clamp(1e-3, 1 - 1e-3)
        return torch.sigmoid(torch.logit(base) + self.to_img(h))


def _sn(layer):
    return nn.utils.parametrizations.spectral_norm(layer)


class Discriminator(nn.Module):
    """Image and text embedding -> real/fake logit; text joins at the 4x4 feature map."""

    def __init__(self, size, embed_dim, ch):
        super().__init__()
        layers, c_in, s, c = [], 1, size, ch
        while s > 4:
            layers += [_sn(nn.Conv2d(c_in, c, 4, stride=2, padding=1)), nn.LeakyReLU(0.2)]
            c_in, c, s = c, min(c * 2, ch * 8), s // 2
        self.features = nn.Sequential(*layers)
        cond = 32
        self.cond = _sn(nn.Linear(embed_dim, cond))
        self.joint = nn.Sequential(_sn(nn.Conv2d(c_in + cond, c_in, 1)), nn.LeakyReLU(0.2),
                                   _sn(nn.Conv2d(c_in, 1, 4)))

    def forward(self, image, embedding):
        h = self.features(image)
        c = F.leaky_relu(self.cond(embedding), 0.2)[:, :, None, None].expand(-1, -1, 4, 4)
        return self.joint(torch.cat([h, c], 1)).flatten()


class ImageGenModel(nn.Module):
    def __init__(self, config: ImageGenConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        c = config
        self.embedder = TextEmbedder(vocab_size, c.word_dim, c.embed_dim)
        self.g1 = Stage1Generator(c.embed_dim, c.noise_dim, c.stage1_size, c.gen_channels)
        self.g2 = Stage2Generator(c.embed_dim, c.stage1_size, c.stage2_size, c.gen_channels)
        self.d1 = Discriminator(c.stage1_size, c.embed_dim, c.disc_channels)
        self.d2 = Discriminator(c.stage2_size, c.embed_dim, c.disc_channels)
        self.register_buffer("stage1_epochs", torch.zeros((), dtype=torch.long))
        self.register_buffer("stage2_epochs", torch.zeros((), dtype=torch.long))

    def generator_parameters(self):
        return [*self.embedder.parameters(), *self.g1.parameters(), *self.g2.parameters()]

    def discriminator(self, stage: int) -> Discriminator:
        return self.d1 if stage == 1 else self.d2

    def stage_size(self, stage: int) -> int:
        return self.config.stage1_size if stage == 1 else self.config.stage2_size


def new_model(config: ImageGenConfig, vocab: Vocabulary | int, seed: int = 0) -> ImageGenModel:
    size = vocab if isinstance(vocab, int) else len(vocab)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ImageGenModel(config, size)


def report_ids(reports, vocab_size: int) -> torch.Tensor:
    """(B, L) padded token ids; an empty report becomes a single PAD row."""
    seqs = [r.token_ids() for r in reports]
    width = max(1, max(len(s) for s in seqs))
    out = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        if any(not 0 <= t < vocab_size for t in s):
            raise ShapeError(f"report token outside the image model's vocabulary of {vocab_size}")
        out[i, :len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def embed_reports(model: ImageGenModel, reports) -> torch.Tensor:
    return model.embedder(report_ids(reports, model.vocab_size))


def embed_report(model: ImageGenModel, report: TokenizedReport,
                 vocab: Vocabulary | None = None) -> torch.Tensor:
    if vocab is not None and len(vocab) != model.vocab_size:
        raise ShapeError(f"vocabulary has {len(vocab)} tokens, model expects {model.vocab_size}")
    model.eval()
    with torch.no_grad():
        return embed_reports(model, [report])[0]


def make_noise(config: ImageGenConfig, n: int, seed: int) -> torch.Tensor:
    return torch.randn(n, config.noise_dim, generator=torch.Generator().manual_seed(seed))


def _batch(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.ndim == ndim else (x, False)


def generate_stage1(model: ImageGenModel, embedding: torch.Tensor,
                    noise: torch.Tensor | None = None, seed: int = 0) -> torch.Tensor:
    """Low-resolution image(s) (S1, S1) in [0, 1]; noise drawn from ``seed`` when not given."""
    emb, single = _batch(embedding, 1)
    if noise is None:
        noise = make_noise(model.config, emb.shape[0], seed)
    noise, _ = _batch(noise, 1)
    if noise.shape[-1] != model.config.noise_dim:
        raise ShapeError(f"noise length {noise.shape[-1]} != noise_dim {model.config.noise_dim}")
    model.eval()
    with torch.no_grad():
        out = model.g1(emb, noise.to(emb.dtype))[:, 0]
    return out[0] if single else out


def generate_stage2(model: ImageGenModel, stage1_image: torch.Tensor,
                    embedding: torch.Tensor) -> torch.Tensor:
    s1 = model.config.stage1_size
    img = stage1_image
    single = img.ndim == 2
    if single:
        img = img[None]
    if tuple(img.shape[-2:]) != (s1, s1):
        raise ShapeError(f"stage-1 image must be {s1}x{s1}, got {tuple(img.shape[-2:])}")
    emb, _ = _batch(embedding, 1)
    model.eval()
    with torch.no_grad():
        out = model.g2(img[:, None].to(emb.dtype), emb)[:, 0]
    return out[0] if single else out


def discriminate(model: ImageGenModel, image: torch.Tensor, embedding: torch.Tensor,
                 stage: int) -> torch.Tensor:
    """Conditional probability that ``image`` is a real match for ``embedding``."""
    size = model.stage_size(stage)
    img = image if image.ndim == 4 else image.reshape(-1, 1, *image.shape[-2:])
    if tuple(img.shape[-2:]) != (size, size):
        raise ShapeError(f"stage-{stage} discriminator expects {size}x{size} images, "
                         f"got {tuple(img.shape[-2:])}")
    emb, single = _batch(embedding, 1)
    model.eval()
    with torch.no_grad():
        p = torch.sigmoid(model.discriminator(stage)(img.to(emb.dtype), emb))
    return p[0] if single and image.ndim == 2 else p


def generate_images(model: ImageGenModel, reports, seed: int = 0) -> torch.Tensor:
    """Final-stage images (B, 1, S2, S2) for a list of reports with seeded noise."""
    model.eval()
    with torch.no_grad():
        emb = embed_reports(model, reports)
        noise = make_noise(model.config, len(reports), seed)
        return model.g2(model.g1(emb, noise), emb)


# ---------------------------------------------------------------------------
# training

def generator_adv_loss(d_fake_logits: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(d_fake_logits, torch.ones_like(d_fake_logits))


def discriminator_loss(disc, real, fake, emb, wrong_emb) -> torch.Tensor:
    ones = torch.ones(real.shape[0], dtype=real.dtype)
    zeros = torch.zeros_like(ones)
    return (F.binary_cross_entropy_with_logits(disc(real, emb), ones)
            + 0.5 * F.binary_cross_entropy_with_logits(disc(fake, emb), zeros)
            + 0.5 * F.binary_cross_entropy_with_logits(disc(real, wrong_emb), zeros))


def _adam(params, config):
    return torch.optim.Adam(params, lr=config.lr, betas=config.betas)


def _check_finite(model: nn.Module, what: str) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite values in {name} after {what}")


def train_image_generator(model: ImageGenModel, train: PairSet, stage: int, epochs: int,
                          seed: int = 0) -> tuple[ImageGenModel, dict[str, list[float]]]:
    """Alternating discriminator/generator updates for one stage.

    Stage 1 trains the text embedder with the stage-1 discriminator. Stage 2
    keeps the embedder and the stage-1 generator frozen.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if len(train) == 0:
        raise DataError("cannot train the image generator on an empty set")
    if stage == 2 and int(model.stage1_epochs) == 0:
        raise PreconditionError("stage-2 training needs a trained stage-1 generator")
    c = model.config
    gen = torch.Generator().manual_seed(seed)
    real_all = resize_tensor(train.images, model.stage_size(stage))
    ids_all = report_ids(train.reports, model.vocab_size)

    if stage == 1:
        g_params = list(model.g1.parameters())
        d_params = [*model.d1.parameters(), *model.embedder.parameters()]
    else:
        g_params = list(model.g2.parameters())
        d_params = list(model.d2.parameters())
    frozen = [p for p in model.parameters()
              if all(p is not q for q in g_params + d_params)]
    for p in frozen:
        p.requires_grad_(False)
    g_opt, d_opt = _adam(g_params, c), _adam(d_params, c)
    disc = model.discriminator(stage)
    trace = {"d_loss": [], "g_loss": []}
    try:
        for _ in range(epochs):
            model.train()
            order = torch.randperm(len(train), generator=gen)
            d_sum = g_sum = 0.0
            for start in range(0, len(order), c.batch_size):
                idx = order[start:start + c.batch_size]
                b = len(idx)
                real = real_all[idx]
                ids = ids_all[idx]
                wrong = ids[torch.randperm(b, generator=gen)] if b > 1 else ids
                noise = torch.randn(b, c.noise_dim, generator=gen)

                emb = model.embedder(ids)
                wrong_emb = model.embedder(wrong)
                with torch.no_grad():
                    fake = _generate(model, stage, emb.detach(), noise)
                d_loss = discriminator_loss(disc, real, fake, emb, wrong_emb)
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()

                emb = emb.detach()
                fake = _generate(model, stage, emb, noise)
                g_loss = generator_adv_loss(disc(fake, emb))
                g_opt.zero_grad()
                g_loss.backward()
                g_opt.step()
                d_sum += d_loss.item() * b
                g_sum += g_loss.item() * b
            _check_finite(model, f"stage-{stage} epoch")
            trace["d_loss"].append(d_sum / len(train))
            trace["g_loss"].append(g_sum / len(train))
            if stage == 1:
                model.stage1_epochs += 1
            else:
                model.stage2_epochs += 1
    finally:
        for p in frozen:
            p.requires_grad_(True)
    model.eval()
    return model, trace


def _generate(model: ImageGenModel, stage: int, emb, noise):
    s1 = model.g1(emb, noise)
    if stage == 1:
        return s1
    return model.g2(s1.detach(), emb)
