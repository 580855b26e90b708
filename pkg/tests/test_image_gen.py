import numpy as np
import pytest
import torch

from cyclexr import checkpoint
from cyclexr import image_gen as ig
from cyclexr.data import Vocabulary, build_vocabulary, extract_caption, make_pairs
from cyclexr.data import synthesize_toy_dataset
from cyclexr.errors import PreconditionError, ShapeError
from gradcheck import worst_relative_error

TINY = dict(embed_dim=16, word_dim=8, noise_dim=6, stage1_size=8, stage2_size=16,
            gen_channels=4, disc_channels=4, batch_size=4)


@pytest.fixture(scope="module")
def tiny():
    studies = synthesize_toy_dataset(16, 0)
    vocab = build_vocabulary([extract_caption(s.report) for s in studies], 1)
    return vocab, make_pairs(studies, vocab, 16)


def _model(vocab, seed=0):
    return ig.new_model(ig.ImageGenConfig(**TINY), vocab, seed)


def test_config_defaults_and_validation():
    c = ig.ImageGenConfig()
    assert (c.embed_dim, c.noise_dim, c.lr) == (256, 100, 2e-4)
    assert (c.stage1_size, c.stage2_size) == (64, 256)
    t = ig.ImageGenConfig.toy()
    assert (t.stage1_size, t.stage2_size) == (32, 64)
    for bad in (dict(lr=0), dict(stage1_size=48), dict(stage2_size=16), dict(loss="wgan")):
        with pytest.raises(ValueError):
            ig.ImageGenConfig(**bad)


def test_embedding_contract(tiny):
    vocab, pairs = tiny
    m = ig.new_model(ig.ImageGenConfig(), vocab)
    e = ig.embed_report(m, pairs.reports[0], vocab)
    assert e.shape == (256,) and torch.isfinite(e).all()
    assert torch.equal(e, ig.embed_report(m, pairs.reports[0], vocab))
    with pytest.raises(ShapeError):
        ig.embed_report(m, pairs.reports[0], Vocabulary())


def test_stage_outputs_shape_range_determinism(tiny):
    vocab, pairs = tiny
    m = _model(vocab)
    e = ig.embed_report(m, pairs.reports[1])
    noise = ig.make_noise(m.config, 1, 5)[0]
    s1 = ig.generate_stage1(m, e, noise)
    assert s1.shape == (8, 8)
    assert torch.equal(s1, ig.generate_stage1(m, e, noise))
    s2 = ig.generate_stage2(m, s1, e)
    assert s2.shape == (16, 16)
    assert torch.equal(s2, ig.generate_stage2(m, s1, e))
    for img in (s1, s2):
        assert img.min() >= 0 and img.max() <= 1
    with pytest.raises(ShapeError):
        ig.generate_stage1(m, e, torch.zeros(3))
    with pytest.raises(ShapeError):
        ig.generate_stage2(m, torch.zeros(5, 5), e)


def test_fresh_stage2_is_upsampled_stage1(tiny):
    vocab, pairs = tiny
    m = _model(vocab)
    e = ig.embed_report(m, pairs.reports[2])
    s1 = ig.generate_stage1(m, e, seed=1)
    s2 = ig.generate_stage2(m, s1, e)
    up = torch.nn.functional.interpolate(s1[None, None], size=(16, 16), mode="bilinear",
                                         align_corners=False)[0, 0].clamp(1e-3, 1 - 1e-3)
    torch.testing.assert_close(s2, up, atol=1e-5, rtol=0)


def test_discriminate_range_and_shape(tiny):
    vocab, pairs = tiny
    m = _model(vocab)
    e = ig.embed_reports(m, pairs.reports[:4]).detach()
    imgs = torch.rand(4, 1, 8, 8)
    p = ig.discriminate(m, imgs, e, 1)
    assert ((p >= 0) & (p <= 1)).all()
    assert torch.equal(p, ig.discriminate(m, imgs, e, 1))
    with pytest.raises(ShapeError):
        ig.discriminate(m, imgs, e, 2)


def test_stage2_requires_stage1(tiny):
    vocab, pairs = tiny
    with pytest.raises(PreconditionError):
        ig.train_image_generator(_model(vocab), pairs, 2, 1)


def test_stage2_leaves_stage1_bit_identical(tiny):
    vocab, pairs = tiny
    m, _ = ig.train_image_generator(_model(vocab), pairs, 1, 1, seed=0)
    before = (checkpoint.state_hash(m.g1), checkpoint.state_hash(m.embedder))
    m, trace = ig.train_image_generator(m, pairs, 2, 2, seed=0)
    assert (checkpoint.state_hash(m.g1), checkpoint.state_hash(m.embedder)) == before
    assert len(trace["g_loss"]) == 2
    assert all(p.requires_grad for p in m.parameters())


def test_training_is_deterministic(tiny):
    vocab, pairs = tiny
    _, a = ig.train_image_generator(_model(vocab), pairs, 1, 2, seed=4)
    _, b = ig.train_image_generator(_model(vocab), pairs, 1, 2, seed=4)
    assert a == b
    assert all(np.isfinite(v) for v in a["d_loss"] + a["g_loss"])


def test_checkpoint_roundtrip(tiny, tmp_path):
    vocab, pairs = tiny
    m, _ = ig.train_image_generator(_model(vocab), pairs, 1, 1)
    checkpoint.save(checkpoint.pack("image_gen", m), tmp_path / "g.pt")
    ck = checkpoint.load(tmp_path / "g.pt")
    m2 = checkpoint.restore(ig.ImageGenModel(ig.ImageGenConfig(**ck["config"]),
                                             ck["vocab_size"]), ck).eval()
    torch.testing.assert_close(ig.generate_images(m2, pairs.reports[:3], 0),
                               ig.generate_images(m, pairs.reports[:3], 0), atol=0, rtol=0)


@pytest.mark.parametrize("stage", [1, 2])
def test_generator_gradient_matches_finite_differences(tiny, stage):
    vocab, pairs = tiny
    m = _model(vocab, seed=3).double().eval()
    ids = ig.report_ids(pairs.reports[:1], m.vocab_size)
    noise = ig.make_noise(m.config, 1, 0).double()
    # move the refiner off its identity start so every stage-2 weight gets a gradient
    torch.nn.init.normal_(m.g2.to_img.weight, std=0.1, generator=torch.Generator().manual_seed(0))

    def loss_fn():
        emb = m.embedder(ids)
        fake = m.g1(emb, noise)
        if stage == 2:
            fake = m.g2(fake, emb)
        return ig.generator_adv_loss(m.discriminator(stage)(fake, emb))

    params = list((m.g1 if stage == 1 else m.g2).parameters())
    assert worst_relative_error(loss_fn, params) < 1e-3
