import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cyclexr import checkpoint, cycle
from cyclexr import image_gen as ig
from cyclexr import report_gen as rg
from cyclexr.data import END, TokenizedReport, build_vocabulary, extract_caption, make_pairs
from cyclexr.data import synthesize_toy_dataset
from cyclexr.errors import PreconditionError, ShapeError

RG = dict(sentence_state_dim=16, word_state_dim=16, word_input_dim=16, visual_dim=16,
          encoder_channels=(4, 4, 8, 8), image_size=16, max_sentences=3,
          max_words_per_sentence=8, batch_size=8)
IG = dict(embed_dim=16, word_dim=8, noise_dim=6, stage1_size=8, stage2_size=16,
          gen_channels=4, disc_channels=4, batch_size=8)


@pytest.fixture(scope="module")
def tiny():
    studies = synthesize_toy_dataset(24, 1)
    vocab = build_vocabulary([extract_caption(s.report) for s in studies], 1)
    return vocab, make_pairs(studies, vocab, 16)


def _fresh(vocab):
    return (rg.new_model(rg.ReportGenConfig.toy(**RG), vocab, 0),
            ig.new_model(ig.ImageGenConfig(**IG), vocab, 0))


def _pretrained(vocab, pairs):
    r, i = _fresh(vocab)
    r, _ = rg.train_report_generator(r, pairs, 1, 0)
    i, _ = ig.train_image_generator(i, pairs, 1, 1, 0)
    i, _ = ig.train_image_generator(i, pairs, 2, 1, 0)
    return r, i


def _rep(*sentences):
    return TokenizedReport(tuple(tuple(s) + (END,) for s in sentences))


def test_image_cycle_loss_cases():
    a = np.zeros((4, 4))
    assert cycle.image_cycle_loss(a, a) == 0.0
    assert cycle.image_cycle_loss(a, np.ones((4, 4))) == 1.0
    half = np.zeros((4, 4))
    half[:2] = 1.0
    assert cycle.image_cycle_loss(half, a) == 0.5
    with pytest.raises(ShapeError):
        cycle.image_cycle_loss(a, np.zeros((3, 4)))


img = arrays(np.float64, (5, 5), elements=st.floats(0, 1))


@settings(max_examples=50, deadline=None)
@given(img, img, img)
def test_image_cycle_loss_is_a_metric(a, b, c):
    ab, bc, ac = (cycle.image_cycle_loss(a, b), cycle.image_cycle_loss(b, c),
                  cycle.image_cycle_loss(a, c))
    assert ab == pytest.approx(cycle.image_cycle_loss(b, a))
    assert ac <= ab + bc + 1e-12


def test_report_agreement_cases():
    abcd, ab = _rep([4, 5, 6, 7]), _rep([4, 5])
    assert cycle.report_cycle_agreement(abcd, abcd) == 1.0
    assert cycle.report_cycle_agreement(abcd, _rep([8, 9])) == 0.0
    assert cycle.report_cycle_agreement(abcd, ab) == pytest.approx(2 / 3)


ids = st.lists(st.lists(st.integers(4, 9), max_size=5), min_size=1, max_size=3)


@settings(max_examples=60, deadline=None)
@given(ids, ids)
def test_report_agreement_symmetric_and_exact(a, b):
    ra, rb = _rep(*a), _rep(*b)
    v = cycle.report_cycle_agreement(ra, rb)
    assert v == pytest.approx(cycle.report_cycle_agreement(rb, ra))
    assert 0.0 <= v <= 1.0
    same = sorted(ra.token_ids()) == sorted(rb.token_ids())
    assert (v == 1.0) == same


def test_cycle_pair_invariants():
    with pytest.raises(ShapeError):
        cycle.CyclePair(cycle.IMAGE_FIRST, np.zeros((2, 2)), _rep([4]), np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        cycle.CyclePair(cycle.IMAGE_FIRST, np.zeros((2, 2)), _rep([4]), _rep([4]))
    with pytest.raises(ValueError):
        cycle.CyclePair("sideways", _rep([4]), np.zeros((2, 2)), _rep([4]))


def test_config_validation():
    with pytest.raises(ValueError):
        cycle.CycleConfig(lambda_image=-1)
    with pytest.raises(ValueError):
        cycle.CycleConfig(report_every=0)
    cycle.CycleConfig(lambda_image=0, lambda_text=0)


def test_untrained_forward_passes_are_valid_and_repeatable(tiny):
    vocab, pairs = tiny
    r, i = _fresh(vocab)
    fwd = cycle.cycle_forward_images(r, i, pairs.images[:3], seed=2)
    again = cycle.cycle_forward_images(r, i, pairs.images[:3], seed=2)
    for p, q in zip(fwd, again):
        assert p.original.shape == p.reconstruction.shape == (16, 16)
        np.testing.assert_array_equal(p.reconstruction, q.reconstruction)
        assert p.first_hop == q.first_hop
    one = cycle.cycle_forward_report(r, i, pairs.reports[0], seed=2)
    one.reconstruction.validate(vocab)
    assert one == one and one.reconstruction == cycle.cycle_forward_report(
        r, i, pairs.reports[0], seed=2).reconstruction
    assert one.first_hop.shape == (16, 16)


def test_vocab_mismatch(tiny):
    vocab, pairs = tiny
    r, _ = _fresh(vocab)
    other = ig.new_model(ig.ImageGenConfig(**IG), len(vocab) + 2)
    with pytest.raises(ShapeError):
        cycle.cycle_forward_image(r, other, pairs.images[0, 0].numpy())


def test_requires_pretraining(tiny):
    vocab, pairs = tiny
    r, i = _fresh(vocab)
    with pytest.raises(PreconditionError, match="pretrain"):
        cycle.train_cycle(r, i, pairs, cycle.CycleConfig(epochs=1))


def test_seeded_runs_repeat(tiny):
    vocab, pairs = tiny
    cfg = cycle.CycleConfig(epochs=2, seed=3, batch_size=8)
    *_, t1 = cycle.train_cycle(*_pretrained(vocab, pairs), pairs, cfg)
    *_, t2 = cycle.train_cycle(*_pretrained(vocab, pairs), pairs, cfg)
    assert t1 == t2
    assert set(t1) == set(cycle.TRACE_KEYS)
    assert all(len(v) == 2 and np.isfinite(v).all() for v in t1.values())


def test_zero_weights_equal_pure_adversarial(tiny):
    vocab, pairs = tiny
    cfg = cycle.CycleConfig(epochs=2, seed=1, lambda_image=0.0, lambda_text=0.0, batch_size=8)
    r1, i1, t1 = cycle.train_cycle(*_pretrained(vocab, pairs), pairs, cfg)
    r2, i2, t2 = cycle.adversarial_finetune(*_pretrained(vocab, pairs), pairs, cfg)
    assert t1 == t2
    assert checkpoint.state_hash(i1) == checkpoint.state_hash(i2)
    assert checkpoint.state_hash(r1) == checkpoint.state_hash(r2)


def test_cycle_term_changes_updates(tiny):
    vocab, pairs = tiny
    cfg = cycle.CycleConfig(epochs=1, seed=1, batch_size=8)
    _, i1, _ = cycle.train_cycle(*_pretrained(vocab, pairs), pairs, cfg)
    _, i2, _ = cycle.adversarial_finetune(*_pretrained(vocab, pairs), pairs, cfg)
    assert checkpoint.state_hash(i1) != checkpoint.state_hash(i2)


def test_manifest(tiny):
    cfg = cycle.CycleConfig(epochs=1)
    m = cycle.training_manifest(cfg, {"total": [1.0]}, {"report_gen": "a.pt"})
    assert m["seed"] == 0 and m["config"]["lambda_image"] == 10.0
    assert m["traces"]["total"] == [1.0]
