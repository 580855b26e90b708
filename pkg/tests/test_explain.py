import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cyclexr import checkpoint, explain
from cyclexr import report_gen as rg
from cyclexr.classifiers import (LabelScores, ToyImageClassifier, toy_label_set,
                                 train_report_classifier)
from cyclexr.data import build_vocabulary, extract_caption, make_pairs, synthesize_toy_dataset
from cyclexr.errors import DataError
from cyclexr.metrics import MetricsBundle
from stubs import ConstantClassifier, passthrough_stubs


@pytest.fixture(scope="module")
def toy():
    studies = synthesize_toy_dataset(40, 5)
    vocab = build_vocabulary([extract_caption(s.report) for s in studies], 1)
    pairs = make_pairs(studies, vocab, 64)
    nb = train_report_classifier(pairs.captions, [toy_label_set(c) for c in pairs.captions])
    return vocab, pairs, nb


def test_saliency_invariants():
    explain.SaliencyMap(np.zeros((4, 4)), 0, 4)
    explain.SaliencyMap(np.array([[0.0, 1.0]]), 0, 2)
    with pytest.raises(ValueError):
        explain.SaliencyMap(np.array([[-0.1, 1.0]]), 0, 2)
    with pytest.raises(ValueError):
        explain.SaliencyMap(np.array([[0.2, 0.5]]), 0, 2)


def test_constant_classifier_gives_zero_map():
    torch.manual_seed(0)
    m = explain.gradcam(ConstantClassifier(), torch.rand(64, 64), 3)
    assert m.values.shape == (64, 64)
    assert not m.values.any()


def test_gradcam_requires_conv_access():
    with pytest.raises(TypeError):
        explain.gradcam(object(), torch.rand(64, 64), 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 13))
def test_gradcam_maps_are_normalised(seed, label):
    torch.manual_seed(seed)
    clf = ToyImageClassifier(64)
    img = torch.rand(64, 64, generator=torch.Generator().manual_seed(seed))
    m = explain.gradcam(clf, img, label)
    assert m.values.shape == (64, 64)
    assert (m.values >= 0).all()
    assert m.values.max() in (0.0, 1.0)


def test_overlay_png(tmp_path):
    sal = explain.SaliencyMap(np.eye(8), 1, 8)
    explain.save_overlay(np.full((8, 8), 0.5), sal, tmp_path / "a_b_cam.png")
    im = Image.open(tmp_path / "a_b_cam.png")
    assert im.mode == "RGB" and im.size == (8, 8)
    rgb = explain.overlay(np.zeros((8, 8)), explain.SaliencyMap(np.zeros((8, 8)), 0, 8))
    # alpha 0.4 of the lowest colormap colour over black
    assert rgb.max() <= round(0.4 * 255) + 1


def test_trust_passthrough_is_exact(toy):
    vocab, pairs, nb = toy
    report_stub, image_stub = passthrough_stubs(pairs)
    result = explain.trust_evaluation(report_stub, image_stub, pairs, nb, vocab)
    assert result.per_label_accuracy == [1.0] * 14
    assert result.seeds == {"noise": 0}
    assert result.to_dict()["per_label_accuracy"]["No Finding"] == 1.0


def test_protocols_reject_empty_test_set(toy):
    vocab, pairs, nb = toy
    report_stub, image_stub = passthrough_stubs(pairs)
    with pytest.raises(DataError):
        explain.trust_evaluation(report_stub, image_stub, pairs.subset([]), nb, vocab)


def _bundle(top2):
    return MetricsBundle(top_k={2: top2})


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2))
def test_verdict_antisymmetric(a, b):
    v = explain.faithfulness_verdict(_bundle(a), _bundle(b), 2)
    assert v == -explain.faithfulness_verdict(_bundle(b), _bundle(a), 2)
    assert v == (a > b) - (a < b)


def test_randomize_weights(toy):
    vocab, pairs, _ = toy
    model = rg.new_model(rg.ReportGenConfig.toy(), vocab, 0)
    model.epochs_trained += 7
    ck = checkpoint.pack("report_gen", model)
    a, b = explain.randomize_weights(ck, 11), explain.randomize_weights(ck, 11)
    for k in a["state"]:
        assert torch.equal(a["state"][k], b["state"][k])
    loaded = explain.load_report_model(a)
    assert int(loaded.epochs_trained) == 7
    differ = total = 0
    for name, p in model.named_parameters():
        q = a["state"][name]
        assert q.shape == p.shape
        differ += int((q != p.detach()).sum())
        total += p.numel()
    assert differ / total >= 0.99
    c = explain.randomize_weights(ck, 12)
    assert any(not torch.equal(a["state"][k], c["state"][k]) for k in a["state"])


def test_faithfulness_is_repeatable(toy):
    vocab, pairs, _ = toy
    clf = ToyImageClassifier(64)
    model = rg.new_model(rg.ReportGenConfig.toy(), vocab, 0)
    _, image_stub = passthrough_stubs(pairs)

    def image_fn(reports, size):
        known = {r for r in pairs.reports}
        return torch.stack([image_stub([r], size)[0] if r in known else torch.zeros(1, 64, 64)
                            for r in reports])

    sub = pairs.subset(range(8))
    r1 = explain.faithfulness_evaluation(model, image_fn, clf, sub, k=2, seed=3)
    r2 = explain.faithfulness_evaluation(model, image_fn, clf, sub, k=2, seed=3)
    assert r1.to_json() == r2.to_json()
    assert set(r1.verdict) >= {"trained_top_k", "randomized_top_k", "sign", "faithful"}
    assert r1.seeds == {"noise": 3, "randomize": 3}


def test_top_labels_order():
    s = LabelScores((0.1,) * 10 + (0.9, 0.9, 0.5, 0.0))
    assert explain.top_labels(s, 3) == [10, 11, 12]
