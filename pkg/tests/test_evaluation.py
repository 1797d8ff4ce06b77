import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from finestyle.evaluation import (
    EvalRecord,
    EvalReport,
    EvalSample,
    GramExtractor,
    ToyDualEncoder,
    clustering_report,
    evaluate_checkpoint,
    gram_features,
    image_text_score,
    style_score,
)
from finestyle.inversion import init_style_vector
from finestyle.prep import preprocess_image
from finestyle.style_module import extract_style_feature, make_projection, make_toy_encoder
from finestyle.synthetic import SHAPES, STYLES, render

import oracles


@pytest.fixture(scope="module")
def enc():
    return make_toy_encoder(0)


@pytest.mark.parametrize("style", STYLES)
@pytest.mark.parametrize("shape", SHAPES)
def test_self_style_score_is_one(enc, shape, style):
    img = render(shape, style, 64, 0)
    assert style_score(enc, img, img) == pytest.approx(1.0, abs=1e-6)


def test_style_score_matches_dot_product(enc):
    a, b = render("circle", "dots", 64, 0), render("square", "stripes", 64, 1)
    fa = extract_style_feature(enc, preprocess_image(a)).numpy()
    fb = extract_style_feature(enc, preprocess_image(b)).numpy()
    assert style_score(enc, a, b) == pytest.approx(oracles.cosine(fa, fb), abs=1e-6)


def test_style_score_accepts_chw_tensor(enc):
    img = render("circle", "dots", 64, 0)
    chw = torch.from_numpy(img).permute(2, 0, 1)
    assert style_score(enc, img, chw) == pytest.approx(1.0, abs=1e-6)


def test_image_text_score(toy):
    dual = ToyDualEncoder(toy)
    img = render("circle", "dots", 64, 0)
    s1 = image_text_score(img, "a circle", dual)
    assert s1 == image_text_score(img, "a circle", dual)
    assert -1 <= s1 <= 1


def test_gram_trivial_cases():
    fm = np.arange(6, dtype=float).reshape(1, 2, 3)
    assert gram_features([fm])[0] == pytest.approx(np.array([[np.mean(fm**2)]]))
    ortho = np.array([[1, -1, 1, -1], [1, 1, -1, -1]], dtype=float).reshape(2, 2, 2)
    assert np.allclose(gram_features([ortho])[0], np.eye(2))
    with pytest.raises(ValueError):
        gram_features([np.zeros((3, 3))])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 4), elements=st.floats(-10, 10, width=64)))
def test_gram_oracle_symmetric_psd(fm):
    g = gram_features([fm])[0]
    want = oracles.gram(fm)
    assert np.allclose(g, want, rtol=1e-6, atol=1e-9)
    assert np.array_equal(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-6 * max(1.0, np.abs(g).max())


def test_gram_extractor_layers():
    net = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.ReLU(), nn.Conv2d(4, 5, 3, padding=1), nn.ReLU())
    out = GramExtractor(net, layers=(1, 3))(torch.randn(3, 16, 16))
    assert out.shape == (4 * 5 // 2 + 5 * 6 // 2,)


def _blobs(seed=0, n=20, sep=10.0):
    rng = np.random.default_rng(seed)
    centers = np.eye(3, 8) * sep + 1.0
    feats = np.vstack([c + rng.normal(0, 1.0 / sep * 0.1, (n, 8)) for c in centers])
    return feats, [f"c{i}" for i in range(3) for _ in range(n)]


def test_separated_blobs_silhouette():
    feats, labels = _blobs()
    rep = clustering_report(feats, labels, seed=0)
    assert rep.silhouette > 0.8
    assert rep.silhouette == pytest.approx(oracles.silhouette_cosine(feats, labels), abs=1e-9)
    assert rep.coords.shape == (60, 2)
    assert np.array_equal(rep.coords, clustering_report(feats, labels, seed=0).coords)


def test_clustering_preconditions():
    with pytest.raises(ValueError):
        clustering_report(np.random.rand(3, 4), ["a", "b", "c"])
    with pytest.raises(ValueError):
        clustering_report(np.random.rand(4, 4), ["a"] * 4)


def test_identical_features_flag_undefined():
    rep = clustering_report(np.ones((6, 4)), ["a", "a", "b", "b", "c", "c"])
    assert not rep.silhouette_defined and rep.silhouette is None


def test_plot_written(tmp_path):
    feats, labels = _blobs(n=5)
    path = clustering_report(feats, labels).save_plot(tmp_path / "t.png", "blobs")
    assert path.stat().st_size > 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=20))
def test_report_means(pairs):
    rep = EvalReport("x", [EvalRecord(str(i), a, b) for i, (a, b) in enumerate(pairs)])
    assert rep.mean_style == pytest.approx(sum(a for a, _ in pairs) / len(pairs), abs=1e-12)
    assert rep.mean_image_text == pytest.approx(sum(b for _, b in pairs) / len(pairs), abs=1e-12)


def _samples(n=8):
    return [EvalSample(f"s{i}", render(SHAPES[i % 4], STYLES[i % 3], 64, i),
                       f"a {SHAPES[i % 4]} in the style of [*].") for i in range(n)]


def test_evaluate_smoke(toy, enc, tmp_path):
    p = make_projection(32, 32, 0)
    rep = evaluate_checkpoint(toy, enc, p, _samples(), "predicted", enc, ToyDualEncoder(toy), steps=5)
    assert len(rep.records) == 8
    for r in rep.records:
        assert -1 <= r.style_score <= 1 and -1 <= r.image_text_score <= 1
    assert np.isfinite([rep.mean_style, rep.mean_image_text]).all()
    path = rep.write(tmp_path / "r.tsv")
    assert len(path.read_text().splitlines()) == 9
    assert (tmp_path / "r_summary.tsv").exists()


def test_evaluate_stage1_and_ablation(toy, enc):
    samples = _samples(2)
    vecs = {s.image_id: init_style_vector(i, 32) for i, s in enumerate(samples)}
    dual = ToyDualEncoder(toy)
    assert len(evaluate_checkpoint(toy, None, None, samples, "stage1", enc, dual, vecs, steps=3).records) == 2
    assert len(evaluate_checkpoint(toy, enc, None, samples, "ablation", enc, dual, steps=3).records) == 2
    with pytest.raises(KeyError):
        evaluate_checkpoint(toy, None, None, samples, "stage1", enc, dual, {}, steps=3)


def test_evaluate_empty(toy, enc):
    with pytest.raises(ValueError):
        evaluate_checkpoint(toy, enc, None, [], "predicted", enc, ToyDualEncoder(toy))
