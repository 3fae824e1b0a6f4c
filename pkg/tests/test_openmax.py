import numpy as np
import pytest

from openseg import openmax as om
from openseg.errors import (
    DegenerateTail,
    InsufficientSamples,
    ModelMissing,
    NoSamples,
    ZeroVector,
)
from openseg.fusion import SampleMatrix


def _sm(rows, class_id=0):
    rows = np.asarray(rows, dtype=np.float64)
    return SampleMatrix(rows=rows, class_id=class_id,
                        coords=np.zeros((rows.shape[0], 2), dtype=np.int64))


def _model(mav, shape=1.0, scale=1.0, class_id=0, **kw):
    return om.WeibullModel(class_id=class_id, mav=np.asarray(mav, dtype=np.float64),
                           shape=shape, scale=scale, tail_size=3, **kw)


# --- MAV ---

def test_mav_mean():
    np.testing.assert_array_equal(om.compute_mav(_sm([[1, 2], [3, 4]])), [2, 3])


def test_mav_single_row():
    np.testing.assert_array_equal(om.compute_mav(_sm([[5.0, 6.0]])), [5.0, 6.0])


def test_mav_empty():
    with pytest.raises(NoSamples):
        om.compute_mav(_sm(np.zeros((0, 2))))


# --- distances ---

def test_distance_identity():
    assert om.distance([1.0, 2.0], [1.0, 2.0], "euclidean") == 0.0
    assert om.distance([1.0, 2.0], [1.0, 2.0], "cosine") == pytest.approx(0.0, abs=1e-15)


def test_distance_orthogonal():
    assert om.distance([1.0, 0.0], [0.0, 1.0], "euclidean") == pytest.approx(np.sqrt(2))
    assert om.distance([1.0, 0.0], [0.0, 1.0], "cosine") == pytest.approx(1.0)


def test_hybrid_pure_euclidean_oracle():
    rng = np.random.default_rng(0)
    a, mav = rng.standard_normal(4), rng.standard_normal(4)
    med = 2.5
    got = om.distance(a, mav, "hybrid", median_euclid=med, weights=(1.0, 0.0))
    expected = np.linalg.norm(a - mav) / med  # independent formula evaluation
    assert got == pytest.approx(expected, abs=1e-12)


def test_hybrid_mix_oracle():
    rng = np.random.default_rng(1)
    a, mav = rng.standard_normal(4) + 1, rng.standard_normal(4) + 1
    med = 1.7
    got = om.distance(a, mav, "hybrid", median_euclid=med, weights=(0.5, 0.5))
    euc = np.linalg.norm(a - mav)
    cos = 1 - a @ mav / (np.linalg.norm(a) * np.linalg.norm(mav))
    assert got == pytest.approx(0.5 * euc / med + 0.5 * cos, abs=1e-12)


def test_cosine_zero_vector():
    with pytest.raises(ZeroVector):
        om.distance([0.0, 0.0], [1.0, 0.0], "cosine")


# --- Weibull fit ---

@pytest.mark.parametrize("shape", [0.5, 1.0, 2.0, 5.0])
def test_weibull_mle_recovery(shape):
    rng = np.random.default_rng(int(shape * 10))
    scale = 1.0
    samples = scale * rng.weibull(shape, 10_000)
    k, lam = om.fit_weibull_tail(samples, tail_size=10_000)
    assert abs(k - shape) / shape < 0.05
    assert abs(lam - scale) / scale < 0.05


def test_weibull_degenerate_tail():
    with pytest.raises(DegenerateTail):
        om.fit_weibull_tail(np.full(100, 3.0), tail_size=100)


def test_weibull_insufficient():
    with pytest.raises(InsufficientSamples):
        om.fit_weibull_tail(np.array([1.0, 2.0]), tail_size=10)


def test_weibull_scale_equivariance():
    rng = np.random.default_rng(5)
    d = rng.weibull(2.0, 5000)
    k1, l1 = om.fit_weibull_tail(d, 1000)
    k2, l2 = om.fit_weibull_tail(3.0 * d, 1000)
    assert k2 == pytest.approx(k1, rel=1e-6)
    assert l2 == pytest.approx(3.0 * l1, rel=1e-6)


# --- CDF ---

def test_cdf_exponential_case():
    assert om.weibull_cdf(1.0, 2.5, 2.5) == pytest.approx(1.0 - np.exp(-1.0))


def test_cdf_zero():
    assert om.weibull_cdf(2.0, 1.0, 0.0) == 0.0


def test_cdf_monotone():
    xs = np.linspace(0, 10, 200)
    cdf = om.weibull_cdf(1.7, 2.0, xs)
    assert np.all(np.diff(cdf) > 0)


# --- recalibration ---

def _zero_cdf_models(c, d):
    # enormous scale puts every finite distance at CDF exactly 0
    return {i: _model(np.zeros(d), shape=1.0, scale=1e308, class_id=i) for i in range(c)}


def test_recalibrate_no_revision_limit():
    a = np.array([2.0, 1.0, -1.0])
    cfg = om.OpenMaxConfig()
    out = om.openmax_recalibrate(a, _zero_cdf_models(3, 3), cfg)
    e = np.exp(a - a.max())
    np.testing.assert_allclose(out[:3], e / e.sum(), atol=1e-12)
    assert out[3] == 0.0


def test_recalibrate_full_rejection():
    # degenerate point-mass model: any distance above the threshold gives CDF 1
    models = {0: _model([10.0, 0.0], degenerate_threshold=0.0, class_id=0),
              1: _model([0.0, 10.0], shape=1.0, scale=1e308, class_id=1)}
    a = np.array([3.0, 1.0])
    cfg = om.OpenMaxConfig(alpha=1)
    out = om.openmax_recalibrate(a, models, cfg)
    # top activation fully rejected: revised (0, 1), unknown channel carries 3
    e = np.exp(np.array([0.0, 1.0, 3.0]))
    np.testing.assert_allclose(out, e / e.sum(), atol=1e-12)


def test_recalibrate_derived_hand_example():
    # C=2, activations (2, 1), w=(0.5, 0), alpha=1 -> revised (1, 1, 1) -> softmax
    d = np.sqrt(2.0)  # distance from a=(2,1) to mav=(1,0) is sqrt(2)
    scale = d / np.log(2.0)  # shape 1: cdf(d) = 1 - exp(-d/scale) = 0.5
    models = {0: _model([1.0, 0.0], shape=1.0, scale=scale, class_id=0),
              1: _model([0.0, 0.0], shape=1.0, scale=1e308, class_id=1)}
    out = om.openmax_recalibrate(np.array([2.0, 1.0]), models,
                                 om.OpenMaxConfig(alpha=1))
    np.testing.assert_allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_recalibrate_simplex_property():
    rng = np.random.default_rng(9)
    c, d = 4, 4
    models = {i: _model(rng.standard_normal(d), shape=2.0, scale=1.5, class_id=i)
              for i in range(c)}
    a = rng.standard_normal((c, 50)) * 3
    probs = om.recalibrate_map(a, models, om.OpenMaxConfig())
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(probs >= 0.0)


def test_recalibrate_missing_model():
    with pytest.raises(ModelMissing):
        om.openmax_recalibrate(np.zeros(3), _zero_cdf_models(2, 3),
                               om.OpenMaxConfig())


# --- scoring ---

def test_score_mav_fixed_point():
    models = {0: _model([5.0, 0.0], shape=1.0, scale=1.0, class_id=0),
              1: _model([0.0, 5.0], shape=1.0, scale=1.0, class_id=1)}
    logits = np.array([5.0, 0.0]).reshape(2, 1, 1)
    score, prior, posterior = om.score_openfcn(logits, models,
                                               om.OpenMaxConfig(quantile=0.5))
    assert prior[0, 0] == 0
    assert posterior[0, 0] == 0  # distance 0 -> CDF 0 -> retained
    assert score[0, 0] > 0.9


def test_score_tail_rejection():
    shape, scale = 2.0, 1.0
    models = {0: _model([0.0, 0.0], shape=shape, scale=scale, class_id=0),
              1: _model([0.0, 50.0], shape=shape, scale=scale, class_id=1)}
    logits = np.array([10.0, 0.0]).reshape(2, 1, 1)  # distance 10, cdf ~ 1
    q = om.weibull_cdf(shape, scale, 10.0) - 1e-9
    _, prior, posterior = om.score_openfcn(logits, models,
                                           om.OpenMaxConfig(quantile=q))
    assert prior[0, 0] == 0
    assert posterior[0, 0] == 2  # unknown sentinel = C


def test_openfcn_degrades_to_softmax():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((3, 6, 6))
    models = _zero_cdf_models(3, 3)
    score, prior, posterior = om.score_openfcn(logits, models, om.OpenMaxConfig())
    np.testing.assert_array_equal(prior, np.argmax(logits, axis=0))
    np.testing.assert_array_equal(posterior, prior)
    np.testing.assert_allclose(score, 1.0)


def test_model_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    rows = rng.standard_normal((500, 3)) + [4.0, 0.0, 0.0]
    cfg = om.OpenMaxConfig(tail_size=100)
    models = {0: om.fit_class_model(_sm(rows, 0), cfg), 1: None}
    om.save_models(tmp_path / "m.json", models, cfg)
    back, back_cfg = om.load_models(tmp_path / "m.json")
    assert back_cfg == cfg
    assert back[1] is None
    m, b = models[0], back[0]
    assert b.shape == pytest.approx(m.shape)
    assert b.scale == pytest.approx(m.scale)
    np.testing.assert_allclose(b.mav, m.mav)
