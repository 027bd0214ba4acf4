import numpy as np
import pytest

from tomo4d.forward import ImageSet
from tomo4d.sensor import SensorModel, apply_noise, apply_noise_array, image_rng


def const_set(value, shape=(100, 100)):
    return ImageSet(0.0, (np.full(shape, float(value)),))


def test_zero_input_zero_output():
    out = apply_noise(const_set(0.0, (20, 20)), SensorModel(readout_sigma=0.0))
    assert np.all(out.images[0] == 0.0)


def test_nine_bits_gives_512_levels():
    model = SensorModel()
    assert model.levels == 512
    # a ramp over the full range visits every level and nothing else
    ramp = np.linspace(0, model.full_well / model.electrons_per_unit, 200_000).reshape(400, 500)
    out = apply_noise(ImageSet(0.0, (ramp,)), model).images[0]
    levels = np.unique(np.rint(out * model.electrons_per_unit / model.quantum))
    assert levels.size == 512
    assert levels.min() == 0 and levels.max() == 511


def test_output_lies_on_quantisation_levels():
    model = SensorModel(seed=3)
    rng = np.random.default_rng(0)
    out = apply_noise(ImageSet(0.0, (rng.uniform(0, 2.5, (30, 30)),)), model).images[0]
    k = out * model.electrons_per_unit / model.quantum
    np.testing.assert_allclose(k, np.rint(k), atol=1e-9)


def test_shot_plus_readout_statistics():
    # 16-bit quantisation keeps the quantisation variance (q^2/12 ~ 0.8 e^2) out of the budget
    model = SensorModel(bits=16, electrons_per_unit=1.0, seed=11)
    e = apply_noise(const_set(100_000.0), model).images[0].ravel()
    assert e.size == 10_000
    assert abs(e.mean() - 100_000) < 3 * np.sqrt(100_000) / np.sqrt(1e4)
    assert e.var(ddof=1) == pytest.approx(100_000 + 20 ** 2, rel=0.10)


def test_nine_bit_quantisation_adds_variance():
    # at 9 bits one level is ~391 e-, adding q^2/12 ~ 1.3e4 e^2 on top of the shot noise
    model = SensorModel(electrons_per_unit=1.0, seed=11)
    e = apply_noise(const_set(100_000.0), model).images[0].ravel()
    expected = 100_000 + 400 + model.quantum ** 2 / 12
    assert e.var(ddof=1) == pytest.approx(expected, rel=0.10)


def test_poisson_law_without_readout():
    model = SensorModel(bits=16, readout_sigma=0.0, electrons_per_unit=1.0, seed=5)
    e = apply_noise(const_set(50_000.0), model).images[0].ravel()
    assert e.var(ddof=1) / e.mean() == pytest.approx(1.0, rel=0.05)


def test_saturation():
    model = SensorModel(seed=2)
    out = apply_noise(ImageSet(0.0, (np.array([[0.0, 1.0, 2.0, 5.0, 100.0]]),)), model).images[0]
    e = out * model.electrons_per_unit
    assert np.all(e >= 0) and np.all(e <= model.full_well * (1 + 1e-12))
    assert e[0, -1] == pytest.approx(model.full_well)


def test_seeds():
    rng = np.random.default_rng(0)
    im = ImageSet(0.0, (rng.uniform(0.2, 1.5, (40, 40)), rng.uniform(0.2, 1.5, (10, 12))))
    a = apply_noise(im, SensorModel(seed=7), epoch_index=2)
    b = apply_noise(im, SensorModel(seed=7), epoch_index=2)
    c = apply_noise(im, SensorModel(seed=8), epoch_index=2)
    d = apply_noise(im, SensorModel(seed=7), epoch_index=3)
    for x, y in zip(a.images, b.images):
        assert x.tobytes() == y.tobytes()
    assert not np.array_equal(a.images[0], c.images[0])
    assert not np.array_equal(a.images[0], d.images[0])
    # camera substreams are independent of each other
    assert not np.array_equal(a.images[0][:10, :12], a.images[1])


def test_substream_is_order_independent():
    model = SensorModel(seed=4)
    im = np.full((8, 8), 0.7)
    first = apply_noise_array(im, model, image_rng(4, 1, 0))
    apply_noise_array(im, model, image_rng(4, 0, 0))
    assert np.array_equal(first, apply_noise_array(im, model, image_rng(4, 1, 0)))


def test_negative_input_rejected():
    with pytest.raises(ValueError):
        apply_noise(const_set(-0.1, (2, 2)), SensorModel())


@pytest.mark.parametrize("kw", [{"full_well": 0}, {"bits": 0}, {"bits": 17}, {"readout_sigma": -1}])
def test_model_validation(kw):
    with pytest.raises(ValueError):
        SensorModel(**kw)
