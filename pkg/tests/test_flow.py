import numpy as np
import pytest

from vtoff import flow
from vtoff.errors import ShapeError
from vtoff.flow import PredictionTarget
from vtoff.rng import RngState


def test_corrupt_endpoints_exact():
    rng = RngState(1)
    z0 = rng.normal((2, 3, 4, 4))
    eps = rng.normal((2, 3, 4, 4))
    assert flow.corrupt(z0, eps, 0.0).tobytes() == z0.tobytes()
    assert flow.corrupt(z0, eps, 1.0).tobytes() == eps.tobytes()


def test_corrupt_midpoint():
    np.testing.assert_array_equal(
        flow.corrupt(np.array([2.0]), np.array([0.0]), 0.5), [1.0])


def test_corrupt_domain_error():
    z = np.zeros(3)
    with pytest.raises(ValueError):
        flow.corrupt(z, z, 1.5)
    with pytest.raises(ShapeError):
        flow.corrupt(np.zeros(3), np.zeros(4), 0.5)


def test_corrupt_is_affine():
    rng = RngState(2)
    z0, eps = rng.normal((5,)), rng.normal((5,))
    for t in (0.25, 0.7):
        lhs = flow.corrupt(3.0 * z0, 3.0 * eps, t)
        rhs = 3.0 * flow.corrupt(z0, eps, t)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_sample_timestep_deterministic_and_bounded():
    first = flow.sample_timestep(RngState(7))
    again = flow.sample_timestep(RngState(7))
    assert first == again == 0.8720734548204873
    rng = RngState(3)
    draws = np.array([flow.sample_timestep(rng) for _ in range(2000)])
    assert draws.min() >= 0.0 and draws.max() <= 1.0


def test_sample_timestep_mean():
    rng = RngState(11)
    draws = rng.uniform((100_000,))
    assert abs(draws.mean() - 0.5) < 0.01


def test_training_pair_targets():
    rng = RngState(4)
    z0, eps = rng.normal((3, 2)), rng.normal((3, 2))
    for t in (0.0, 0.3, 1.0):
        _, target = flow.training_pair(z0, eps, t, PredictionTarget.NOISE)
        assert target.tobytes() == eps.tobytes()
        _, target = flow.training_pair(z0, eps, t, PredictionTarget.SAMPLE)
        assert target.tobytes() == z0.tobytes()
    zt, target = flow.training_pair(z0, eps, 0.0, "noise")
    assert zt.tobytes() == z0.tobytes() and target.tobytes() == eps.tobytes()


@pytest.mark.parametrize("steps", [1, 2, 8, 28, 101])
@pytest.mark.parametrize("mode", [PredictionTarget.NOISE, PredictionTarget.SAMPLE])
def test_euler_recovers_constant_oracle(steps, mode):
    rng = RngState(5)
    target = rng.normal((2, 3, 4))
    z1 = rng.normal((2, 3, 4))

    def model(z, t):
        if mode is PredictionTarget.SAMPLE:
            return target
        return (z - target) / t  # the eps consistent with z0_hat == target

    out = flow.euler_generate(model, z1, steps, mode)
    assert np.max(np.abs(out - target)) < 1e-6


def test_euler_single_step_collapses_to_prediction():
    rng = RngState(6)
    pred = rng.normal((4, 4))
    out = flow.euler_generate(lambda z, t: pred, rng.normal((4, 4)), 1,
                              PredictionTarget.SAMPLE)
    np.testing.assert_allclose(out, pred, atol=1e-12)


def test_euler_step_doubling_converges():
    # Smooth synthetic field: z0_hat depends on z and t, so Euler error is
    # nonzero and must shrink as steps grow.
    rng = RngState(8)
    z1 = rng.normal((3, 3))

    def model(z, t):
        return np.tanh(z) * (1.0 - 0.5 * t)

    ref = flow.euler_generate(model, z1, 4096, PredictionTarget.SAMPLE)
    err8 = np.max(np.abs(flow.euler_generate(model, z1, 8, PredictionTarget.SAMPLE) - ref))
    err16 = np.max(np.abs(flow.euler_generate(model, z1, 16, PredictionTarget.SAMPLE) - ref))
    diff = np.max(np.abs(
        flow.euler_generate(model, z1, 16, PredictionTarget.SAMPLE)
        - flow.euler_generate(model, z1, 8, PredictionTarget.SAMPLE)))
    assert err16 < err8
    assert diff < 2 * err8


def test_euler_shape_contract():
    with pytest.raises(ShapeError):
        flow.euler_generate(lambda z, t: np.zeros(3), np.zeros(4), 4,
                            PredictionTarget.SAMPLE)
    with pytest.raises(ValueError):
        flow.euler_generate(lambda z, t: z, np.zeros(4), 0, PredictionTarget.SAMPLE)


def test_generation_deterministic_given_seed():
    def model(z, t):
        return 0.9 * z

    z1 = RngState(9).normal((2, 5))
    a = flow.euler_generate(model, z1, 28, PredictionTarget.SAMPLE)
    b = flow.euler_generate(model, RngState(9).normal((2, 5)), 28, PredictionTarget.SAMPLE)
    assert a.tobytes() == b.tobytes()
