"""Flow-matching corruption, prediction targets, and the Euler sampler.

The corruption path is the straight line z_t = (1 - t) * z0 + t * eps.
Networks either predict the injected noise (``noise`` mode) or the clean
sample (``sample`` mode); the mode is fixed per trained network and
recorded in its checkpoint.  Generation integrates the induced velocity
field from t=1 back to t=0 with uniform Euler steps.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import ShapeError
from .rng import RngState


class PredictionTarget(str, enum.Enum):
    NOISE = "noise"    # network regresses eps
    SAMPLE = "sample"  # network regresses z0

    @classmethod
    def parse(cls, value) -> "PredictionTarget":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


def corrupt(z0: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    """(1 - t) * z0 + t * eps for t in [0, 1]."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {z0.shape} and eps {eps.shape} differ")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return (1.0 - t) * z0 + t * eps


def sample_timestep(rng: RngState) -> float:
    """Training timestep drawn uniformly on [0, 1]."""
    return float(rng.uniform(()))


def training_pair(z0: np.ndarray, eps: np.ndarray, t: float,
                  mode: PredictionTarget) -> tuple[np.ndarray, np.ndarray]:
    """Network input z_t and regression target for the given mode."""
    mode = PredictionTarget.parse(mode)
    zt = corrupt(z0, eps, t)
    target = eps if mode is PredictionTarget.NOISE else z0
    return zt, target


def euler_generate(model, z_init: np.ndarray, steps: int,
                   mode: PredictionTarget) -> np.ndarray:
    """Integrate from t=1 to t=0 in ``steps`` uniform Euler steps.

    ``model(z, t)`` returns the network prediction at time t.  The velocity
    is derived from the implied clean-sample estimate, v = (z_t - z0_hat) / t,
    which makes a perfect constant-prediction model exact at any step count.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    mode = PredictionTarget.parse(mode)
    z = np.array(z_init, copy=True)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        pred = np.asarray(model(z, t))
        if pred.shape != z.shape:
            raise ShapeError(f"model returned {pred.shape}, expected {z.shape}")
        z0_hat = pred if mode is PredictionTarget.SAMPLE else z - t * pred
        v = (z - z0_hat) / t
        z = z - dt * v
    return z
