"""Flow-matching training targets on the optimal-transport path.

Noise ``x0`` sits at ``t = 0`` and data ``x1`` at ``t = 1``::

    xt = t * x1 + (1 - (1 - sigma_min) * t) * x0
    vt = x1 - (1 - sigma_min) * x0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numerics import Rng, as_tensor, check_same_shape, sample_logit_normal

SIGMA_MIN = 1e-5


@dataclass(frozen=True)
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float
    xt: np.ndarray
    vt: np.ndarray
    sigma_min: float = SIGMA_MIN


def ot_interpolate(x0, x1, t: float, sigma_min: float = SIGMA_MIN) -> np.ndarray:
    x0, x1 = as_tensor(x0), as_tensor(x1)
    check_same_shape(x0, x1)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if sigma_min < 0:
        raise ValueError("sigma_min must be nonnegative")
    if t == 0.0:
        # the affine form is x0 up to the sign of zero; keep the endpoint bit-exact
        return x0.copy()
    return t * x1 + (1.0 - (1.0 - sigma_min) * t) * x0


def velocity_target(x0, x1, sigma_min: float = SIGMA_MIN) -> np.ndarray:
    x0, x1 = as_tensor(x0), as_tensor(x1)
    check_same_shape(x0, x1)
    return x1 - (1.0 - sigma_min) * x0


def fm_loss(pred, target) -> float:
    """Mean squared error over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    check_same_shape(pred, target)
    if pred.size == 0:
        raise ValueError("empty loss")
    return float(np.mean((pred - target) ** 2))


class TrainingArrays(NamedTuple):
    index: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    vt: np.ndarray


def draw_training_arrays(dataset, batch: int, rng: Rng,
                         sigma_min: float = SIGMA_MIN) -> TrainingArrays:
    """Vectorised draw of one training batch.

    Data points are picked uniformly (with replacement) from the leading axis
    of ``dataset``; then ``batch`` logit-normal times; then N(0, 1) noise.
    """
    data = as_tensor(dataset)
    if data.ndim == 0 or data.shape[0] == 0:
        raise ValueError("dataset is empty")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    idx = rng.integers(data.shape[0], batch)
    t = sample_logit_normal(rng, batch)
    x0 = rng.normal((batch,) + data.shape[1:])
    x1 = data[idx]
    tb = t.reshape((batch,) + (1,) * (data.ndim - 1))
    xt = tb * x1 + (1.0 - (1.0 - sigma_min) * tb) * x0
    vt = x1 - (1.0 - sigma_min) * x0
    return TrainingArrays(idx, x0, x1, t, xt, vt)


def make_training_batch(dataset, batch: int, rng: Rng,
                        sigma_min: float = SIGMA_MIN) -> list[FlowSample]:
    """Same draws as :func:`draw_training_arrays`, unpacked into :class:`FlowSample` records."""
    arrays = draw_training_arrays(dataset, batch, rng, sigma_min)
    out = []
    for k in range(batch):
        x0, x1, t = arrays.x0[k], arrays.x1[k].copy(), float(arrays.t[k])
        out.append(FlowSample(x0=x0, x1=x1, t=t,
                              xt=ot_interpolate(x0, x1, t, sigma_min),
                              vt=velocity_target(x0, x1, sigma_min),
                              sigma_min=sigma_min))
    return out


def stack_batch(samples: list[FlowSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a list of samples into ``(xt, t, vt)`` arrays."""
    xt = np.stack([s.xt for s in samples])
    t = np.array([s.t for s in samples])
    vt = np.stack([s.vt for s in samples])
    return xt, t, vt
