"""Time schedules, fixed-step ODE solvers and classifier-free guidance.

Solvers integrate forward from noise at ``t = 0`` to data at ``t = 1``.  A
velocity field is any callable ``field(x, t, cond) -> array`` returning an
array of ``x``'s shape.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np

from .numerics import as_tensor, check_same_shape

VelocityField = Callable[[np.ndarray, float, Any], np.ndarray]


@dataclass(frozen=True)
class TimeSchedule:
    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=np.float64)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("a schedule needs at least two knots")
        if k[0] != 0.0 or k[-1] != 1.0:
            raise ValueError("schedule must start at 0 and end at 1")
        if not np.all(np.diff(k) > 0):
            raise ValueError("schedule knots must be strictly increasing")
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)

    @property
    def steps(self) -> int:
        return self.knots.size - 1

    def intervals(self):
        for i in range(self.steps):
            yield float(self.knots[i]), float(self.knots[i + 1])


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValueError("guidance scale must be finite and >= 0")


def linear_schedule(steps: int) -> TimeSchedule:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return TimeSchedule(np.arange(steps + 1, dtype=np.float64) / steps)


def linear_quadratic_schedule(total_steps: int = 50, emulated_n: int = 250) -> TimeSchedule:
    """First half copies the start of an ``emulated_n``-step linear schedule, second half is quadratic.

    With ``L = total_steps // 2`` the knots are ``i / emulated_n`` for
    ``i <= L`` (bit-identical to :func:`linear_schedule`), then
    ``t_L + (1 - t_L) * (k / L) ** 2`` for ``k = 1..L``.
    """
    if total_steps < 2 or total_steps % 2:
        raise ValueError("total_steps must be even and >= 2")
    half = total_steps // 2
    if emulated_n <= half:
        raise ValueError("emulated_n must exceed total_steps / 2")
    head = np.arange(half + 1, dtype=np.float64) / emulated_n
    t_l = head[-1]
    k = np.arange(1, half + 1, dtype=np.float64)
    tail = t_l + (1.0 - t_l) * (k / half) ** 2
    tail[-1] = 1.0
    return TimeSchedule(np.concatenate([head, tail]))


def parse_schedule(spec: str) -> TimeSchedule:
    """Parse ``linear:N`` or ``linquad:S,N``."""
    kind, _, args = spec.partition(":")
    try:
        nums = [int(a) for a in args.split(",")] if args else []
    except ValueError:
        raise ValueError(f"bad schedule spec {spec!r}") from None
    if kind == "linear" and len(nums) == 1:
        return linear_schedule(nums[0])
    if kind == "linquad" and len(nums) == 2:
        return linear_quadratic_schedule(*nums)
    raise ValueError(f"bad schedule spec {spec!r}; expected linear:N or linquad:S,N")


def cfg_velocity(u_cond, u_uncond, scale: float) -> np.ndarray:
    u_cond, u_uncond = as_tensor(u_cond), as_tensor(u_uncond)
    check_same_shape(u_cond, u_uncond)
    if scale == 1.0:
        return u_cond.copy()
    return u_uncond + scale * (u_cond - u_uncond)


def guided_velocity(field: VelocityField, x: np.ndarray, t: float, cond=None,
                    guidance: GuidanceConfig | None = None) -> np.ndarray:
    """Evaluate ``field`` and apply CFG against the ``cond=None`` branch when guidance is set."""
    u = _call(field, x, t, cond)
    if guidance is None:
        return u
    return cfg_velocity(u, _call(field, x, t, None), guidance.scale)


def _call(field, x, t, cond):
    u = np.asarray(field(x, t, cond), dtype=np.float64)
    if u.shape != x.shape:
        raise ValueError(f"velocity field returned shape {u.shape}, expected {x.shape}")
    return u


def euler_step(field, x, t0, t1, cond=None, guidance=None) -> np.ndarray:
    return x + (t1 - t0) * guided_velocity(field, x, t0, cond, guidance)


def midpoint_step(field, x, t0, t1, cond=None, guidance=None) -> np.ndarray:
    h = t1 - t0
    k = guided_velocity(field, x, t0, cond, guidance)
    return x + h * guided_velocity(field, x + (h / 2) * k, t0 + h / 2, cond, guidance)


STEPPERS = {"euler": euler_step, "midpoint": midpoint_step}


def get_stepper(name: str):
    try:
        return STEPPERS[name]
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; choose from {sorted(STEPPERS)}") from None


def solve(field, x0, sched: TimeSchedule, cond=None, guidance=None,
          solver: str = "euler") -> np.ndarray:
    step = get_stepper(solver)
    x = as_tensor(x0)
    for t0, t1 in sched.intervals():
        x = step(field, x, t0, t1, cond, guidance)
    return x


def euler_solve(field, x0, sched: TimeSchedule, cond=None, guidance=None) -> np.ndarray:
    """First-order Euler integration of ``field`` over ``sched``."""
    return solve(field, x0, sched, cond, guidance, "euler")


def midpoint_solve(field, x0, sched: TimeSchedule, cond=None, guidance=None) -> np.ndarray:
    """Explicit midpoint (second-order Runge-Kutta) integration over ``sched``."""
    return solve(field, x0, sched, cond, guidance, "midpoint")
