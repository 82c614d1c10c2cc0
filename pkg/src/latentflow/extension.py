"""Generating sequences longer than a model's window by splitting them into overlapping segments.

Two strategies share one segment layout:

* multi-diffusion advances every segment by one ODE step, then merges the
  per-segment predictions with per-frame normalised soft masks;
* segment-level autoregressive generation solves one segment completely
  before the next, passing information forward through an audio-style
  context tensor and/or by blending the new trajectory towards the previous
  one over the overlap.  :func:`beam_extend` adds candidate expansion and
  pruning on top of it.

Velocity fields receive ``cond`` as a :class:`SegmentCond`.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np

from .numerics import Rng, as_tensor
from .sampler import TimeSchedule, get_stepper

MODES = ("context_cond", "trajectory_reg", "both")
WINDOWS = ("uniform", "bartlett")


@dataclass(frozen=True)
class SegmentPlan:
    n_total: int
    n_win: int
    n_hop: int
    n_ctx: int
    spans: tuple[tuple[int, int], ...]

    @property
    def n_segments(self) -> int:
        return len(self.spans)

    def window_start(self, j: int) -> int:
        """Frame where segment ``j`` (0-based) would begin if it were not clipped at 0."""
        return j * self.n_hop - self.n_ctx

    def overlap(self, j: int) -> int:
        """Frames segment ``j`` shares with segment ``j - 1`` (0 for the first)."""
        if j == 0:
            return 0
        return max(0, self.spans[j - 1][1] - self.spans[j][0])


class SegmentCond(NamedTuple):
    index: int
    start: int
    end: int
    context: np.ndarray | None = None
    extra: Any = None


def plan_segments(n_total: int, n_hop: int, n_ctx: int) -> SegmentPlan:
    """Spans ``[max(0, (j-1) n_hop - n_ctx), min(N, j n_hop))`` for ``j = 1..ceil(N / n_hop)``."""
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    if n_hop < 1:
        raise ValueError("n_hop must be >= 1")
    if n_ctx < 0:
        raise ValueError("n_ctx must be >= 0")
    n_seg = -(-n_total // n_hop)
    spans = tuple((max(0, (j - 1) * n_hop - n_ctx), min(n_total, j * n_hop))
                  for j in range(1, n_seg + 1))
    return SegmentPlan(n_total, n_hop + n_ctx, n_hop, n_ctx, spans)


def bartlett_window(n_win: int) -> np.ndarray:
    if n_win < 2:
        raise ValueError("Bartlett window needs n_win >= 2")
    half = (n_win - 1) / 2
    n = np.arange(n_win, dtype=np.float64)
    return (2.0 / (n_win - 1)) * (half - np.abs(n - half))


def raw_weights(plan: SegmentPlan, window: str = "bartlett") -> np.ndarray:
    """Unnormalised zero-padded windows as a ``(segments, frames)`` array.

    Clipped segments take the matching slice of the full ``n_win`` window,
    so the window stays anchored to where the segment would have started.
    """
    if window not in WINDOWS:
        raise ValueError(f"unknown window {window!r}; choose from {WINDOWS}")
    out = np.zeros((plan.n_segments, plan.n_total))
    full = bartlett_window(plan.n_win) if window == "bartlett" else None
    for j, (s, e) in enumerate(plan.spans):
        if full is None:
            out[j, s:e] = 1.0
        else:
            offset = s - plan.window_start(j)
            out[j, s:e] = full[offset:offset + (e - s)]
    return out


def normalized_masks(plan: SegmentPlan, window: str = "bartlett") -> list[np.ndarray]:
    """Per-segment soft masks over each segment's own span; they sum to 1 on every frame.

    A frame whose raw weights are all zero (possible at Bartlett end points)
    falls back to equal weights over the segments covering it.
    """
    raw = raw_weights(plan, window)
    cover = np.zeros_like(raw)
    for j, (s, e) in enumerate(plan.spans):
        cover[j, s:e] = 1.0
    total = raw.sum(axis=0)
    dead = total == 0.0
    raw[:, dead] = cover[:, dead]
    norm = raw / raw.sum(axis=0)
    return [norm[j, s:e].copy() for j, (s, e) in enumerate(plan.spans)]


def mask_report(plan: SegmentPlan, window: str = "bartlett") -> np.ndarray:
    """Zero-padded normalised masks as a ``(frames, segments)`` table."""
    table = np.zeros((plan.n_total, plan.n_segments))
    for j, (m, (s, e)) in enumerate(zip(normalized_masks(plan, window), plan.spans)):
        table[s:e, j] = m
    return table


def _field_for(fields, j: int) -> Callable:
    if callable(fields):
        return fields
    return fields[j]


def _extra_for(conds, j: int):
    return None if conds is None else conds[j]


def multidiffusion_solve(fields, plan: SegmentPlan, sched: TimeSchedule, x_init,
                         window: str = "bartlett", conds: Sequence | None = None,
                         guidance=None, solver: str = "euler") -> np.ndarray:
    """Advance all segments one ODE step at a time and merge them with soft masks.

    ``fields`` is one velocity field or a sequence with one per segment;
    ``x_init`` has shape ``(N, ...)`` with the frame axis first.
    """
    x = as_tensor(x_init)
    if x.ndim == 0 or x.shape[0] != plan.n_total:
        raise ValueError(f"x_init must have {plan.n_total} frames, got shape {x.shape}")
    step = get_stepper(solver)
    masks = [m.reshape((-1,) + (1,) * (x.ndim - 1)) for m in normalized_masks(plan, window)]
    seg_conds = [SegmentCond(j, s, e, None, _extra_for(conds, j))
                 for j, (s, e) in enumerate(plan.spans)]
    for t0, t1 in sched.intervals():
        merged = np.empty_like(x)
        filled = np.zeros(plan.n_total, dtype=bool)
        for j, (s, e) in enumerate(plan.spans):
            pred = step(_field_for(fields, j), x[s:e], t0, t1, seg_conds[j], guidance)
            part = masks[j] * pred
            fresh = ~filled[s:e]
            block = merged[s:e]
            block[fresh] = part[fresh]
            block[~fresh] += part[~fresh]
            filled[s:e] = True
        x = merged
    return x


def ar_context(prev_x1, n_ctx: int, n_hop: int) -> np.ndarray:
    """Context for the next segment: the last ``n_ctx`` frames of ``prev_x1`` followed by ``n_hop`` zero frames."""
    prev = as_tensor(prev_x1)
    if n_ctx < 0 or n_hop < 0:
        raise ValueError("n_ctx and n_hop must be >= 0")
    if prev.ndim == 0 or prev.shape[0] < n_ctx:
        raise ValueError(f"previous segment has {prev.shape[:1]} frames, need at least {n_ctx}")
    tail = prev[prev.shape[0] - n_ctx:]
    return np.concatenate([tail, np.zeros((n_hop,) + prev.shape[1:])], axis=0)


def ramp_weights(n_ctx: int) -> np.ndarray:
    """``w_n = n / n_ctx`` for ``n = 1..n_ctx``: weight of the new segment on each overlap frame."""
    return np.arange(1, n_ctx + 1, dtype=np.float64) / n_ctx


def ar_trajectory_blend(x_hat_head, prev_tail) -> np.ndarray:
    """Pull the first overlap frames of the new trajectory towards the previous segment's tail."""
    x_hat, prev = as_tensor(x_hat_head), as_tensor(prev_tail)
    if x_hat.shape != prev.shape:
        raise ValueError(f"shape mismatch: {x_hat.shape} vs {prev.shape}")
    n = x_hat.shape[0]
    if n == 0:
        return x_hat.copy()
    w = ramp_weights(n)
    out = prev + w.reshape((n,) + (1,) * (x_hat.ndim - 1)) * (x_hat - prev)
    out[w == 1.0] = x_hat[w == 1.0]
    return out


def segment_rng(rng: Rng, segment: int, candidate: int = 0) -> Rng:
    """Noise stream for one candidate of one segment; candidate 0 is the plain autoregressive stream."""
    return rng.child(segment).child(candidate)


@dataclass
class _Prefix:
    out: np.ndarray
    prev_x1: np.ndarray | None
    prev_traj: list[np.ndarray] | None


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")


def _solve_segment(field, plan: SegmentPlan, j: int, sched: TimeSchedule, noise: np.ndarray,
                   prefix: _Prefix, mode: str, extra, guidance, step) -> tuple[np.ndarray, list]:
    s, e = plan.spans[j]
    n = plan.overlap(j)
    if mode in ("context_cond", "both") and j > 0:
        context = ar_context(prefix.prev_x1, n, (e - s) - n)
    else:
        context = np.zeros_like(noise)
    regularize = mode in ("trajectory_reg", "both") and j > 0 and n > 0
    cond = SegmentCond(j, s, e, context, extra)
    x = noise
    traj = [x]
    for i, (t0, t1) in enumerate(sched.intervals()):
        x = step(field, x, t0, t1, cond, guidance)
        if regularize:
            prev_state = prefix.prev_traj[i + 1]
            x = x.copy()
            x[:n] = ar_trajectory_blend(x[:n], prev_state[prev_state.shape[0] - n:])
        traj.append(x)
    return x, traj


def _extend(fields, plan, sched, rng, channels, mode, conds, guidance, solver,
            scorer, candidates, beam):
    _check_mode(mode)
    if not 1 <= beam <= candidates:
        raise ValueError("need candidates >= beam >= 1")
    step = get_stepper(solver)
    frame_shape = (channels,) if isinstance(channels, int) else tuple(channels)
    prefixes = [_Prefix(np.zeros((plan.n_total,) + frame_shape), None, None)]
    for j, (s, e) in enumerate(plan.spans):
        scored = []
        for b, prefix in enumerate(prefixes):
            for c in range(candidates):
                noise = segment_rng(rng, j, b * candidates + c).normal((e - s,) + frame_shape)
                x1, traj = _solve_segment(_field_for(fields, j), plan, j, sched, noise, prefix,
                                          mode, _extra_for(conds, j), guidance, step)
                out = prefix.out.copy()
                out[s:e] = x1
                score = 0.0
                if scorer is not None:
                    score = float(scorer(out[:e]))
                    if not np.isfinite(score):
                        raise ValueError(f"scorer returned non-finite value {score} at segment {j}")
                scored.append((score, _Prefix(out, x1, traj)))
        # stable sort keeps stream order among equal scores
        scored.sort(key=lambda item: -item[0])
        prefixes = [p for _, p in scored[:beam]]
    return prefixes[0].out


def ar_generate(fields, plan: SegmentPlan, sched: TimeSchedule, rng: Rng, channels: int = 1,
                mode: str = "both", conds: Sequence | None = None, guidance=None,
                solver: str = "euler") -> np.ndarray:
    """Segment-by-segment generation; later segments overwrite the frames they share with earlier ones."""
    return _extend(fields, plan, sched, rng, channels, mode, conds, guidance, solver,
                   scorer=None, candidates=1, beam=1)


def beam_extend(fields, plan: SegmentPlan, sched: TimeSchedule,
                scorer: Callable[[np.ndarray], float], candidates: int, beam: int, rng: Rng,
                channels: int = 1, mode: str = "both", conds: Sequence | None = None,
                guidance=None, solver: str = "euler") -> np.ndarray:
    """Segment-level beam search over autoregressive continuations.

    Every surviving prefix spawns ``candidates`` continuations of the next
    segment, each from its own noise stream; the ``beam`` highest-scoring
    partial sequences (``scorer`` sees frames ``[0, end)``) survive.  Ties
    keep stream order, so a constant scorer reproduces :func:`ar_generate`.
    """
    return _extend(fields, plan, sched, rng, channels, mode, conds, guidance, solver,
                   scorer=scorer, candidates=candidates, beam=beam)


def target_field(target) -> Callable:
    """Toy field that transports any state onto a fixed frame sequence by ``t = 1``.

    ``u(x, t) = (target - x) / (1 - t)`` restricted to the segment's span, so
    an Euler step ending at ``t = 1`` lands exactly on the target.
    """
    target = as_tensor(target)

    def field(x, t, cond):
        seg = target if cond is None else target[cond.start:cond.end]
        return (seg - x) / max(1.0 - t, 1e-12)

    return field
