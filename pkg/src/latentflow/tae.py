"""Temporal-autoencoder frame arithmetic, outlier penalty loss and tiled inference.

The neural autoencoder itself is not part of this package.  A :class:`CodecSpec`
bundles any pair of ``encode`` / ``decode`` callables acting on frame-first
arrays together with the temporal compression factor they implement.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numerics import as_tensor, reduce_stats


def latent_frame_count(t_raw: int, factor: int = 8) -> int:
    """Latent frames produced by encoding ``t_raw`` raw frames: ``ceil(t_raw / factor)``."""
    if t_raw < 1:
        raise ValueError("t_raw must be >= 1")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return -(-t_raw // factor)


def spurious_frame_count(t_raw: int, factor: int = 8) -> int:
    """Extra frames the decoder emits beyond ``t_raw``; they are discarded."""
    return factor * latent_frame_count(t_raw, factor) - t_raw


def opl_loss(x, r: float = 3.0) -> float:
    """Outlier penalty loss of a ``(C, H, W)`` latent or a ``(T, C, H, W)`` latent video.

    Per-channel mean and population std are taken over the spatial positions.
    Each position is penalised by how far its channel vector lies beyond
    ``r * ||std||`` from the mean vector.  Video frames are treated as a batch
    and their losses averaged.
    """
    x = as_tensor(x)
    if r < 0:
        raise ValueError("r must be >= 0")
    if x.ndim == 3:
        x = x[None]
    elif x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (T, C, H, W), got shape {x.shape}")
    _, _, h, w = x.shape
    if h == 0 or w == 0 or x.shape[0] == 0:
        raise ValueError("empty spatial extent")
    losses = []
    for frame in x:
        mean, std = reduce_stats(frame, axes=(1, 2))
        dev = np.linalg.norm(frame - mean[:, None, None], axis=0)
        hinge = np.maximum(dev - r * np.linalg.norm(std), 0.0)
        losses.append(math.fsum(hinge.ravel()) / (h * w))
    return math.fsum(losses) / len(losses)


@dataclass(frozen=True)
class TilePlan:
    tile_len: int
    overlap: int
    spans: tuple[tuple[int, int], ...]

    @property
    def total(self) -> int:
        return self.spans[-1][1]


def plan_tiles(t_frames: int, tile_len: int, overlap: int = 0) -> TilePlan:
    """Cover ``[0, t_frames)`` with tiles of ``tile_len`` frames advancing by ``tile_len - overlap``."""
    if t_frames < 1:
        raise ValueError("t_frames must be >= 1")
    if tile_len < 1:
        raise ValueError("tile_len must be >= 1")
    if not 0 <= overlap < tile_len:
        raise ValueError("overlap must satisfy 0 <= overlap < tile_len")
    hop = tile_len - overlap
    spans = []
    start = 0
    while True:
        end = min(start + tile_len, t_frames)
        spans.append((start, end))
        if end == t_frames:
            break
        start += hop
    return TilePlan(tile_len, overlap, tuple(spans))


def crossfade_weights(n: int) -> np.ndarray:
    """Weight of the earlier tile on each of ``n`` overlapping frames, descending 1 -> 0."""
    if n == 1:
        return np.array([0.5])
    return 1.0 - np.arange(n, dtype=np.float64) / max(n - 1, 1)


def _check_tiles(tiles, plan: TilePlan):
    if len(tiles) != len(plan.spans):
        raise ValueError(f"{len(tiles)} tiles for {len(plan.spans)} spans")
    arrs = [as_tensor(t) for t in tiles]
    for a, (s, e) in zip(arrs, plan.spans):
        if a.ndim == 0 or a.shape[0] != e - s:
            raise ValueError(f"tile for span ({s}, {e}) has {a.shape[:1]} frames")
        if a.shape[1:] != arrs[0].shape[1:]:
            raise ValueError("tiles disagree on per-frame shape")
    for (s0, e0), (s1, e1) in zip(plan.spans, plan.spans[1:]):
        if not s0 < s1 <= e0:
            raise ValueError("spans must advance and leave no gaps")
    if plan.spans[0][0] != 0:
        raise ValueError("first span must start at frame 0")
    return arrs


def blend_stitch(tiles: Sequence[np.ndarray], plan: TilePlan) -> np.ndarray:
    """Stitch tiles along axis 0, crossfading every overlap.

    Tiles are folded in left to right.  On an overlap of ``N`` frames the
    running result is mixed with the new tile as ``w * earlier + (1 - w) * later``
    with ``w`` from :func:`crossfade_weights`.  The mix is evaluated as
    ``later + w * (earlier - later)`` so identical content passes through
    bit-exactly.
    """
    arrs = _check_tiles(tiles, plan)
    out = arrs[0].copy()
    for a, (s, _) in zip(arrs[1:], plan.spans[1:]):
        n = out.shape[0] - s
        w = crossfade_weights(n).reshape((n,) + (1,) * (a.ndim - 1))
        earlier, later = out[s:], a[:n]
        mixed = later + w * (earlier - later)
        mixed[w.ravel() == 1.0] = earlier[w.ravel() == 1.0]
        out = np.concatenate([out[:s], mixed, a[n:]], axis=0)
    return out


def stitch_weights(plan: TilePlan) -> np.ndarray:
    """Per-tile, per-frame weights used by :func:`blend_stitch` as a ``(tiles, frames)`` array."""
    weights = np.zeros((len(plan.spans), plan.total))
    s0, e0 = plan.spans[0]
    weights[0, s0:e0] = 1.0
    end = e0
    for k, (s, e) in enumerate(plan.spans[1:], start=1):
        n = end - s
        w = crossfade_weights(n)
        weights[:k, s:end] *= w
        weights[k, s:end] = 1.0 - w
        weights[k, end:e] = 1.0
        end = e
    return weights


@dataclass(frozen=True)
class CodecSpec:
    encode: Callable[[np.ndarray], np.ndarray]
    decode: Callable[[np.ndarray], np.ndarray]
    temporal_factor: int = 8
    spatial_factor: int = 8
    channels: int = 16

    def __post_init__(self):
        if self.temporal_factor < 1 or self.spatial_factor < 1:
            raise ValueError("compression factors must be >= 1")


def apply_untiled(codec: CodecSpec, x) -> np.ndarray:
    """Encode then decode the whole clip at once, dropping spurious frames."""
    x = as_tensor(x)
    z = np.asarray(codec.encode(x), dtype=np.float64)
    if z.shape[0] != latent_frame_count(x.shape[0], codec.temporal_factor):
        raise ValueError(f"encoder produced {z.shape[0]} latent frames for {x.shape[0]} raw frames")
    y = np.asarray(codec.decode(z), dtype=np.float64)
    if y.shape[0] != z.shape[0] * codec.temporal_factor:
        raise ValueError("decoder frame count does not match the temporal factor")
    return y[: x.shape[0]]


def default_tile_plans(t_raw: int, factor: int = 8) -> tuple[TilePlan, TilePlan]:
    """Encoder tiles of 32 raw frames without overlap; decoder tiles of 4 latent frames overlapping by 2."""
    enc = plan_tiles(t_raw, 4 * factor, 0)
    dec = plan_tiles(latent_frame_count(t_raw, factor), 4, 2)
    return enc, dec


def tiled_apply(codec: CodecSpec, x, encode_plan: TilePlan | None = None,
                decode_plan: TilePlan | None = None) -> np.ndarray:
    """Tiled encode + decode of a frame-first clip.

    ``encode_plan`` is in raw frames and its tile length and overlap must be
    multiples of the temporal factor so every tile starts on a latent frame
    boundary.  ``decode_plan`` is in latent frames.  Overlaps are blended with
    :func:`blend_stitch` in latent space (encoder side) and raw space (decoder
    side); trailing spurious frames are dropped.
    """
    x = as_tensor(x)
    t_raw = x.shape[0]
    f = codec.temporal_factor
    if encode_plan is None or decode_plan is None:
        default_enc, default_dec = default_tile_plans(t_raw, f)
        encode_plan = encode_plan or default_enc
        decode_plan = decode_plan or default_dec
    if encode_plan.total != t_raw:
        raise ValueError(f"encode plan covers {encode_plan.total} frames, clip has {t_raw}")
    if encode_plan.tile_len % f or encode_plan.overlap % f:
        raise ValueError("encode tile length and overlap must be multiples of the temporal factor")

    latent_tiles, latent_spans = [], []
    for s, e in encode_plan.spans:
        z = np.asarray(codec.encode(x[s:e]), dtype=np.float64)
        n = latent_frame_count(e - s, f)
        if z.shape[0] != n:
            raise ValueError(f"encoder produced {z.shape[0]} latent frames for a {e - s}-frame tile")
        latent_tiles.append(z)
        latent_spans.append((s // f, s // f + n))
    latent_plan = TilePlan(encode_plan.tile_len // f, encode_plan.overlap // f, tuple(latent_spans))
    z = blend_stitch(latent_tiles, latent_plan)

    if decode_plan.total != z.shape[0]:
        raise ValueError(f"decode plan covers {decode_plan.total} latent frames, latent has {z.shape[0]}")
    raw_tiles = []
    for s, e in decode_plan.spans:
        y = np.asarray(codec.decode(z[s:e]), dtype=np.float64)
        if y.shape[0] != (e - s) * f:
            raise ValueError("decoder frame count does not match the temporal factor")
        raw_tiles.append(y)
    raw_plan = TilePlan(decode_plan.tile_len * f, decode_plan.overlap * f,
                        tuple((s * f, e * f) for s, e in decode_plan.spans))
    return blend_stitch(raw_tiles, raw_plan)[:t_raw]


def identity_codec() -> CodecSpec:
    return CodecSpec(encode=lambda x: np.array(x, dtype=np.float64),
                     decode=lambda z: np.array(z, dtype=np.float64),
                     temporal_factor=1, spatial_factor=1)


def scaling_codec(gain: float = 2.0) -> CodecSpec:
    """Per-frame linear codec: encode multiplies by ``gain``, decode by ``1 / gain``."""
    return CodecSpec(encode=lambda x: np.asarray(x, dtype=np.float64) * gain,
                     decode=lambda z: np.asarray(z, dtype=np.float64) * (1.0 / gain),
                     temporal_factor=1, spatial_factor=1)


def pooling_codec(factor: int = 8, gain: float = 2.0) -> CodecSpec:
    """Linear codec with real temporal compression.

    Encode pads the clip by repeating its last frame up to a multiple of
    ``factor``, averages each group of ``factor`` frames and scales by
    ``gain``.  Decode repeats every latent frame ``factor`` times and scales
    by ``1 / gain``.
    """

    def encode(x):
        x = np.asarray(x, dtype=np.float64)
        pad = spurious_frame_count(x.shape[0], factor)
        if pad:
            x = np.concatenate([x, np.repeat(x[-1:], pad, axis=0)], axis=0)
        groups = x.reshape((-1, factor) + x.shape[1:])
        return groups.mean(axis=1) * gain

    def decode(z):
        return np.repeat(np.asarray(z, dtype=np.float64), factor, axis=0) * (1.0 / gain)

    return CodecSpec(encode=encode, decode=decode, temporal_factor=factor, spatial_factor=1)


class DurationBucket(NamedTuple):
    label: str
    video_frames: int
    latent_frames: int


@dataclass(frozen=True)
class _BucketRow:
    label: str
    video_frames: int
    latent_frames: int
    dur_lo: float
    dur_hi: float
    fps_lo: float
    fps_hi: float
    hi_closed: bool = False

    def contains(self, duration: float, fps: float) -> bool:
        in_dur = self.dur_lo <= duration and (duration <= self.dur_hi if self.hi_closed
                                             else duration < self.dur_hi)
        return in_dur and self.fps_lo <= fps <= self.fps_hi


# Checked in order, first match wins.  The two fixed-duration rows are middle
# clips cut from 10.67-12 s sources at 24 FPS and >= 16 s sources at 16 FPS.
# Range rows take their FPS limits from frames / duration at the range ends.
DURATION_BUCKETS: tuple[_BucketRow, ...] = (
    _BucketRow("10.67s", 256, 32, 256 / 24 - 5e-3, 12.0, 24.0, 24.0),
    _BucketRow("16s", 256, 32, 16.0, math.inf, 16.0, 16.0),
    _BucketRow("12s - 16s", 256, 32, 12.0, 16.0, 256 / 16, 256 / 12, hi_closed=True),
    _BucketRow("8s - 12s", 192, 24, 8.0, 12.0, 192 / 12, 192 / 8),
    _BucketRow("4s - 8s", 128, 16, 4.0, 8.0, 128 / 8, 128 / 4),
)


def assign_duration_bucket(duration_s: float, fps: float) -> DurationBucket:
    if duration_s <= 0 or fps <= 0:
        raise ValueError("duration and fps must be positive")
    for row in DURATION_BUCKETS:
        if row.contains(duration_s, fps):
            return DurationBucket(row.label, row.video_frames, row.latent_frames)
    raise ValueError(f"no bucket for {duration_s} s at {fps} FPS")
