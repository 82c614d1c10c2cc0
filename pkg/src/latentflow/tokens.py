"""Patchification and factorised positional embeddings for a latent video backbone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, as_tensor


@dataclass(frozen=True)
class PatchSpec:
    k_t: int = 1
    k_h: int = 2
    k_w: int = 2

    def __post_init__(self):
        if min(self.k_t, self.k_h, self.k_w) < 1:
            raise ValueError("patch sizes must be >= 1")

    @property
    def volume(self) -> int:
        return self.k_t * self.k_h * self.k_w

    def check(self, t: int, h: int, w: int) -> None:
        for name, extent, k in (("T", t, self.k_t), ("H", h, self.k_h), ("W", w, self.k_w)):
            if extent < 1 or extent % k:
                raise ValueError(f"{name}={extent} is not a positive multiple of patch size {k}")

    @classmethod
    def parse(cls, text: str) -> PatchSpec:
        parts = text.split(",")
        if len(parts) != 3:
            raise ValueError(f"patch spec must be kt,kh,kw, got {text!r}")
        return cls(*(int(p) for p in parts))


def token_count(t: int, h: int, w: int, spec: PatchSpec = PatchSpec()) -> int:
    """Number of transformer tokens for a ``T x H x W`` latent: ``T H W / (k_t k_h k_w)``."""
    spec.check(t, h, w)
    return (t // spec.k_t) * (h // spec.k_h) * (w // spec.k_w)


def patchify(x, spec: PatchSpec = PatchSpec()) -> np.ndarray:
    """``(T, C, H, W)`` latent to ``(tokens, C * k_t * k_h * k_w)``.

    Tokens are ordered time-major, then height, then width.  Each token
    vector is laid out as ``(C, k_t, k_h, k_w)`` flattened.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"expected (T, C, H, W), got shape {x.shape}")
    t, c, h, w = x.shape
    spec.check(t, h, w)
    kt, kh, kw = spec.k_t, spec.k_h, spec.k_w
    blocks = x.reshape(t // kt, kt, c, h // kh, kh, w // kw, kw)
    blocks = blocks.transpose(0, 3, 5, 2, 1, 4, 6)
    return blocks.reshape(-1, c * spec.volume)


def unpatchify(tokens, shape: tuple[int, int, int, int], spec: PatchSpec = PatchSpec()) -> np.ndarray:
    """Inverse of :func:`patchify` for a latent of the given ``(T, C, H, W)`` shape."""
    tokens = as_tensor(tokens)
    t, c, h, w = shape
    spec.check(t, h, w)
    kt, kh, kw = spec.k_t, spec.k_h, spec.k_w
    expected = (token_count(t, h, w, spec), c * spec.volume)
    if tokens.shape != expected:
        raise ValueError(f"tokens have shape {tokens.shape}, expected {expected}")
    blocks = tokens.reshape(t // kt, h // kh, w // kw, c, kt, kh, kw)
    return blocks.transpose(0, 4, 3, 1, 5, 2, 6).reshape(t, c, h, w)


@dataclass(frozen=True)
class PosEmbedSpec:
    phi_t: np.ndarray
    phi_h: np.ndarray
    phi_w: np.ndarray

    def __post_init__(self):
        dims = {a.shape[1] for a in (self.phi_t, self.phi_h, self.phi_w) if a.ndim == 2}
        if len(dims) != 1 or any(a.ndim != 2 for a in (self.phi_t, self.phi_h, self.phi_w)):
            raise ValueError("factor tables must be 2-D and share one embedding dimension")

    @property
    def dim(self) -> int:
        return self.phi_t.shape[1]

    @property
    def maxima(self) -> tuple[int, int, int]:
        return self.phi_t.shape[0], self.phi_h.shape[0], self.phi_w.shape[0]

    @classmethod
    def random(cls, t_max: int, h_max: int, w_max: int, dim: int, rng: Rng,
               scale: float = 0.02) -> PosEmbedSpec:
        return cls(rng.normal((t_max, dim)) * scale,
                   rng.normal((h_max, dim)) * scale,
                   rng.normal((w_max, dim)) * scale)


def pos_embed(t_idx: int, h_idx: int, w_idx: int, spec: PosEmbedSpec) -> np.ndarray:
    """Sum of the three factor embeddings at the given token position."""
    for name, i, n in zip("thw", (t_idx, h_idx, w_idx), spec.maxima):
        if not 0 <= i < n:
            raise IndexError(f"{name} index {i} outside [0, {n})")
    return spec.phi_t[t_idx] + spec.phi_h[h_idx] + spec.phi_w[w_idx]


def pos_embed_grid(t: int, h: int, w: int, spec: PosEmbedSpec) -> np.ndarray:
    """Embeddings for every token of a ``t x h x w`` token grid, in :func:`patchify` order."""
    t_max, h_max, w_max = spec.maxima
    if t > t_max or h > h_max or w > w_max:
        raise IndexError(f"grid {t}x{h}x{w} exceeds maxima {spec.maxima}")
    grid = (spec.phi_t[:t, None, None, :] + spec.phi_h[None, :h, None, :]
            + spec.phi_w[None, None, :w, :])
    return grid.reshape(-1, spec.dim)
