"""Tube masks over a patch grid, patchification, and per-level active maps.

Randomness comes from a small, fully specified generator (splitmix64 seeding
xoshiro256**) so that a mask is reproducible from ``(grid, ratio, seed)``
alone, independent of numpy's bit generators.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict

import numpy as np

from .numcore import DimensionError

MASK64 = (1 << 64) - 1
LEVEL_FACTORS = (4, 8, 16, 32)


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** seeded through splitmix64."""

    def __init__(self, seed: int):
        sm = seed & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def below(self, bound: int) -> int:
        """Integer in [0, bound) by multiply-shift reduction."""
        return (self.next_u64() * bound) >> 64

    def permutation(self, n: int) -> list:
        """Full Fisher-Yates shuffle of range(n)."""
        idx = list(range(n))
        for i in range(n - 1):
            j = i + self.below(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx


def derive_seed(*parts: int) -> int:
    """Mix integers into one 64-bit seed (used for per-sample, per-epoch masks)."""
    state = 0
    for part in parts:
        state, out = splitmix64(state ^ (int(part) & MASK64))
        state = out
    return state


def round_half_up(x: float) -> int:
    return int(Decimal(repr(float(x))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    grid_h: int
    grid_w: int

    @classmethod
    def for_image(cls, h: int, w: int, patch_size: int = 32) -> "PatchGrid":
        if patch_size % LEVEL_FACTORS[-1]:
            raise DimensionError(f"patch size {patch_size} is not a multiple of {LEVEL_FACTORS[-1]}")
        if h % patch_size or w % patch_size:
            raise DimensionError(f"patch size {patch_size} does not divide H={h}, W={w}")
        return cls(patch_size, h // patch_size, w // patch_size)

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True, eq=False)
class TubeMask:
    """One boolean patch grid (True = hidden) shared by every frame."""

    masked: np.ndarray
    ratio: float
    seed: int
    patch_size: int

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.patch_size, *self.masked.shape)

    def pixel_visible(self, h: int, w: int) -> np.ndarray:
        return active_at(self, h, w, 1)


def make_tube_mask(grid: PatchGrid, ratio: float, seed: int) -> TubeMask:
    """Hide exactly round_half_up(ratio * N) patches chosen by partial Fisher-Yates."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    n = grid.n_patches
    k = round_half_up(ratio * n)
    rng = Xoshiro256(seed)
    idx = list(range(n))
    for i in range(k):
        j = i + rng.below(n - i)
        idx[i], idx[j] = idx[j], idx[i]
    flat = np.zeros(n, dtype=bool)
    flat[idx[:k]] = True
    return TubeMask(flat.reshape(grid.grid_h, grid.grid_w), float(ratio), int(seed), grid.patch_size)


def full_visible_mask(h: int, w: int, patch_size: int = 32) -> TubeMask:
    grid = PatchGrid.for_image(h, w, patch_size)
    return TubeMask(np.zeros((grid.grid_h, grid.grid_w), dtype=bool), 0.0, 0, patch_size)


def _check_grid(mask: TubeMask, h: int, w: int) -> None:
    gh, gw = mask.masked.shape
    if gh * mask.patch_size != h or gw * mask.patch_size != w:
        raise DimensionError(
            f"mask grid {gh}x{gw} with patch {mask.patch_size} does not tile H={h}, W={w}")


def active_at(mask: TubeMask, h: int, w: int, factor: int) -> np.ndarray:
    """Visibility at resolution (h/factor, w/factor); True = active."""
    _check_grid(mask, h, w)
    if mask.patch_size % factor:
        raise DimensionError(f"downsample factor {factor} does not divide patch size {mask.patch_size}")
    rep = mask.patch_size // factor
    return np.repeat(np.repeat(~mask.masked, rep, axis=0), rep, axis=1)


def active_maps(mask: TubeMask, h: int, w: int) -> Dict[int, np.ndarray]:
    """Active maps keyed by downsample factor 4, 8, 16, 32."""
    return {f: active_at(mask, h, w, f) for f in LEVEL_FACTORS}


def apply_mask(seq: np.ndarray, mask: TubeMask) -> np.ndarray:
    """Zero every pixel of hidden patches in all frames of a [T,H,W] sequence."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 3:
        raise DimensionError(f"apply_mask expects [T,H,W], got {seq.shape}")
    vis = active_at(mask, seq.shape[1], seq.shape[2], 1)
    return np.where(vis[None], seq, 0.0)


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """[T,H,W] -> [grid_h*grid_w, T*p*p]; patches row-major, values ordered (t, y, x)."""
    t, h, w = x.shape
    if h % p or w % p:
        raise DimensionError(f"patch size {p} does not divide H={h}, W={w}")
    gh, gw = h // p, w // p
    return x.reshape(t, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, t * p * p)


def unpatchify(patches: np.ndarray, p: int, t: int, h: int, w: int) -> np.ndarray:
    gh, gw = h // p, w // p
    if patches.shape != (gh * gw, t * p * p):
        raise DimensionError(f"patch array {patches.shape} incompatible with [T,H,W]=({t},{h},{w}), p={p}")
    return patches.reshape(gh, gw, t, p, p).transpose(2, 0, 3, 1, 4).reshape(t, h, w)
