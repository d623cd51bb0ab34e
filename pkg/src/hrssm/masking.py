"""Spatio-temporal cuboid partitioning and random patch masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CuboidSpec:
    depth: int = 2   # frames per cuboid
    height: int = 4
    width: int = 4

    def grid_shape(self, seq_shape: tuple) -> tuple[int, int, int]:
        """(k, h, w) patch counts for a ``K x H x W [x C]`` sequence."""
        K, H, W = seq_shape[:3]
        for axis, n, p in (("time", K, self.depth), ("height", H, self.height),
                           ("width", W, self.width)):
            if p < 1:
                raise ValueError(f"cuboid {axis} extent must be positive, got {p}")
            if n % p:
                raise ValueError(f"{axis} extent {n} is not divisible by cuboid {axis} {p}")
        return K // self.depth, H // self.height, W // self.width


@dataclass
class CuboidMask:
    grid: np.ndarray   # bool, (k, h, w)
    ratio: float


def partition(obs_seq: np.ndarray, spec: CuboidSpec) -> np.ndarray:
    """View ``K x H x W x C`` as ``k x h x w x P_K x P_H x P_W x C``."""
    k, h, w = spec.grid_shape(obs_seq.shape)
    C = obs_seq.shape[3]
    x = obs_seq.reshape(k, spec.depth, h, spec.height, w, spec.width, C)
    return x.transpose(0, 2, 4, 1, 3, 5, 6)


def reassemble(patches: np.ndarray) -> np.ndarray:
    k, h, w, pk, ph, pw, C = patches.shape
    return patches.transpose(0, 3, 1, 4, 2, 5, 6).reshape(k * pk, h * ph, w * pw, C)


def sample_mask(k: int, h: int, w: int, ratio: float, rng: np.random.Generator) -> CuboidMask:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    n = k * h * w
    n_mask = int(round(ratio * n))
    flat = np.zeros(n, dtype=bool)
    if n_mask:
        flat[rng.choice(n, size=n_mask, replace=False)] = True
    return CuboidMask(flat.reshape(k, h, w), ratio)


def apply_mask(obs_seq: np.ndarray, mask: CuboidMask, spec: CuboidSpec,
               fill: float = 0.0) -> np.ndarray:
    """Copy of ``obs_seq`` with every masked cuboid set to ``fill``."""
    grid = spec.grid_shape(obs_seq.shape)
    if tuple(mask.grid.shape) != grid:
        raise ValueError(f"mask grid {mask.grid.shape} does not match sequence grid {grid}")
    pixel = np.repeat(np.repeat(np.repeat(mask.grid, spec.depth, 0), spec.height, 1),
                      spec.width, 2)
    out = obs_seq.copy()
    out[pixel] = fill
    return out


def mask_batch(obs: np.ndarray, spec: CuboidSpec, ratio: float, rng: np.random.Generator,
               fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Mask each sequence of a ``B x K x H x W x C`` batch independently.

    Returns the masked batch and the stacked mask grids.
    """
    out = np.empty_like(obs)
    grids = []
    for b in range(obs.shape[0]):
        m = sample_mask(*spec.grid_shape(obs.shape[1:]), ratio, rng)
        out[b] = apply_mask(obs[b], m, spec, fill)
        grids.append(m.grid)
    return out, np.stack(grids) if grids else np.zeros((0,), dtype=bool)
