"""Multi-resolution hash encoding of 3d positions.

Tables are supplied by the caller (predicted by the hypernetwork or loaded
from a checkpoint), never owned here.  Per level, the 8 cell corners are
looked up (directly when the grid is small enough to be collision-free,
via a spatial hash otherwise) and trilinearly interpolated; level outputs
are concatenated coarse to fine.  Everything runs through the autodiff
tape, so gradients reach both the table entries and the query position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

HASH_PRIMES = (1, 2654435761, 805459861)

# the 8 cell corner offsets, in fixed (z-major) order
_CORNERS = [(cx, cy, cz) for cx in (0, 1) for cy in (0, 1) for cz in (0, 1)]


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    table_size: int = 2 ** 11
    features_per_entry: int = 2
    n_min: int = 16
    n_max: int = 256

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.features_per_entry < 1:
            raise ValueError("features_per_entry must be >= 1")
        if self.n_min > self.n_max:
            raise ValueError("n_min must be <= n_max")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return float(np.exp((np.log(self.n_max) - np.log(self.n_min))
                            / (self.levels - 1)))

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_entry

    @property
    def table_entries(self) -> int:
        """Total feature count across all level tables."""
        return self.levels * self.table_size * self.features_per_entry


def level_resolutions(config: HashGridConfig) -> list[int]:
    """Per-level grid resolution N_l = floor(n_min * growth^l)."""
    b = config.growth
    res = [int(np.floor(config.n_min * b ** l + 1e-9)) for l in range(config.levels)]
    return res


def is_dense_level(resolution: int, config: HashGridConfig) -> bool:
    """Dense direct indexing is used when every corner fits in the table."""
    return (resolution + 1) ** 3 <= config.table_size


def hash_index(grid_coord, resolution: int, config: HashGridConfig):
    """Table row for an integer grid coordinate at one level.

    Accepts a single (x,y,z) triple or an [K,3] array; returns matching
    scalar or [K] int64 ids.
    """
    c = np.asarray(grid_coord, dtype=np.int64)
    single = c.ndim == 1
    c = np.atleast_2d(c)
    if c.min() < 0 or c.max() > resolution:
        raise IndexError("grid coordinate out of range")
    if is_dense_level(resolution, config):
        n1 = resolution + 1
        out = c[:, 0] + n1 * (c[:, 1] + n1 * c[:, 2])
    else:
        out = (c[:, 0] * HASH_PRIMES[0]
               ^ c[:, 1] * HASH_PRIMES[1]
               ^ c[:, 2] * HASH_PRIMES[2]) & (config.table_size - 1)
    return int(out[0]) if single else out


def init_tables(config: HashGridConfig, rng: np.random.Generator,
                scale: float = 1e-4) -> list[np.ndarray]:
    """Standard small-uniform initialization of per-level tables."""
    return [rng.uniform(-scale, scale,
                        (config.table_size, config.features_per_entry))
            .astype(np.float32)
            for _ in range(config.levels)]


def encode(x: "ad.Tensor", tables: list["ad.Tensor"],
           config: HashGridConfig) -> "ad.Tensor":
    """Encode positions x[K,3] in the unit cube to features [K, L*F].

    tables is one [T,F] tape tensor per level.  Positions outside [0,1]
    are an error; silent clamping hides ray-bound bugs upstream.
    """
    if x.data.ndim != 2 or x.data.shape[1] != 3:
        raise ad.ShapeError("encode expects positions [K,3]")
    if len(tables) != config.levels:
        raise ad.ShapeError(
            f"expected {config.levels} tables, got {len(tables)}")
    if x.data.size and (x.data.min() < 0.0 or x.data.max() > 1.0):
        raise ValueError("position outside the unit cube")

    tape = x.tape
    outputs = []
    for level, n in enumerate(level_resolutions(config)):
        scaled = ad.mul_const(x, float(n))
        cell = np.floor(scaled.data).astype(np.int64)
        # x == 1 lands on the last vertex; fold into the last cell, frac -> 1
        np.clip(cell, 0, max(n - 1, 0), out=cell)
        frac = ad.sub(scaled, tape.constant(cell.astype(tape.dtype)))
        fcols = [ad.reshape(ad.slice_last(frac, d, d + 1), (x.data.shape[0],))
                 for d in range(3)]
        omf = [ad.add_const(ad.mul_const(f, -1.0), 1.0) for f in fcols]

        level_out = None
        for corner in _CORNERS:
            idx = hash_index(cell + np.asarray(corner, dtype=np.int64),
                             n, config)
            feats = ad.gather_rows(tables[level], idx)
            w = ad.mul(fcols[0] if corner[0] else omf[0],
                       fcols[1] if corner[1] else omf[1])
            w = ad.mul(w, fcols[2] if corner[2] else omf[2])
            term = ad.scale_rows(feats, w)
            level_out = term if level_out is None else ad.add(level_out, term)
        outputs.append(level_out)
    return ad.concat(outputs, axis=-1)


def dense_interpolate(x: np.ndarray, tables: list[np.ndarray],
                      config: HashGridConfig) -> np.ndarray:
    """Plain numpy trilinear interpolation, valid when all levels are dense.

    Independent of the tape path; used as the collision-free oracle.
    """
    x = np.asarray(x, dtype=np.float64)
    outs = []
    for level, n in enumerate(level_resolutions(config)):
        if not is_dense_level(n, config):
            raise ValueError(f"level {level} (N={n}) is not dense")
        grid = np.asarray(tables[level], dtype=np.float64)
        scaled = x * n
        cell = np.clip(np.floor(scaled).astype(np.int64), 0, max(n - 1, 0))
        f = scaled - cell
        acc = np.zeros((x.shape[0], grid.shape[1]))
        for corner in _CORNERS:
            idx = hash_index(cell + np.asarray(corner, dtype=np.int64), n, config)
            w = np.ones(x.shape[0])
            for d in range(3):
                w = w * (f[:, d] if corner[d] else 1.0 - f[:, d])
            acc += grid[idx] * w[:, None]
        outs.append(acc)
    return np.concatenate(outs, axis=-1)
