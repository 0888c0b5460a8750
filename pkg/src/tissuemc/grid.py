"""Origin-centered cubic voxelisation and per-voxel fluence statistics.

The grid covers the cube of side ``(2m + 1) h`` with voxel centers at
``(i h, j h, k h)`` for integer indices in ``[-m, m]``; the central voxel is
exactly centred at the origin.  Endpoint counts accumulated into a
:class:`FluenceField` turn into fluence estimates through the scale factor
``c (1 - cos alpha) / (2 mu_a)``.

Voxel membership resolves half-integer boundary ties toward the lower index
(round-half-down).  This can shift single-voxel comparisons by one cell for
points sitting exactly on a face; it never matters for sampled endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["VoxelGrid", "FluenceField", "OUTSIDE", "write_field_csv", "read_field_csv"]

# Flat-index marker for points outside the grid.
OUTSIDE = -1

FIELD_CSV_HEADER = "ix,iy,iz,x,y,z,fluence,stderr,count"


@dataclass(frozen=True)
class VoxelGrid:
    """Cubic voxel grid: edge length ``h`` (cm), integer radius ``m``."""

    h: float
    m: int

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"voxel edge must be positive, got {self.h}")
        if self.m < 1:
            raise ValueError(f"grid radius must be >= 1, got {self.m}")

    @property
    def per_axis(self) -> int:
        return 2 * self.m + 1

    @property
    def size(self) -> int:
        """Total voxel count (2m + 1)^3."""
        return self.per_axis ** 3

    def locate(self, point) -> tuple[int, int, int] | None:
        """Voxel index of a single point, or None if outside the grid."""
        idx = self.locate_flat(np.asarray(point, dtype=float)[None, :])[0]
        return None if idx == OUTSIDE else self.unflatten(int(idx))

    def locate_flat(self, points: np.ndarray) -> np.ndarray:
        """Flat voxel indices for an (n, 3) array; OUTSIDE where off-grid."""
        # ceil(x/h - 1/2) rounds to the nearest index with ties toward -inf
        cont = np.ceil(points / self.h - 0.5)
        inside = np.all(np.abs(cont) <= self.m, axis=1)
        ijk = np.where(inside[:, None], cont, 0.0).astype(np.int64)
        shifted = ijk + self.m
        n = self.per_axis
        flat = (shifted[:, 0] * n + shifted[:, 1]) * n + shifted[:, 2]
        return np.where(inside, flat, OUTSIDE)

    def flatten(self, i: int, j: int, k: int) -> int:
        n = self.per_axis
        return ((i + self.m) * n + (j + self.m)) * n + (k + self.m)

    def unflatten(self, flat: int) -> tuple[int, int, int]:
        n = self.per_axis
        i, rem = divmod(flat, n * n)
        j, k = divmod(rem, n)
        return (i - self.m, j - self.m, k - self.m)

    def center(self, i: int, j: int, k: int) -> np.ndarray:
        return np.array([i, j, k], dtype=float) * self.h

    def centers(self) -> np.ndarray:
        """Centers of all voxels, shape (size, 3), in flat-index order."""
        ax = np.arange(-self.m, self.m + 1, dtype=float) * self.h
        gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])


class FluenceField:
    """Per-voxel endpoint statistics with a global fluence scale.

    ``counts`` holds accumulated hit weights, ``sumsq`` their squares (used
    by replicate statistics), ``total_samples`` counts every endpoint offered
    for binning, inside the grid or not.  :meth:`finalize` converts counts to
    fluence estimates and binomial standard errors.
    """

    def __init__(self, grid: VoxelGrid, scale: float):
        self.grid = grid
        self.scale = float(scale)
        self.counts = np.zeros(grid.size)
        self.sumsq = np.zeros(grid.size)
        self.total_samples = 0
        self.estimate = None
        self.stderr = None

    def accumulate(self, endpoint, weight: float = 1.0) -> None:
        """Bin one endpoint; off-grid endpoints count only toward the total."""
        if weight < 0:
            raise ValueError("weight must be nonnegative")
        self.accumulate_points(np.asarray(endpoint, dtype=float)[None, :],
                               np.array([weight]))

    def accumulate_points(self, points: np.ndarray, weights: np.ndarray | None = None) -> None:
        """Bin an (n, 3) batch of endpoints."""
        flat = self.grid.locate_flat(points)
        inside = flat != OUTSIDE
        if weights is None:
            hit = np.bincount(flat[inside], minlength=self.grid.size)
            self.counts += hit
            self.sumsq += hit
        else:
            w = np.asarray(weights, dtype=float)
            self.counts += np.bincount(flat[inside], weights=w[inside],
                                       minlength=self.grid.size)
            self.sumsq += np.bincount(flat[inside], weights=w[inside] ** 2,
                                      minlength=self.grid.size)
        self.total_samples += len(points)

    def merge(self, other: "FluenceField") -> None:
        """Fold another field's accumulators into this one (same grid/scale)."""
        if other.grid != self.grid or other.scale != self.scale:
            raise ValueError("cannot merge fields with different grid or scale")
        self.counts += other.counts
        self.sumsq += other.sumsq
        self.total_samples += other.total_samples

    def finalize(self) -> "FluenceField":
        """Compute estimate and binomial stderr; idempotent for fixed accumulators."""
        if self.total_samples <= 0:
            raise ValueError("cannot finalize an empty field (no samples)")
        p = self.counts / self.total_samples
        self.estimate = self.scale * p
        self.stderr = self.scale * np.sqrt(np.clip(p * (1.0 - p), 0.0, None)
                                           / self.total_samples)
        return self

    def estimate_at(self, i: int, j: int, k: int) -> float:
        return float(self.estimate[self.grid.flatten(i, j, k)])

    def stderr_at(self, i: int, j: int, k: int) -> float:
        return float(self.stderr[self.grid.flatten(i, j, k)])


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_field_csv(field: FluenceField, path) -> None:
    """Write one row per voxel, lexicographic in (ix, iy, iz), 9 significant digits."""
    if field.estimate is None:
        field.finalize()
    g = field.grid
    ax = np.arange(-g.m, g.m + 1)
    with open(path, "w") as fh:
        fh.write(FIELD_CSV_HEADER + "\n")
        flat = 0
        for i in ax:
            x = _fmt(i * g.h)
            for j in ax:
                y = _fmt(j * g.h)
                for k in ax:
                    fh.write(f"{i},{j},{k},{x},{y},{_fmt(k * g.h)},"
                             f"{_fmt(field.estimate[flat])},{_fmt(field.stderr[flat])},"
                             f"{_fmt(field.counts[flat])}\n")
                    flat += 1


def read_field_csv(path) -> dict:
    """Read a field CSV back into arrays keyed by column name."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    if data.size == 0:
        raise ValueError(f"empty field file: {path}")
    return {name: np.atleast_1d(data[name]) for name in data.dtype.names}
