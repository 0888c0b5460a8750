"""Random rays, their walks, rotations, and the ray log-density.

A ray is a finite sequence of segment lengths and unit directions
``(r_0, w_0), ..., (r_n, w_n)``; its prefix sums ``S_p = sum_{k<=p} r_k w_k``
form the photon walk started at the fibre tip (the origin).  The sampling law
is: ``n`` geometric with the albedo as ratio, lengths i.i.d. exponential with
the attenuation coefficient as rate, ``w_0`` uniform on the source cone, and
each later direction a Henyey-Greenstein deflection of its predecessor.

One sampled set of rays serves all voxels at once (the endpoints are binned
into every voxel simultaneously); nothing here ever resamples per voxel.

Batch generation (:func:`sample_segments`) vectorises across walks by
generation: all first deflections are drawn together, then all second ones,
and so on over the walks still alive.  Draw order for a batch is therefore
(1) all segment lengths, flattened over walks sorted by decreasing length,
then (2) per generation, a (active, 2) block of uniforms for (cosine,
azimuth).  The order is fixed by the inputs, so a given stream always
reproduces the same walks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .optics import (
    OpticalParams,
    SourceSpec,
    cone_directions,
    exp_inverse_cdf,
    frame_transport,
    frame_transport_batch,
    geometric_path_length,
    hg_log_density,
    sample_cos_deflection,
)

__all__ = [
    "Ray",
    "SegmentBatch",
    "sample_ray",
    "walk_points",
    "rotation_between",
    "rotate_walk",
    "ray_log_density",
    "sample_segments",
    "write_ray_dump",
    "read_ray_dump",
]


@dataclass
class Ray:
    """Segment lengths (n+1,) and unit directions (n+1, 3) of one ray."""

    lengths: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        if len(self.lengths) != len(self.directions) or len(self.lengths) < 1:
            raise ValueError("lengths and directions must have equal count >= 1")

    @property
    def n(self) -> int:
        """Path length: number of scattering events (segments minus one)."""
        return len(self.lengths) - 1


def sample_ray(rng: np.random.Generator, params: OpticalParams, source: SourceSpec) -> Ray:
    """Draw one ray: n, then w0 on the cone, then lengths, then deflections.

    Draw order: 1 uniform for n; 2 for the cone direction; (n+1) for the
    lengths; then (cosine, azimuth) uniform pairs per deflection.
    """
    n = geometric_path_length(1.0 - rng.random(), params.rho)
    w0 = cone_directions(rng.random((1, 2)), source.alpha)[0]
    lengths = exp_inverse_cdf(rng.random(n + 1), params.mu)
    dirs = np.empty((n + 1, 3))
    dirs[0] = w0
    for i in range(1, n + 1):
        u = rng.random(2)
        cos_t = sample_cos_deflection(u[0], params.g)
        dirs[i] = frame_transport(dirs[i - 1], cos_t, 2.0 * np.pi * u[1])
    return Ray(np.atleast_1d(lengths), dirs)


def walk_points(ray: Ray) -> np.ndarray:
    """Prefix sums S_p of r_k w_k from the origin, shape (n+1, 3)."""
    return np.cumsum(ray.lengths[:, None] * ray.directions, axis=0)


def rotation_between(from_dir: np.ndarray, to_dir: np.ndarray) -> np.ndarray:
    """Matrix of the minimal-angle rotation taking ``from_dir`` to ``to_dir``.

    Rotates about from x to.  For antiparallel inputs (dot < -1 + 1e-12) the
    rotation is by pi about a fixed axis orthogonal to ``from_dir``: the
    normalised cross product with e1, or with e2 when from_dir is along e1.
    """
    f = np.asarray(from_dir, dtype=float)
    t = np.asarray(to_dir, dtype=float)
    c = float(np.dot(f, t))
    if c < -1.0 + 1e-12:
        axis = np.cross(f, np.array([1.0, 0.0, 0.0]))
        if np.dot(axis, axis) < 1e-12:
            axis = np.cross(f, np.array([0.0, 1.0, 0.0]))
        axis /= np.linalg.norm(axis)
        # rotation by pi: R = 2 a a^T - I
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    k = np.cross(f, t)
    kx = np.array([
        [0.0, -k[2], k[1]],
        [k[2], 0.0, -k[0]],
        [-k[1], k[0], 0.0],
    ])
    return np.eye(3) + kx + kx @ kx / (1.0 + c)


def rotate_walk(points: np.ndarray, from_dir: np.ndarray, to_dir: np.ndarray) -> np.ndarray:
    """Apply the from->to rotation to every walk point."""
    return points @ rotation_between(from_dir, to_dir).T


def ray_log_density(ray: Ray, params: OpticalParams, source: SourceSpec) -> float:
    """Log-density of a ray under the cone-started sampling law.

    Returns ``ln[(1-rho) rho^n] + (n+1) ln mu - mu sum(r)
    + sum_j ln f_HG(<w_j, w_{j+1}>)``.  The angular base measure (uniform
    azimuths, cone-uniform w0) is a shared reference dropped here and in the
    chain proposal densities alike, so acceptance ratios built from both stay
    exact.  A w0 outside the cone has density -inf.
    """
    w0 = ray.directions[0]
    if -w0[2] < source.cos_alpha - 1e-12:
        return -np.inf
    n = ray.n
    mu, rho = params.mu, params.rho
    log = np.log1p(-rho) + n * np.log(rho) + (n + 1) * np.log(mu) \
        - mu * float(np.sum(ray.lengths))
    if n > 0:
        cos_t = np.sum(ray.directions[:-1] * ray.directions[1:], axis=1)
        log += float(np.sum(hg_log_density(np.clip(cos_t, -1.0, 1.0), params.g)))
    return float(log)


@dataclass
class SegmentBatch:
    """Flat storage for a batch of walks.

    Walk ``i`` occupies slots ``offsets[i] .. offsets[i] + n_i`` of the flat
    arrays, where ``n_i`` is its max index; ``offsets`` has one extra final
    entry equal to the total slot count.
    """

    offsets: np.ndarray     # (M+1,) int64
    lengths: np.ndarray     # (total,) segment lengths r
    directions: np.ndarray  # (total, 3) unit directions w

    @property
    def n_walks(self) -> int:
        return len(self.offsets) - 1

    def points(self) -> np.ndarray:
        """All walk points S_p, flat, same layout as the segments."""
        seg = self.lengths[:, None] * self.directions
        cum = np.cumsum(seg, axis=0)
        starts = self.offsets[:-1]
        sizes = np.diff(self.offsets)
        base = np.zeros((self.n_walks, 3))
        base[1:] = cum[starts[1:] - 1]
        return cum - np.repeat(base, sizes, axis=0)

    def cumulative_lengths(self) -> np.ndarray:
        """Running sums of r along each walk (flat layout)."""
        cum = np.cumsum(self.lengths)
        starts = self.offsets[:-1]
        sizes = np.diff(self.offsets)
        base = np.zeros(self.n_walks)
        base[1:] = cum[starts[1:] - 1]
        return cum - np.repeat(base, sizes)

    def endpoint(self, i: int, index: int) -> np.ndarray:
        seg = self.lengths[self.offsets[i]:self.offsets[i] + index + 1, None] \
            * self.directions[self.offsets[i]:self.offsets[i] + index + 1]
        return seg.sum(axis=0)


def sample_segments(rng: np.random.Generator, params: OpticalParams,
                    w0s: np.ndarray, max_index: np.ndarray) -> SegmentBatch:
    """Generate walks i = 0..M-1 with segments 0..max_index[i].

    ``w0s`` is either a single direction (3,) shared by every walk or an
    (M, 3) array of per-walk initial directions.
    """
    max_index = np.asarray(max_index, dtype=np.int64)
    m = len(max_index)
    w0s = np.asarray(w0s, dtype=float)
    if w0s.ndim == 1:
        w0s = np.broadcast_to(w0s, (m, 3))

    order = np.argsort(-max_index, kind="stable")
    ls = max_index[order]
    sizes_s = ls + 1
    offs_s = np.concatenate([[0], np.cumsum(sizes_s)])
    total = int(offs_s[-1])

    r = exp_inverse_cdf(rng.random(total), params.mu)
    w = np.empty((total, 3))
    w[offs_s[:-1]] = w0s[order]

    max_len = int(ls[0]) if m else 0
    if max_len > 0:
        # walks sorted by decreasing length: the ones alive at generation g
        # form a prefix of the sorted order
        gens = np.arange(1, max_len + 1)
        active = np.searchsorted(-ls, -gens, side="right")
        prev = np.array(w0s[order], dtype=float)
        for g, a in zip(gens, active):
            a = int(a)
            u = rng.random((a, 2))
            cos_t = sample_cos_deflection(u[:, 0], params.g)
            nxt = frame_transport_batch(prev[:a], cos_t, 2.0 * np.pi * u[:, 1])
            w[offs_s[:a] + g] = nxt
            prev[:a] = nxt

    # restore caller order
    pos = np.empty(m, dtype=np.int64)
    pos[order] = np.arange(m)
    sizes = max_index + 1
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    within = np.arange(total) - np.repeat(offsets[:-1], sizes)
    gather = np.repeat(offs_s[pos], sizes) + within
    return SegmentBatch(offsets=offsets, lengths=r[gather], directions=w[gather])


def write_ray_dump(rays: list[Ray], path) -> None:
    """Binary ray dump: per ray a little-endian u32 n then (n+1) x 4 float64
    records (r, ux, uy, uz)."""
    with open(path, "wb") as fh:
        for ray in rays:
            fh.write(struct.pack("<I", ray.n))
            rec = np.column_stack([ray.lengths, ray.directions]).astype("<f8")
            fh.write(rec.tobytes())


def read_ray_dump(path) -> list[Ray]:
    """Inverse of :func:`write_ray_dump`."""
    rays = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            n = struct.unpack("<I", head)[0]
            rec = np.frombuffer(fh.read((n + 1) * 4 * 8), dtype="<f8").reshape(n + 1, 4)
            rays.append(Ray(rec[:, 0].copy(), rec[:, 1:].copy()))
    return rays
