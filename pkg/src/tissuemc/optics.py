"""Optical medium parameters and elementary sampling primitives.

The medium is characterised by a scattering coefficient ``mu_s`` and an
absorption coefficient ``mu_a`` (both cm^-1).  Their sum ``mu`` is the
attenuation coefficient and ``rho = mu_s / mu`` is the albedo: the probability
that an interaction scatters rather than absorbs.  Scattering deflections
follow the Henyey-Greenstein phase function with anisotropy ``g`` (the mean
cosine of the deflection angle).

All sampling primitives are pure functions of uniform variates, so any
seedable stream drives them.  They accept scalars or numpy arrays and
broadcast elementwise.

Conventions
-----------
* Directions are unit 3-vectors, renormalised after every frame transport so
  the unit-norm defect stays below 1e-12.
* ``frame_transport`` measures the azimuth in a right-handed frame attached
  to the previous direction; the azimuth convention is immaterial to any
  distribution here because azimuths are always uniform.
* The cone of a fibre source points along -e3; polar angles for cone samples
  are measured from -e3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "OpticalParams",
    "SourceSpec",
    "exp_inverse_cdf",
    "geometric_path_length",
    "hg_density",
    "hg_log_density",
    "hg_inverse_cdf",
    "hg_cdf",
    "sample_cos_deflection",
    "sample_cone_direction",
    "cone_directions",
    "cap_fraction",
    "frame_transport",
    "frame_transport_batch",
    "SOURCE_AXIS",
    "ISOTROPIC_G_EPS",
    "POLE_EPS",
]

# Below this anisotropy the inverse-CDF formula (which divides by 2g) is
# replaced by uniform sampling of the cosine.
ISOTROPIC_G_EPS = 1e-6

# |prev_z| above this threshold uses the axis-aligned transport formula; the
# generic one divides by sqrt(1 - prev_z^2).
POLE_EPS = 1e-9

SOURCE_AXIS = np.array([0.0, 0.0, -1.0])


@dataclass(frozen=True)
class OpticalParams:
    """Optical coefficients of a homogeneous medium.

    Attributes
    ----------
    mu_s : float
        Scattering coefficient (cm^-1), > 0.
    mu_a : float
        Absorption coefficient (cm^-1), > 0.
    g : float
        Henyey-Greenstein anisotropy factor, 0 <= g < 1.
    """

    mu_s: float
    mu_a: float
    g: float

    def __post_init__(self):
        if not (self.mu_s > 0 and math.isfinite(self.mu_s)):
            raise ValueError(f"mu_s must be positive and finite, got {self.mu_s}")
        if not (self.mu_a > 0 and math.isfinite(self.mu_a)):
            raise ValueError(f"mu_a must be positive and finite, got {self.mu_a}")
        if not (0.0 <= self.g < 1.0):
            raise ValueError(f"g must lie in [0, 1), got {self.g}")

    @property
    def mu(self) -> float:
        """Attenuation coefficient mu_s + mu_a (cm^-1)."""
        return self.mu_s + self.mu_a

    @property
    def rho(self) -> float:
        """Albedo mu_s / mu, always in (0, 1)."""
        return self.mu_s / self.mu


@dataclass(frozen=True)
class SourceSpec:
    """Conical fibre source at the origin, emitting about -e3.

    Attributes
    ----------
    alpha : float
        Half-opening angle of the cone (radians), 0 < alpha < pi/2.
    c : float
        Emission constant (fluence units), > 0.
    """

    alpha: float
    c: float = 1.0
    axis: np.ndarray = field(default_factory=lambda: SOURCE_AXIS.copy())

    def __post_init__(self):
        if not (0.0 < self.alpha < math.pi / 2):
            raise ValueError(f"alpha must lie in (0, pi/2), got {self.alpha}")
        if not (self.c > 0):
            raise ValueError(f"c must be positive, got {self.c}")
        if not np.allclose(self.axis, SOURCE_AXIS):
            raise ValueError("the source axis is fixed to -e3")

    @property
    def cos_alpha(self) -> float:
        return math.cos(self.alpha)


def exp_inverse_cdf(u, mu):
    """Exponential(mu) quantile: -ln(1 - u) / mu.

    ``u`` in [0, 1); raises on non-finite input or mu <= 0.
    """
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("u must be finite")
    if np.any(u < 0.0) or np.any(u >= 1.0):
        raise ValueError("u must lie in [0, 1)")
    if not (np.isscalar(mu) and math.isfinite(mu) and mu > 0):
        raise ValueError(f"mu must be a positive finite scalar, got {mu}")
    out = -np.log1p(-u) / mu
    return float(out) if out.ndim == 0 else out


def geometric_path_length(u, rho):
    """Number of scattering events before absorption: floor(ln u / ln rho).

    For u uniform on (0, 1] the result has law P(N = n) = (1 - rho) rho^n.
    """
    if not (0.0 < rho < 1.0):
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u > 1.0):
        raise ValueError("u must lie in (0, 1]")
    out = np.floor(np.log(u) / math.log(rho)).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def hg_density(cos_theta, g):
    """Henyey-Greenstein density of the deflection cosine.

    Density with respect to the uniform probability on the sphere:
    (1 - g^2) / (1 + g^2 - 2 g cos_theta)^{3/2}.  Equals 1 for g = 0.
    """
    c = np.asarray(cos_theta, dtype=float)
    out = (1.0 - g * g) / (1.0 + g * g - 2.0 * g * c) ** 1.5
    return float(out) if out.ndim == 0 else out


def hg_log_density(cos_theta, g):
    """Natural log of :func:`hg_density`."""
    c = np.asarray(cos_theta, dtype=float)
    out = math.log1p(-g * g) - 1.5 * np.log(1.0 + g * g - 2.0 * g * c)
    return float(out) if out.ndim == 0 else out


def hg_cdf(cos_theta, g):
    """CDF of the deflection cosine under Henyey-Greenstein, g != 0.

    F(c) = (1 - g^2) / (2g) * [ (1 + g^2 - 2 g c)^{-1/2} - 1/(1 + g) ].
    """
    c = np.asarray(cos_theta, dtype=float)
    out = (1.0 - g * g) / (2.0 * g) * (
        (1.0 + g * g - 2.0 * g * c) ** -0.5 - 1.0 / (1.0 + g)
    )
    return float(out) if out.ndim == 0 else out


def hg_inverse_cdf(y, g):
    """Inverse CDF of the Henyey-Greenstein deflection cosine.

    F^{-1}(y) = (1 + g^2 - ((1 - g^2) / (1 - g + 2 g y))^2) / (2 g),
    valid for 0 < |g| < 1.  g near 0 must be routed to the isotropic sampler
    (see :func:`sample_cos_deflection`); this function rejects it.
    """
    if abs(g) < ISOTROPIC_G_EPS or not abs(g) < 1.0:
        raise ValueError(f"hg_inverse_cdf requires {ISOTROPIC_G_EPS} <= |g| < 1, got {g}")
    y = np.asarray(y, dtype=float)
    s = (1.0 - g * g) / (1.0 - g + 2.0 * g * y)
    out = np.clip((1.0 + g * g - s * s) / (2.0 * g), -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def sample_cos_deflection(u, g):
    """Deflection cosine from a uniform variate, safe for any 0 <= |g| < 1."""
    if abs(g) < ISOTROPIC_G_EPS:
        u = np.asarray(u, dtype=float)
        out = 2.0 * u - 1.0
        return float(out) if out.ndim == 0 else out
    return hg_inverse_cdf(u, g)


def cap_fraction(alpha: float) -> float:
    """Uniform-sphere measure of the cone cap: (1 - cos alpha) / 2."""
    return 0.5 * (1.0 - math.cos(alpha))


def sample_cone_direction(u1, u2, alpha):
    """Direction uniform on the cone about -e3 with half-angle alpha.

    cos(polar angle from -e3) = 1 - u1 (1 - cos alpha), azimuth = 2 pi u2.
    u1 = 0 gives exactly -e3.
    """
    return cone_directions(np.array([[u1, u2]]), alpha)[0]


def cone_directions(u: np.ndarray, alpha: float) -> np.ndarray:
    """Vectorised cone sampling; ``u`` has shape (n, 2)."""
    u = np.asarray(u, dtype=float)
    mu_ax = 1.0 - u[:, 0] * (1.0 - math.cos(alpha))  # cosine from -e3
    st = np.sqrt(np.maximum(0.0, 1.0 - mu_ax * mu_ax))
    phi = 2.0 * math.pi * u[:, 1]
    out = np.empty((u.shape[0], 3))
    out[:, 0] = st * np.cos(phi)
    out[:, 1] = st * np.sin(phi)
    out[:, 2] = -mu_ax
    return out


def frame_transport(prev, cos_theta: float, phi: float) -> np.ndarray:
    """Deflect ``prev`` by polar angle acos(cos_theta) and azimuth phi.

    Returns a unit vector whose inner product with ``prev`` equals
    ``cos_theta``.  Near-axial ``prev`` (|z| > 1 - 1e-9) uses the specialised
    pole formula.
    """
    ux, uy, uz = float(prev[0]), float(prev[1]), float(prev[2])
    st = math.sqrt(max(0.0, 1.0 - cos_theta * cos_theta))
    cp = math.cos(phi)
    sp = math.sin(phi)
    if abs(uz) > 1.0 - POLE_EPS:
        sgn = 1.0 if uz >= 0.0 else -1.0
        vx = st * cp
        vy = sgn * st * sp
        vz = sgn * cos_theta
    else:
        denom = math.sqrt(1.0 - uz * uz)
        vx = st * (ux * uz * cp - uy * sp) / denom + ux * cos_theta
        vy = st * (uy * uz * cp + ux * sp) / denom + uy * cos_theta
        vz = -st * cp * denom + uz * cos_theta
    norm = math.sqrt(vx * vx + vy * vy + vz * vz)
    return np.array([vx / norm, vy / norm, vz / norm])


def frame_transport_batch(prev: np.ndarray, cos_theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Vectorised :func:`frame_transport` over rows of ``prev``."""
    c = np.asarray(cos_theta, dtype=float)
    st = np.sqrt(np.maximum(0.0, 1.0 - c * c))
    cp = np.cos(phi)
    sp = np.sin(phi)
    ux, uy, uz = prev[:, 0], prev[:, 1], prev[:, 2]

    out = np.empty_like(prev)
    pole = np.abs(uz) > 1.0 - POLE_EPS
    gen = ~pole

    if np.any(gen):
        denom = np.sqrt(1.0 - uz[gen] * uz[gen])
        out[gen, 0] = st[gen] * (ux[gen] * uz[gen] * cp[gen] - uy[gen] * sp[gen]) / denom \
            + ux[gen] * c[gen]
        out[gen, 1] = st[gen] * (uy[gen] * uz[gen] * cp[gen] + ux[gen] * sp[gen]) / denom \
            + uy[gen] * c[gen]
        out[gen, 2] = -st[gen] * cp[gen] * denom + uz[gen] * c[gen]
    if np.any(pole):
        sgn = np.where(uz[pole] >= 0.0, 1.0, -1.0)
        out[pole, 0] = st[pole] * cp[pole]
        out[pole, 1] = sgn * st[pole] * sp[pole]
        out[pole, 2] = sgn * c[pole]

    out /= np.linalg.norm(out, axis=1)[:, None]
    return out
