"""Metropolis-Hastings sampler on ray space.

The chain lives on rays written in spherical coordinates
``(r_0, theta_0, phi_0, ..., r_n, theta_n, phi_n)`` with the initial
direction frozen: ``(theta_0, phi_0)`` never mutate.  Its stationary law is
the ray sampling law conditioned on that initial direction, so the ergodic
average of endpoint indicators estimates the per-voxel hit probability, and
rotation replicas onto fresh cone directions average out the frozen start.

Two mutation families drive the chain, chosen with probability 1/2 each:

* deletion-addition: remove or append ``j`` or ``J`` tail edges (the two
  sizes are coprime so every length is reachable), appended edges drawn from
  exponential lengths and a phase function with anisotropy ``epsilon * g``;
* rotation-translation: redraw the spherical angles of one uniformly chosen
  edge, or redraw ``r_0`` when the chosen index is 0.

All densities are kept in log space; shared angular base-measure constants
are dropped identically from the target and the proposals, so acceptance
ratios are exact (see :func:`tissuemc.rays.ray_log_density`).  Acceptance is
computed from the per-move cancellation of target and proposal terms, which
makes translation moves and rotation moves at ``epsilon = 1`` accept with
probability exactly one, bit for bit.

Proposal draw order: one uniform for the family; family (i) one integer for
the size choice, then for additions the new lengths, then the new deflection
cosines, then the new azimuths; family (ii) one integer for the index, then
either (cosine, azimuth) uniforms or one length uniform.  ``run_chain`` draws
one extra uniform per step for the accept decision, always.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .grid import OUTSIDE, FluenceField
from .optics import (
    OpticalParams,
    cone_directions,
    exp_inverse_cdf,
    geometric_path_length,
    hg_log_density,
    frame_transport,
    sample_cos_deflection,
)
from .rays import rotation_between
from .estimators import Scenario, fluence_scale

__all__ = [
    "MhParams",
    "ChainState",
    "Proposal",
    "zeta",
    "propose_mutation",
    "acceptance_log_ratio",
    "chain_log_target",
    "run_chain",
    "MhDiagnostics",
    "length_law_diagnostic",
    "LengthLawResult",
    "write_trace_csv",
]

# Full log-density refresh cadence; bounds float drift of the running value.
_REFRESH_EVERY = 65536


@dataclass(frozen=True)
class MhParams:
    """Chain tuning: small/big length-change sizes, proposal anisotropy
    factor, chain length and rotation count."""

    j: int = 10
    J: int = 21
    epsilon: float = 0.9
    T: int = 250_000
    m_rot: int = 30

    def __post_init__(self):
        if not (1 <= self.j < self.J):
            raise ValueError(f"need 1 <= j < J, got j={self.j}, J={self.J}")
        if math.gcd(self.j, self.J) != 1:
            raise ValueError(f"j and J must be coprime, got {self.j}, {self.J}")
        if not (-1.0 <= self.epsilon <= 1.0):
            raise ValueError(f"epsilon must lie in [-1, 1], got {self.epsilon}")
        if self.T < 1 or self.m_rot < 1:
            raise ValueError("T and m_rot must be >= 1")


def zeta(m: int, j: int, big_j: int) -> float:
    """Probability of one particular size choice at current length m:
    1/4 if m >= J, 1/3 if j <= m < J, 1/2 if m < j."""
    if m >= big_j:
        return 0.25
    if m >= j:
        return 1.0 / 3.0
    return 0.5


def _delta_support(n: int, j: int, big_j: int) -> tuple[int, ...]:
    if n >= big_j:
        return (-big_j, -j, j, big_j)
    if n >= j:
        return (-j, j, big_j)
    return (j, big_j)


class ChainState:
    """Spherical-coordinate ray with cached cartesian directions, walk
    points and log-density.

    Arrays are kept at capacity >= n + 1 and grown on demand; slot 0 holds
    the frozen start (``ct[0]``/``ph[0]`` record the global spherical angles
    of w0 and are never used by the density).
    """

    __slots__ = ("params", "w0", "r", "ct", "ph", "w", "cum", "n")

    def __init__(self, params: OpticalParams, w0: np.ndarray,
                 r: np.ndarray, ct: np.ndarray, ph: np.ndarray):
        n = len(r) - 1
        cap = max(2 * (n + 1), 64)
        self.params = params
        self.w0 = np.asarray(w0, dtype=float)
        self.n = n
        self.r = np.zeros(cap)
        self.ct = np.zeros(cap)
        self.ph = np.zeros(cap)
        self.r[:n + 1] = r
        # slot 0 records the frozen start: global polar cosine and azimuth
        # of w0; the density and the mutations never touch it
        self.ct[0] = float(self.w0[2])
        self.ph[0] = math.atan2(float(self.w0[1]), float(self.w0[0]))
        self.ct[1:n + 1] = ct
        self.ph[1:n + 1] = ph
        self.w = np.zeros((cap, 3))
        self.cum = np.zeros((cap, 3))
        self._rebuild(0)

    def _grow(self, needed: int) -> None:
        old = len(self.r)
        if needed <= old:
            return
        cap = max(needed, 2 * old)
        for name in ("r", "ct", "ph"):
            arr = np.zeros(cap)
            arr[:old] = getattr(self, name)
            setattr(self, name, arr)
        for name in ("w", "cum"):
            arr = np.zeros((cap, 3))
            arr[:old] = getattr(self, name)
            setattr(self, name, arr)

    def _rebuild(self, start: int) -> None:
        """Recompute cartesian directions and walk points from edge ``start`` on."""
        if start == 0:
            self.w[0] = self.w0
            self.cum[0] = self.r[0] * self.w0
            start = 1
        w_prev = self.w[start - 1]
        cum_prev = self.cum[start - 1]
        for k in range(start, self.n + 1):
            w_prev = frame_transport(w_prev, self.ct[k], self.ph[k])
            self.w[k] = w_prev
            cum_prev = cum_prev + self.r[k] * w_prev
            self.cum[k] = cum_prev

    def endpoint(self) -> np.ndarray:
        return self.cum[self.n]

    def copy(self) -> "ChainState":
        dup = object.__new__(ChainState)
        dup.params = self.params
        dup.w0 = self.w0
        dup.n = self.n
        for name in ("r", "ct", "ph", "w", "cum"):
            setattr(dup, name, getattr(self, name).copy())
        return dup

    @classmethod
    def sample_initial(cls, rng: np.random.Generator, params: OpticalParams,
                       w0: np.ndarray) -> "ChainState":
        """Exact draw from the target given the frozen start direction."""
        n = geometric_path_length(1.0 - rng.random(), params.rho)
        r = np.atleast_1d(exp_inverse_cdf(rng.random(n + 1), params.mu))
        if n:
            u = rng.random((n, 2))
            cts = np.atleast_1d(sample_cos_deflection(u[:, 0], params.g))
            phs = 2.0 * math.pi * u[:, 1]
        else:
            cts, phs = np.empty(0), np.empty(0)
        return cls(params, w0, r, cts, phs)


def chain_log_target(state: ChainState) -> float:
    """Ray log-density of the chain state (same reference as
    :func:`tissuemc.rays.ray_log_density`, with the frozen-start factor
    dropped)."""
    p = state.params
    n = state.n
    log = math.log1p(-p.rho) + n * math.log(p.rho) + (n + 1) * math.log(p.mu) \
        - p.mu * float(np.sum(state.r[:n + 1]))
    if n > 0:
        log += float(np.sum(hg_log_density(state.ct[1:n + 1], p.g)))
    return log


@dataclass
class Proposal:
    """One proposed mutation with its exact proposal log-densities.

    ``log_alpha_raw`` is the log acceptance ratio before the min with 0,
    assembled from the per-move cancellation of target and proposal terms.
    """

    kind: str
    log_q_forward: float
    log_q_backward: float
    d_log_target: float
    log_alpha_raw: float
    index: int = -1
    delta: int = 0
    r_new: np.ndarray = field(default_factory=lambda: np.empty(0))
    ct_new: np.ndarray = field(default_factory=lambda: np.empty(0))
    ph_new: np.ndarray = field(default_factory=lambda: np.empty(0))

    def apply(self, state: ChainState) -> None:
        """Mutate ``state`` in place; updates the cartesian caches."""
        if self.kind == "translation":
            delta_r = self.r_new[0] - state.r[0]
            state.r[0] = self.r_new[0]
            state.cum[:state.n + 1] += delta_r * state.w0
        elif self.kind == "rotation":
            state.ct[self.index] = self.ct_new[0]
            state.ph[self.index] = self.ph_new[0]
            state._rebuild(self.index)
        elif self.kind == "deletion":
            state.n += self.delta
        else:  # addition
            n0 = state.n
            state._grow(n0 + self.delta + 1)
            sl = slice(n0 + 1, n0 + self.delta + 1)
            state.r[sl] = self.r_new
            state.ct[sl] = self.ct_new
            state.ph[sl] = self.ph_new
            state.n = n0 + self.delta
            state._rebuild(n0 + 1)

    def candidate(self, state: ChainState) -> ChainState:
        """Materialise the proposed state without touching the current one."""
        cand = state.copy()
        self.apply(cand)
        return cand


def propose_mutation(state: ChainState, rng: np.random.Generator,
                     mh: MhParams, params: OpticalParams) -> Proposal:
    """Draw one mutation and its forward/backward proposal log-densities."""
    n = state.n
    mu = params.mu
    g = params.g
    eg = mh.epsilon * g
    log_mu = math.log(mu)

    if rng.random() < 0.5:
        # deletion-addition
        support = _delta_support(n, mh.j, mh.J)
        delta = support[rng.integers(len(support))]
        log_zeta_fwd = math.log(zeta(n, mh.j, mh.J))
        log_zeta_bwd = math.log(zeta(n + delta, mh.j, mh.J))
        if delta > 0:
            r_new = np.atleast_1d(exp_inverse_cdf(rng.random(delta), mu))
            ct_new = np.atleast_1d(sample_cos_deflection(rng.random(delta), eg))
            ph_new = 2.0 * math.pi * rng.random(delta)
            sum_r = float(np.sum(r_new))
            sum_f_target = float(np.sum(hg_log_density(ct_new, g)))
            sum_f_prop = float(np.sum(hg_log_density(ct_new, eg)))
            log_q_f = -math.log(2.0) + log_zeta_fwd \
                + delta * log_mu - mu * sum_r + sum_f_prop
            log_q_b = -math.log(2.0) + log_zeta_bwd
            d_target = delta * math.log(params.rho) + delta * log_mu \
                - mu * sum_r + sum_f_target
            q_diff = log_zeta_bwd - log_zeta_fwd \
                - (delta * log_mu - mu * sum_r + sum_f_prop)
            return Proposal("addition", log_q_f, log_q_b, d_target,
                            d_target + q_diff, delta=delta,
                            r_new=r_new, ct_new=ct_new, ph_new=ph_new)
        # deletion of |delta| tail edges
        sl = slice(n + delta + 1, n + 1)
        sum_r = float(np.sum(state.r[sl]))
        sum_f_target = float(np.sum(hg_log_density(state.ct[sl], g)))
        sum_f_prop = float(np.sum(hg_log_density(state.ct[sl], eg)))
        log_q_f = -math.log(2.0) + log_zeta_fwd
        log_q_b = -math.log(2.0) + log_zeta_bwd \
            + (-delta) * log_mu - mu * sum_r + sum_f_prop
        d_target = delta * math.log(params.rho) + delta * log_mu \
            + mu * sum_r - sum_f_target
        q_diff = log_zeta_bwd - log_zeta_fwd \
            + (-delta) * log_mu - mu * sum_r + sum_f_prop
        return Proposal("deletion", log_q_f, log_q_b, d_target,
                        d_target + q_diff, delta=delta)

    # rotation-translation
    i = int(rng.integers(n + 1))
    base = -math.log(2.0) - math.log(n + 1)
    if i == 0:
        r0_new = float(exp_inverse_cdf(rng.random(), mu))
        a = mu * r0_new
        b = mu * state.r[0]
        log_q_f = base + log_mu - a
        log_q_b = base + log_mu - b
        d_target = b - a
        return Proposal("translation", log_q_f, log_q_b, d_target,
                        d_target + (a - b), index=0,
                        r_new=np.array([r0_new]))
    ct_new = float(sample_cos_deflection(rng.random(), eg))
    ph_new = 2.0 * math.pi * rng.random()
    lf_new_t = hg_log_density(ct_new, g)
    lf_old_t = hg_log_density(float(state.ct[i]), g)
    lf_new_p = hg_log_density(ct_new, eg)
    lf_old_p = hg_log_density(float(state.ct[i]), eg)
    log_q_f = base + lf_new_p
    log_q_b = base + lf_old_p
    d_target = lf_new_t - lf_old_t
    return Proposal("rotation", log_q_f, log_q_b, d_target,
                    d_target + (lf_old_p - lf_new_p), index=i,
                    ct_new=np.array([ct_new]), ph_new=np.array([ph_new]))


def acceptance_log_ratio(cur: ChainState, cand: ChainState,
                         log_q_f: float, log_q_b: float) -> float:
    """log min(1, target(cand) q_b / (target(cur) q_f)) from full densities.

    Rejects (-inf) when the candidate density is not finite.
    """
    if not math.isfinite(log_q_f):
        raise ValueError("candidate must be reachable (finite forward density)")
    lt_cand = chain_log_target(cand)
    if not math.isfinite(lt_cand):
        return -math.inf
    raw = (lt_cand + log_q_b) - (chain_log_target(cur) + log_q_f)
    return min(0.0, raw)


@dataclass
class MhDiagnostics:
    """Per-step traces and acceptance summaries of one chain."""

    n_trace: np.ndarray
    accepted: np.ndarray
    log_density: np.ndarray
    endpoints: np.ndarray
    burn_in: int
    rotations: np.ndarray = field(default_factory=lambda: np.eye(3)[None])

    @property
    def acceptance_rate(self) -> float:
        if len(self.accepted) <= 1:
            return 0.0
        return float(np.mean(self.accepted[1:]))

    @property
    def acceptance_rate_post_burnin(self) -> float:
        start = max(1, self.burn_in)
        if len(self.accepted) <= start:
            return 0.0
        return float(np.mean(self.accepted[start:]))


def run_chain(scenario: Scenario, mh: MhParams, rng: np.random.Generator,
              burn_in_frac: float = 0.05) -> tuple[FluenceField, MhDiagnostics]:
    """Run the chain and accumulate its rotated endpoints into a field.

    Draw order: the frozen start direction (2 uniforms), the m_rot rotation
    targets (2 each), the initial exact ray, then per step the proposal draws
    followed by one accept uniform.  Every step past burn-in contributes its
    endpoint once per rotation, rejected steps repeating the current one.
    """
    params, source, gridspec = scenario.params, scenario.source, scenario.grid
    w0 = cone_directions(rng.random((1, 2)), source.alpha)[0]
    rot_dirs = cone_directions(rng.random((mh.m_rot, 2)), source.alpha)
    rotations = np.stack([rotation_between(w0, d) for d in rot_dirs])

    state = ChainState.sample_initial(rng, params, w0)
    log_dens = chain_log_target(state)

    t_total = mh.T
    endpoints = np.empty((t_total, 3))
    n_trace = np.empty(t_total, dtype=np.int64)
    accepted = np.zeros(t_total, dtype=bool)
    log_density = np.empty(t_total)

    endpoints[0] = state.endpoint()
    n_trace[0] = state.n
    log_density[0] = log_dens

    for t in range(1, t_total):
        prop = propose_mutation(state, rng, mh, params)
        raw = prop.log_alpha_raw
        log_alpha = min(0.0, raw) if math.isfinite(raw) else -math.inf
        if rng.random() < math.exp(log_alpha):
            prop.apply(state)
            log_dens += prop.d_log_target
            accepted[t] = True
        if t % _REFRESH_EVERY == 0:
            log_dens = chain_log_target(state)
        endpoints[t] = state.endpoint()
        n_trace[t] = state.n
        log_density[t] = log_dens

    burn = int(math.floor(burn_in_frac * t_total))
    used = endpoints[burn:]
    field = FluenceField(gridspec, fluence_scale(scenario))
    for rot in rotations:
        flat = gridspec.locate_flat(used @ rot.T)
        hit = flat != OUTSIDE
        counts = np.bincount(flat[hit], minlength=gridspec.size)
        field.counts += counts
        field.sumsq += counts
    field.total_samples = len(used) * mh.m_rot
    field.finalize()
    return field, MhDiagnostics(n_trace, accepted, log_density, endpoints, burn,
                                rotations)


@dataclass
class LengthLawResult:
    """Chi-squared comparison of a length trace with the geometric law."""

    statistic: float
    dof: int
    p_value: float
    stride: int
    n_used: int
    degenerate: bool

    @property
    def ok(self) -> bool:
        return not self.degenerate


def _integrated_autocorr_time(x: np.ndarray, max_lag: int) -> float:
    x = x - x.mean()
    var = float(np.dot(x, x)) / len(x)
    if var == 0.0:
        return math.inf
    tau = 1.0
    for k in range(1, max_lag + 1):
        rk = float(np.dot(x[:-k], x[k:])) / ((len(x) - k) * var)
        if rk < 0.05:
            break
        tau += 2.0 * rk
    return tau


def length_law_diagnostic(n_trace: np.ndarray, rho: float,
                          stride: int | None = None) -> LengthLawResult:
    """Chi-squared test of the chain's length trace against the geometric law.

    Successive chain lengths are correlated, so the trace is thinned before
    testing: by default the stride is twice the estimated integrated
    autocorrelation time (an i.i.d. trace gets stride 1), but never so large
    that fewer than ~100 thinned samples remain; a trace still drifting from
    its start would otherwise inflate the autocorrelation estimate and thin
    away its own evidence.  Bins are merged from the tail so every expected
    count is at least 5.  A constant trace sets the ``degenerate`` flag
    instead of a p-value.
    """
    trace = np.asarray(n_trace, dtype=np.int64)
    if len(trace) < 10_000:
        raise ValueError("need at least 10^4 trace entries after burn-in")
    if trace.min() == trace.max():
        return LengthLawResult(math.inf, 0, 0.0, 1, len(trace), True)

    if stride is None:
        tau = _integrated_autocorr_time(trace.astype(float),
                                        max_lag=min(2000, len(trace) // 10))
        stride = max(1, min(int(math.ceil(2.0 * tau)), len(trace) // 100))
    thin = trace[::stride]
    m = len(thin)

    # bins 0..K-1 plus a merged tail, all with expected count >= 5
    k_max = 0
    while m * (1.0 - rho) * rho ** k_max >= 5.0 and m * rho ** (k_max + 1) >= 5.0:
        k_max += 1
    k_max = max(1, k_max)
    observed = np.bincount(np.minimum(thin, k_max), minlength=k_max + 1).astype(float)
    expected = np.array([m * (1.0 - rho) * rho ** k for k in range(k_max)]
                        + [m * rho ** k_max])
    statistic = float(np.sum((observed - expected) ** 2 / expected))
    dof = k_max  # bins minus one
    p_value = float(stats.chi2.sf(statistic, dof))
    return LengthLawResult(statistic, dof, p_value, stride, m, False)


def write_trace_csv(diag: MhDiagnostics, path, stride: int = 1) -> None:
    """Diagnostic trace export: ``t,n,accepted,log_density``, optionally strided."""
    with open(path, "w") as fh:
        fh.write("t,n,accepted,log_density\n")
        for t in range(0, len(diag.n_trace), stride):
            fh.write(f"{t + 1},{diag.n_trace[t]},{int(diag.accepted[t])},"
                     f"{diag.log_density[t]:.9g}\n")
