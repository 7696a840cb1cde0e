"""Lattice model primitives for an attractively bound boson pair.

Two bosons on a 1D tight-binding chain (hopping J, on-site attraction
U < 0, |U| > 2J) form a bound pair whose dispersion

    E(K) = -2J cos(K/2) sqrt(1 + (U / (2J cos(K/2)))**2)
         = -sqrt(4 J**2 cos(K/2)**2 + U**2)

lies strictly below the two-free-particle continuum bottom -2J.  The
pair's relative coordinate decays like exp(-lambda*|m-n|) with
2J sinh(lambda) cos(K/2) = -U.  A localized on-site potential v(m) may
in addition support single-particle bound states psi_b with energies
E_b < -J; each of those opens a "dissociation" channel in which one
particle stays trapped while the other runs off with wave number k_b
from E = E_b - J cos(k_b).

This module holds the model parameters, the dispersion relations and
their inverses (including the analytic continuation to complex energy
used by the resonance solver), bound-state computation, and the
asymptotic channel wavefunctions.
"""

from __future__ import annotations

import math
import cmath
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import (
    DegenerateMomentum,
    OutOfBand,
    PoorLocalization,
    ZeroVelocity,
)

# 1/sin guards: pair momentum must stay this far from the band edges {0, pi},
# and an open dissociation channel this far from its thresholds.
K_EDGE_MARGIN = 0.01
K_EDGE_HARD = 1e-12
KB_THRESHOLD_MARGIN = 1e-6


@dataclass(frozen=True)
class LatticeParams:
    """Hopping J and on-site interaction U (energies in units of J)."""

    J: float = 1.0
    U: float = -2.0

    def __post_init__(self):
        if not self.J > 0:
            raise ValueError(f"hopping must be positive, got J={self.J}")
        # |U| = 2J makes the pair band touch the continuum at the single
        # excluded point K = pi; anything below that is a real overlap.
        if abs(self.U) < 2 * self.J:
            raise ValueError(
                f"need |U| >= 2J so the pair band clears the continuum, "
                f"got U={self.U}, J={self.J}"
            )

    @property
    def band_bottom(self):
        """Lowest pair energy, at K = 0."""
        return -math.sqrt(4 * self.J**2 + self.U**2)

    @property
    def band_top(self):
        """Highest pair energy, -|U|, reached in the K -> pi limit."""
        return -abs(self.U)


@dataclass(frozen=True)
class OnSitePotential:
    """Localized on-site potential v(m), exactly zero beyond support_radius.

    Use the constructors `gaussian`, `point`, `table` or `zero`.
    """

    kind: str
    center: int
    support_radius: int
    sites: tuple = ()
    values: tuple = ()

    # amplitudes below this are treated as exactly zero when truncating
    TRUNCATION = 1e-14

    @classmethod
    def gaussian(cls, V, sigma=0.65, center=0):
        """v(m) = V exp(-(m-center)^2 / (2 sigma^2)), truncated at 1e-14."""
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        if V == 0:
            return cls.zero()
        reach = int(math.ceil(sigma * math.sqrt(
            2.0 * math.log(abs(V) / cls.TRUNCATION)))) + 1
        sites = []
        vals = []
        for m in range(center - reach, center + reach + 1):
            val = V * math.exp(-((m - center) ** 2) / (2.0 * sigma**2))
            if abs(val) >= cls.TRUNCATION:
                sites.append(m)
                vals.append(val)
        radius = max(abs(m - center) for m in sites)
        return cls(kind="gaussian", center=center, support_radius=radius,
                   sites=tuple(sites), values=tuple(vals))

    @classmethod
    def point(cls, V, center=0):
        """Single-site impurity of strength V."""
        if V == 0:
            return cls.zero()
        return cls(kind="point", center=center, support_radius=0,
                   sites=(center,), values=(float(V),))

    @classmethod
    def table(cls, pairs):
        """Explicit (site, value) table; anything not listed is zero."""
        pairs = [(int(m), float(v)) for m, v in pairs if v != 0.0]
        if not pairs:
            return cls.zero()
        pairs.sort()
        sites = tuple(m for m, _ in pairs)
        vals = tuple(v for _, v in pairs)
        center = sites[len(sites) // 2]
        radius = max(abs(m - center) for m in sites)
        return cls(kind="table", center=center, support_radius=radius,
                   sites=sites, values=vals)

    @classmethod
    def zero(cls):
        return cls(kind="zero", center=0, support_radius=0)

    def __call__(self, m):
        """Evaluate v at integer site(s) m (scalar or array)."""
        m = np.asarray(m)
        out = np.zeros(m.shape, dtype=float)
        if self.sites:
            lo, hi = self.sites[0], self.sites[-1]
            dense = np.zeros(hi - lo + 1)
            dense[np.asarray(self.sites) - lo] = self.values  # gaps stay zero
            idx = np.asarray(m, dtype=int) - lo
            ok = (idx >= 0) & (idx < len(dense))
            out[ok] = dense[idx[ok]]
        return out if out.shape else float(out)


def dimer_dispersion(K, params=LatticeParams()):
    """Energy of the bound pair at quasimomentum K.

    Total function of real K (continuous at the K = pi band edge);
    complex K is evaluated with the principal square root.
    """
    J, U = params.J, params.U
    if np.iscomplexobj(np.asarray(K)) or isinstance(K, complex):
        c = np.cos(np.asarray(K, dtype=complex) / 2.0)
        return -np.sqrt(4 * J**2 * c**2 + U**2 + 0j)
    c = np.cos(np.asarray(K, dtype=float) / 2.0)
    out = -np.sqrt(4 * J**2 * c**2 + U**2)
    return float(out) if out.shape == () else out


def dimer_group_velocity(K, params=LatticeParams()):
    """dE/dK of the pair dispersion (positive for K in (0, pi))."""
    E = dimer_dispersion(K, params)
    return params.J**2 * np.sin(K) / abs(E)


def dimer_lambda(K, params=LatticeParams()):
    """Pair-binding decay exponent: 2J sinh(lambda) cos(K/2) = -U."""
    J, U = params.J, params.U
    if isinstance(K, complex):
        c = cmath.cos(K / 2.0)
        if abs(c) < K_EDGE_HARD:
            raise DegenerateMomentum(f"cos(K/2) ~ 0 at K={K}")
        return cmath.asinh(-U / (2 * J * c))
    c = math.cos(K / 2.0)
    if abs(c) < K_EDGE_HARD:
        raise DegenerateMomentum(f"binding exponent diverges at band edge K={K}")
    return math.asinh(-U / (2 * J * c))


def invert_dimer_dispersion(E, params=LatticeParams()):
    """Quasimomentum K with dimer_dispersion(K) = E.

    Real in-band E maps to K in [0, pi].  Complex E is accepted for
    resonance continuation: cos(K/2) = sqrt(E^2 - U^2)/(2J) with the
    principal square root, which continues the real-band branch for
    Re E inside the band.
    """
    J, U = params.J, params.U
    if isinstance(E, complex) and E.imag != 0.0:
        w = cmath.sqrt(E * E - U * U)
        return 2.0 * cmath.acos(w / (2.0 * J))
    E = float(np.real(E))
    lo, hi = params.band_bottom, params.band_top
    if E < lo - 1e-12 or E > hi + 1e-12:
        raise OutOfBand(f"E={E} outside pair band [{lo}, {hi}]")
    arg = math.sqrt(max(E * E - U * U, 0.0)) / (2.0 * J)
    return 2.0 * math.acos(min(arg, 1.0))


def require_open_momentum(K):
    """Reject pair momenta within the guard margin of the band edges."""
    Kr = float(np.real(K))
    if Kr < K_EDGE_MARGIN or Kr > math.pi - K_EDGE_MARGIN:
        raise DegenerateMomentum(
            f"K={Kr} within {K_EDGE_MARGIN} of a band edge; 1/sin(K/2) factors diverge"
        )


@dataclass(frozen=True)
class DimerChannel:
    """Bound-pair channel: quasimomentum, energy, binding exponent."""

    K: complex
    E: complex
    lam: complex


@dataclass(frozen=True)
class BoundState:
    """Normalized single-particle bound state on a finite window."""

    E_b: float
    psi: np.ndarray
    first_site: int
    localization_tail: float

    @property
    def sites(self):
        return np.arange(self.first_site, self.first_site + len(self.psi))

    def amplitude(self, m):
        """psi_b at site(s) m, zero outside the stored window."""
        m = np.asarray(m, dtype=int)
        idx = m - self.first_site
        out = np.zeros(m.shape, dtype=float)
        ok = (idx >= 0) & (idx < len(self.psi))
        out[ok] = self.psi[idx[ok]]
        return out if out.shape else float(out)


@dataclass(frozen=True)
class DissociationChannel:
    """One particle trapped in `bound_state`, the other free with k_b."""

    bound_state: BoundState
    k_b: complex
    is_open: bool

    @property
    def E_b(self):
        return self.bound_state.E_b

    @property
    def phase(self):
        """Hopping factor exp(i k_b) of the free leg (decaying if closed)."""
        return cmath.exp(1j * self.k_b)


@dataclass(frozen=True)
class ChannelSet:
    """All channels sharing one total energy.

    Dissociation channels are ordered by ascending E_b (stable, fixes
    S-matrix row meaning).  `sides` is 'both' for scattering, 'left' or
    'right' for the trap geometry.
    """

    E: complex
    dimer: DimerChannel
    dissociation: tuple
    sides: str
    params: LatticeParams = field(default=LatticeParams())

    @property
    def open_dissociation(self):
        return tuple(ch for ch in self.dissociation if ch.is_open)


def single_particle_bound_states(v, params=LatticeParams(), window=200,
                                 wall=None, tol=1e-8):
    """All single-particle states below the band (E_b < -J) of h = -J/2 (shift) + v.

    Diagonalizes on sites [-window, window] (or [-window, wall-1] when a
    hard wall is present) with zero boundary values.  States come back
    normalized, sorted by ascending E_b, with a deterministic sign (the
    largest-magnitude component is positive).  Raises PoorLocalization
    if any state still has weight >= tol on the window boundary.
    """
    J = params.J
    lo = -int(window)
    hi = int(wall) - 1 if wall is not None else int(window)
    if hi <= lo:
        raise ValueError("empty diagonalization window")
    sites = np.arange(lo, hi + 1)
    diag = v(sites)
    off = np.full(len(sites) - 1, -J / 2.0)
    try:
        vals, vecs = eigh_tridiagonal(
            diag, off, select="v", select_range=(-np.inf, -J - 1e-12)
        )
    except Exception:
        vals, vecs = eigh_tridiagonal(diag, off)
        keep = vals < -J - 1e-12
        vals, vecs = vals[keep], vecs[:, keep]
    states = []
    for i in np.argsort(vals):
        psi = vecs[:, i]
        psi = psi / np.linalg.norm(psi)
        k = np.argmax(np.abs(psi))
        if psi[k] < 0:
            psi = -psi
        # boundary weight at the open window edges (a wall edge is exact)
        tail = abs(psi[0])
        if wall is None:
            tail = max(tail, abs(psi[-1]))
        if tail >= tol:
            raise PoorLocalization(
                f"bound state E_b={vals[i]:.6f} has boundary weight {tail:.2e} "
                f">= {tol:g}; enlarge the window"
            )
        states.append(BoundState(E_b=float(vals[i]), psi=psi,
                                 first_site=lo, localization_tail=float(tail)))
    return states


@lru_cache(maxsize=128)
def _bound_states_cached(v, params, window, wall, tol):
    return tuple(single_particle_bound_states(v, params, window=window,
                                              wall=wall, tol=tol))


def dissociation_momentum(E, E_b, params=LatticeParams()):
    """Wave number of the free leg from E = E_b - J cos(k_b).

    Real E: open channels get k_b in [0, pi]; closed ones the unique
    decaying branch (k_b = i*kappa below the channel band, pi + i*kappa
    above it, kappa > 0).  Complex E: the analytic continuation of the
    branch selected at Re E.
    """
    J = params.J
    zeta = (E_b - E) / J
    if isinstance(zeta, complex) and zeta.imag != 0.0:
        zr = zeta.real
        if -1.0 < zr < 1.0:
            # open at Re E: principal arccos continues the outgoing branch
            return cmath.acos(zeta)
        # closed at Re E: continue the decaying root of exp(i k)
        root = zeta - cmath.sqrt(zeta * zeta - 1.0)
        if abs(root) > 1.0:
            root = 1.0 / root
        return -1j * cmath.log(root)
    zeta = float(np.real(zeta))
    if -1.0 <= zeta <= 1.0:
        return complex(math.acos(zeta))
    kappa = math.acosh(abs(zeta))
    if zeta > 1.0:
        return 1j * kappa
    return math.pi + 1j * kappa


def build_channel_set(v, params=LatticeParams(), N=10, K=None, E=None,
                      sides="both", window=None, wall=None, loc_tol=1e-8):
    """Assemble the dimer channel plus every dissociation channel.

    Provide either a real quasimomentum K (scattering) or an energy E
    (possibly complex, for resonance continuation).  Channels are
    ordered by ascending E_b.
    """
    if (K is None) == (E is None):
        raise ValueError("provide exactly one of K or E")
    if K is not None:
        E = dimer_dispersion(K, params)
    else:
        K = invert_dimer_dispersion(E, params)
    lam = dimer_lambda(K, params)
    dimer = DimerChannel(K=K, E=E, lam=lam)
    if window is None:
        # near-threshold states (E_b just below -J) decay slowly; retry on
        # doubled windows until their tails clear the tolerance
        window = max(4 * N, 200)
        while True:
            try:
                bound = _bound_states_cached(v, params, window, wall, loc_tol)
                break
            except PoorLocalization:
                if window >= 6400:
                    raise
                window *= 2
    else:
        bound = _bound_states_cached(v, params, window, wall, loc_tol)
    channels = []
    for b in bound:
        k_b = dissociation_momentum(E, b.E_b, params)
        is_open = (abs(k_b.imag) < 1e-14) and (math.sin(k_b.real) > 0.0)
        channels.append(DissociationChannel(bound_state=b, k_b=k_b,
                                            is_open=is_open))
    return ChannelSet(E=E, dimer=dimer, dissociation=tuple(channels),
                      sides=sides, params=params)


def dimer_channel_wavefunction(ch, N, direction, params=LatticeParams()):
    """Traveling bound-pair wave, normalized to unit probability current.

    Psi(m, n) = sqrt(sinh(lam) / (J sin(K/2)))
                * exp(direction * i K (m+n-N)/2 - lam |m-n|)

    Returns a callable f(m, n) accepting arrays.
    """
    if direction not in (+1, -1):
        raise ValueError("direction must be +1 or -1")
    K, lam = ch.K, ch.lam
    s = np.sin(np.real(K) / 2.0) if abs(np.imag(K)) < 1e-14 else cmath.sin(K / 2.0)
    if abs(s) < K_EDGE_HARD:
        raise DegenerateMomentum(f"sin(K/2) ~ 0 at K={K}")
    amp = np.sqrt(np.sinh(lam + 0j) / (params.J * cmath.sin(K / 2.0)))

    def f(m, n):
        m = np.asarray(m)
        n = np.asarray(n)
        return amp * np.exp(direction * 0.5j * K * (m + n - N)
                            - lam * np.abs(m - n))

    return f


def dissociation_channel_wavefunction(ch, N, side, params=LatticeParams()):
    """Outgoing dissociation wave on one side of the scatterer.

    One particle sits in psi_b, the other runs outward as
    exp(i k_b (|x| - N)) / sqrt(2 J |sin k_b|) for |x| > N on the chosen
    side; symmetrized in the two coordinates and zero wherever both
    particles are inside the box.
    """
    if side not in ("L", "R"):
        raise ValueError("side must be 'L' or 'R'")
    k_b = ch.k_b
    s_abs = abs(cmath.sin(k_b))
    if ch.is_open and s_abs < KB_THRESHOLD_MARGIN:
        raise ZeroVelocity(f"open channel at threshold, sin(k_b)={s_abs:.2e}")
    pref = 1.0 / math.sqrt(2.0 * params.J * s_abs)
    sigma = 1 if side == "R" else -1
    b = ch.bound_state

    def f(m, n):
        m = np.asarray(m)
        n = np.asarray(n)
        dist_m = sigma * m - N
        dist_n = sigma * n - N
        # clip the exponent on the unsupported side so evanescent k_b
        # cannot overflow inside the masked region
        term1 = (dist_m > 0) * b.amplitude(n) * np.exp(
            1j * k_b * np.maximum(dist_m, 0.0))
        term2 = (dist_n > 0) * b.amplitude(m) * np.exp(
            1j * k_b * np.maximum(dist_n, 0.0))
        return pref * (term1 + term2)

    return f
