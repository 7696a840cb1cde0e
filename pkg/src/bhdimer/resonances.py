"""Gamov resonances of a pair trapped between a wall and a barrier.

The trap is a stretch of lattice closed by a hard wall on one side and
a penetrable barrier (or well) on the other.  Quasi-bound pair states
appear as complex poles z_l = E_l - i*gamma_l/2 of the energy-dependent
open-boundary Hamiltonian H_eff(z).  The pipeline:

1. sample the response g(E) = Psi~(N0, N0) of the driven problem
   (H_eff(E) - E) Psi~ = delta_{N0,N0} on a real energy grid;
2. fit the pole sum g(E) ~ sum_l A_l / (E - z_l) (linearized rational
   least squares) to harvest pole candidates;
3. refine each candidate by Newton iteration on the nonlinear
   eigenvalue condition z in eig(H_eff(z)), and keep only poles that
   converge, do not gain (gamma >= 0), and are stable under enlarging
   the interior box;
4. expand an initial state over the Gamov states (right/left
   null-vector pairs) and sum |B_l|^2 exp(-gamma_l t) for the
   non-escape probability.

Spurious solutions, endemic to open-boundary eigenproblems, die at
step 3.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from numpy.polynomial import chebyshev as cheb

from .errors import (
    ContinuationError,
    DegeneratePole,
    FitDiverged,
    IllConditionedExpansion,
    NoConvergence,
    SingularSystem,
)
from .lattice import LatticeParams, OnSitePotential, build_channel_set
from .scattering import (
    ChannelBlocks,
    EffectiveHamiltonian,
    InteriorBox,
    build_effective_hamiltonian,
    _dense_solve,
)

IMAG_TRUST = 0.5          # |Im z| ceiling for the analytic continuation
POLE_TOL = 1e-8           # sigma_min(H_eff(z) - z) at an accepted pole
STABILITY_TOL = 1e-4      # pole drift allowed under N -> N+2
DEFAULT_WALL = 15
DEFAULT_N0 = 10
DEFAULT_GRID_POINTS = 2001


@dataclass(frozen=True)
class TrapConfig:
    """Hard wall plus barrier enclosing a stretch of lattice.

    With open_side='left' the amplitude vanishes at all sites
    m >= wall_site and the pair escapes toward -infinity; the interior
    box spans [-N, wall_site - 1].  A right-open trap is handled by
    mirror reflection (all reported scalars are reflection invariant).
    """

    barrier: OnSitePotential
    wall_site: int = DEFAULT_WALL
    open_side: str = "left"
    N: int = 10
    params: LatticeParams = field(default=LatticeParams())

    def __post_init__(self):
        if self.open_side not in ("left", "right"):
            raise ValueError("open_side must be 'left' or 'right'")

    def mirrored(self):
        pairs = [(-m, val) for m, val in zip(self.barrier.sites, self.barrier.values)]
        return TrapConfig(barrier=OnSitePotential.table(pairs),
                          wall_site=-self.wall_site,
                          open_side="left", N=self.N, params=self.params)


class _ShiftedSolver:
    """Fast solver for H_eff(z) - z using the low-rank boundary structure.

    H_eff(z) - z = (H0 - z) + sum_c sigma_c u_c w_c^T, so one
    eigendecomposition of the real symmetric H0 plus the Woodbury
    identity handles every shift and every boundary correction at the
    cost of a few dense matvecs.
    """

    def __init__(self, evals, Q, z, U_sig, W):
        self.evals = evals
        self.Q = Q
        self.z = complex(z)
        self.U_sig = U_sig        # columns already scaled by sigma_c
        self.W = W
        self._d = evals - self.z
        self._dc = evals - np.conj(self.z)
        T = self._apply_dinv(U_sig)
        r = U_sig.shape[1]
        self.cap = np.eye(r, dtype=complex) + W.T @ T
        self._T = T
        Tc = self._apply_dinv_h(np.conj(W))
        self.cap_h = np.eye(r, dtype=complex) + np.conj(U_sig).T @ Tc
        self._Tc = Tc

    def _apply_dinv(self, X):
        y = self.Q.T @ X
        y = y / (self._d[:, None] if X.ndim == 2 else self._d)
        return self.Q @ y

    def _apply_dinv_h(self, X):
        y = self.Q.T @ X
        y = y / (self._dc[:, None] if X.ndim == 2 else self._dc)
        return self.Q @ y

    def solve(self, b):
        """x with (H_eff(z) - z) x = b."""
        y = self._apply_dinv(b)
        rhs = self.W.T @ y
        x = np.linalg.solve(self.cap, rhs)
        return y - self._T @ x

    def solve_h(self, b):
        """x with (H_eff(z) - z)^dagger x = b."""
        y = self._apply_dinv_h(b)
        rhs = np.conj(self.U_sig).T @ y
        x = np.linalg.solve(self.cap_h, rhs)
        return y - self._Tc @ x

    def matvec(self, x):
        return (self.Q @ (self._d * (self.Q.T @ x))
                + self.U_sig @ (self.W.T @ x))


class TrapModel:
    """Precomputed machinery for one trap: box, bound states, H_eff(z)."""

    def __init__(self, trap: TrapConfig):
        if trap.open_side == "right":
            trap = trap.mirrored()
        self.trap = trap
        self.params = trap.params
        self.box = InteriorBox(-trap.N, trap.wall_site - 1)
        v = trap.barrier
        if v.kind != "zero" and (min(v.sites) < self.box.lo + 2
                                 or max(v.sites) > self.box.hi - 2):
            raise ValueError("barrier support must sit strictly inside the box")
        self.h0 = self.box.h0(v, self.params)
        self._eye = np.eye(self.box.size)
        self._h0_eig = None

    def _eigenbasis(self):
        if self._h0_eig is None:
            self._h0_eig = sla.eigh(self.h0)
        return self._h0_eig

    def _low_rank(self, blocks):
        """Boundary correction as scaled column pairs (U_sig, W)."""
        cols_u, cols_w = [], []
        for side in blocks.sides:
            cols_u.append(-blocks.sinh_lam * blocks.eiK2 * blocks.wt[side])
            cols_w.append(blocks.wtc[side])
        for ib in range(len(blocks.channels.dissociation)):
            for side in blocks.sides:
                v = blocks.vt[(ib, side)]
                cols_u.append(-blocks.phase[ib] * v)
                cols_w.append(v)
        return np.stack(cols_u, axis=1), np.stack(cols_w, axis=1)

    def shift_solver(self, z):
        """Woodbury solver for H_eff(z) - z (equals the dense route)."""
        blocks = ChannelBlocks(self.channels(z), self.box)
        U_sig, W = self._low_rank(blocks)
        evals, Q = self._eigenbasis()
        return _ShiftedSolver(evals, Q, z, U_sig, W)

    def channels(self, z):
        z = complex(z)
        if abs(z.imag) > IMAG_TRUST:
            raise ContinuationError(
                f"|Im z| = {abs(z.imag):.3f} beyond trust region {IMAG_TRUST}")
        p = self.params
        if not (p.band_bottom < z.real < p.band_top):
            raise ContinuationError(
                f"Re z = {z.real:.4f} outside the pair band "
                f"({p.band_bottom:.4f}, {p.band_top:.4f})")
        if z.imag == 0.0:
            z = z.real
        return build_channel_set(self.trap.barrier, p, N=self.trap.N, E=z,
                                 sides="left", wall=self.trap.wall_site)

    def heff(self, z):
        """Dense H_eff(z) on the interior box (open side only)."""
        blocks = ChannelBlocks(self.channels(z), self.box)
        return self.h0.astype(complex) + blocks.effective_correction()

    def shifted(self, z):
        return self.heff(z) - complex(z) * self._eye

    def enlarged(self, extra=2):
        bigger = TrapConfig(barrier=self.trap.barrier,
                            wall_site=self.trap.wall_site,
                            open_side="left", N=self.trap.N + extra,
                            params=self.params)
        return TrapModel(bigger)

    def default_energy_grid(self, points=DEFAULT_GRID_POINTS):
        p = self.params
        return np.linspace(p.band_bottom + 0.01, p.band_top - 0.01, points)


def build_trap_heff(z, trap: TrapConfig) -> EffectiveHamiltonian:
    """H_eff(z) for the trap as an EffectiveHamiltonian object."""
    model = TrapModel(trap)
    channels = model.channels(z)
    return build_effective_hamiltonian(channels, model.trap.barrier, model.box)


@dataclass
class ResponseSamples:
    """Complex response g(E) = Psi~(N0, N0) on a real energy grid."""

    energies: np.ndarray
    values: np.ndarray
    N0: int
    skipped: tuple = ()


def response_function(trap, grid=None, N0=DEFAULT_N0, model=None):
    """Drive the trap at (N0, N0) and record the on-site response.

    Resonances show up as sharp features of |g(E)|; the samples feed
    the harmonic-inversion fit.
    """
    model = model or TrapModel(trap)
    if not (model.box.lo < N0 < model.box.hi):
        raise ValueError(f"N0={N0} outside the interior box")
    if grid is None:
        grid = model.default_energy_grid()
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("energy grid must be strictly increasing")
    src = np.zeros(model.box.size, dtype=complex)
    j0 = int(model.box.index(N0, N0))
    src[j0] = 1.0
    vals = np.empty(len(grid), dtype=complex)
    skipped = []
    for i, E in enumerate(grid):
        try:
            solver = model.shift_solver(E)
            sol = solver.solve(src)
            resid = np.linalg.norm(solver.matvec(sol) - src)
            if not np.isfinite(resid) or resid > 1e-6:
                raise SingularSystem(f"response solve residual {resid:.1e}")
            vals[i] = sol[j0]
        except SingularSystem:
            vals[i] = np.nan
            skipped.append(i)
    return ResponseSamples(energies=grid, values=vals, N0=N0,
                           skipped=tuple(skipped))


# --- harmonic inversion -------------------------------------------------------


def _rational_fit(x, g, order, numer_extra, sk_iters):
    """One linearized rational LS fit P/Q on [-1, 1] (Chebyshev basis).

    Q is monic in its leading Chebyshev coefficient; Sanathanan-Koerner
    reweighting sharpens the linearization.  Returns (p, q, residual).
    """
    n_p = order + numer_extra          # numerator degree + 1
    Tp = np.polynomial.chebyshev.chebvander(x, n_p - 1)
    Tq = np.polynomial.chebyshev.chebvander(x, order)
    weight = np.ones(len(x))
    p = q = None
    for _ in range(max(1, sk_iters)):
        A = np.hstack([Tp, -g[:, None] * Tq[:, :-1]]) / weight[:, None]
        rhs = (g * Tq[:, -1]) / weight
        sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        p = sol[:n_p]
        q = np.append(sol[n_p:], 1.0)
        weight = np.abs(cheb.chebval(x, q))
        weight = np.maximum(weight, 1e-3 * np.max(weight))
    model = cheb.chebval(x, p) / cheb.chebval(x, q)
    residual = float(np.linalg.norm(model - g) / np.linalg.norm(g))
    return p, q, residual


def harmonic_inversion_fit(samples: ResponseSamples, max_poles=20,
                           numer_extra=2, rtol=0.5, sk_iters=4):
    """Extract complex pole candidates (z_l, A_l) from response samples.

    Fits g(E) by a rational function of escalating denominator order;
    the order stops growing once the residual stops improving.  Pole
    candidates are the denominator roots mapped back to energy, sorted
    by |Im z| ascending; residues follow from A_l = P(z_l)/Q'(z_l).

    Raises FitDiverged when no model order reaches `rtol` relative
    residual.
    """
    ok = ~np.isnan(samples.values)
    E = samples.energies[ok]
    g = samples.values[ok]
    if len(E) < 4 * max(1, max_poles):
        raise ValueError("need at least 4 samples per requested pole")
    mid = 0.5 * (E[0] + E[-1])
    hw = 0.5 * (E[-1] - E[0])
    x = (E - mid) / hw

    best = None
    stalled = 0
    for order in range(1, max_poles + 1):
        p, q, res = _rational_fit(x, g, order, numer_extra, sk_iters)
        if best is None or res < best[3]:
            improvement = math.inf if best is None else best[3] - res
            best = (order, p, q, res)
            if improvement < 10 * np.finfo(float).eps * max(res, 1.0):
                stalled += 1
            else:
                stalled = 0
        else:
            stalled += 1
        if res < 1e-13 or stalled >= 3:
            break
    order, p, q, res = best
    if res > rtol:
        raise FitDiverged(
            f"best relative residual {res:.2e} > {rtol:g} at order {order}")

    roots = cheb.chebroots(q)
    dq = cheb.chebder(q)
    candidates = []
    for r in roots:
        if abs(r.real) > 1.05:
            continue  # outside the sampled band: background artifact
        z = mid + hw * r
        qp = cheb.chebval(r, dq)
        if qp == 0:
            continue
        A = hw * cheb.chebval(r, p) / qp
        candidates.append((complex(z), complex(A)))
    candidates.sort(key=lambda za: abs(za[0].imag))
    return candidates, res, order


# --- pole refinement and Gamov states ------------------------------------------


def _nearest_eigenpair(solver: _ShiftedSolver, n_iter=8):
    """Eigenvalue of H_eff(z) nearest z via two-sided inverse iteration.

    The solver represents A = H_eff(z) - z; the returned mu is
    z + (Rayleigh quotient of A), i.e. the absolute eigenvalue.
    """
    n = solver.Q.shape[0]
    x = np.full(n, 1.0 / math.sqrt(n), dtype=complex)
    y = x.copy()
    for _ in range(n_iter):
        x = solver.solve(x)
        nx = np.linalg.norm(x)
        if not np.isfinite(nx) or nx == 0:
            raise NoConvergence(f"inverse iteration blew up at z={solver.z}")
        x /= nx
        y = solver.solve_h(y)
        y /= np.linalg.norm(y)
    denom = y.conj() @ x
    if abs(denom) < 1e-14:
        raise NoConvergence(f"defective eigenpair near z={solver.z}")
    mu = solver.z + (y.conj() @ solver.matvec(x)) / denom
    return complex(mu), x, y


@dataclass(frozen=True)
class Resonance:
    """Accepted pole z = E - i*gamma/2 of H_eff(z)."""

    z: complex
    residue: complex
    residual: float            # sigma_min(H_eff(z) - z)
    stability: float           # |z(N) - z(N+2)|

    @property
    def energy(self):
        return self.z.real

    @property
    def gamma(self):
        return -2.0 * self.z.imag


def _refine_once(model: TrapModel, z0, pole_tol, max_iter=30, h_tol=1e-11):
    """Newton iteration on mu(z) - z = 0 from the seed z0."""
    z = complex(z0)
    for _ in range(max_iter):
        try:
            mu, _, _ = _nearest_eigenpair(model.shift_solver(z))
        except ContinuationError as exc:
            raise NoConvergence(f"left trust region at z={z}: {exc}") from exc
        h = mu - z
        if abs(h) < h_tol:
            break
        delta = 1e-7 * (1.0 + abs(z))
        try:
            mu2, _, _ = _nearest_eigenpair(model.shift_solver(z + delta))
        except ContinuationError as exc:
            raise NoConvergence(f"left trust region at z={z}: {exc}") from exc
        hp = (mu2 - (z + delta) - h) / delta
        if abs(hp) < 1e-12:
            raise NoConvergence(f"flat Newton derivative at z={z}")
        step = -h / hp
        if abs(step) > 0.3:
            step *= 0.3 / abs(step)  # damp wild early steps
        z = z + step
    else:
        raise NoConvergence(f"no fixed point within {max_iter} Newton steps "
                            f"from seed {z0}")
    sigma = float(sla.svdvals(model.shifted(z))[-1])
    if sigma > pole_tol:
        raise NoConvergence(
            f"refined z={z} has sigma_min={sigma:.2e} > {pole_tol:g}")
    return z, sigma


def refine_pole(candidate, trap, pole_tol=POLE_TOL, model=None,
                residue=0.0, with_stability=True):
    """Polish a pole candidate and score its stability under N -> N+2.

    Rejects (NoConvergence) candidates that fail to reach a fixed point
    of the nonlinear eigenvalue condition with sigma_min below
    `pole_tol`, the signature of a spurious solution.
    """
    model = model or TrapModel(trap)
    z, sigma = _refine_once(model, candidate, pole_tol)
    stability = math.inf
    if with_stability:
        try:
            z2, _ = _refine_once(model.enlarged(2), z, max(pole_tol, 1e-7))
            stability = abs(z2 - z)
        except NoConvergence:
            stability = math.inf
    return Resonance(z=z, residue=complex(residue), residual=sigma,
                     stability=float(stability))


@dataclass
class GamovState:
    """Right (and left) null vector of H_eff(z_l) - z_l on the box."""

    resonance: Resonance
    psi: np.ndarray            # (side, side), exchange symmetric, unit norm
    left: np.ndarray           # flat left null vector
    degenerate: bool = False

    def flat(self):
        return self.psi.ravel()


def gamov_state(res: Resonance, trap, model=None):
    """Solve the homogeneous problem at an accepted pole."""
    model = model or TrapModel(trap)
    A = model.shifted(res.z)
    U, S, Vh = np.linalg.svd(A)
    degenerate = bool(S[-2] < max(10 * POLE_TOL, 1e-7))
    psi = Vh[-1].conj()
    left = U[:, -1]
    psi_mat = model.box.reshape(psi)
    psi_mat = 0.5 * (psi_mat + psi_mat.T)
    nrm = np.linalg.norm(psi_mat)
    if nrm < 1e-8:
        raise DegeneratePole(f"null vector lost under symmetrization at z={res.z}")
    psi_mat = psi_mat / nrm
    k = np.unravel_index(np.argmax(np.abs(psi_mat)), psi_mat.shape)
    phase = psi_mat[k] / abs(psi_mat[k])
    psi_mat = psi_mat / phase
    left_mat = model.box.reshape(left)
    left_mat = 0.5 * (left_mat + left_mat.T)
    left = left_mat.ravel()
    left /= np.linalg.norm(left)
    return GamovState(resonance=res, psi=psi_mat, left=left,
                      degenerate=degenerate)


@dataclass
class DecayExpansion:
    """Initial state expanded over Gamov states: Psi0 ~ sum B_l Psi_l."""

    terms: tuple               # ((Resonance, B_l), ...)
    completeness_defect: float
    condition: float

    @property
    def weights(self):
        return np.array([abs(B) ** 2 for _, B in self.terms])

    @property
    def gammas(self):
        return np.array([r.gamma for r, _ in self.terms])


def expand_initial_state(psi0, states, trap=None, cond_limit=1e10):
    """Biorthogonal expansion coefficients of a normalized initial state.

    B_l = <L_l, Psi0> / <L_l, Psi_l> with L_l the left null vector of
    H_eff(z_l) - z_l.  The Gamov family is not orthogonal (H_eff moves
    with z), so the completeness defect |1 - sum |B_l|^2| is reported
    rather than hidden.
    """
    psi0 = np.asarray(psi0, dtype=complex).ravel()
    psi0 = psi0 / np.linalg.norm(psi0)
    if not states:
        return DecayExpansion(terms=(), completeness_defect=1.0, condition=0.0)
    overlap = np.array([[st.left.conj() @ other.flat() for other in states]
                        for st in states])
    cond = float(np.linalg.cond(overlap))
    if cond > cond_limit:
        raise IllConditionedExpansion(f"overlap condition {cond:.2e}")
    terms = []
    for st in states:
        denom = st.left.conj() @ st.flat()
        if abs(denom) < 1e-12:
            raise IllConditionedExpansion(
                f"left/right vectors nearly orthogonal at z={st.resonance.z}")
        B = (st.left.conj() @ psi0) / denom
        terms.append((st.resonance, complex(B)))
    defect = abs(1.0 - sum(abs(B) ** 2 for _, B in terms))
    return DecayExpansion(terms=tuple(terms), completeness_defect=float(defect),
                          condition=cond)


def nonescape_probability_gamov(expansion: DecayExpansion, times):
    """rho(t) = sum_l |B_l|^2 exp(-gamma_l t); monotone non-increasing."""
    gammas = expansion.gammas
    if np.any(gammas < -1e-10):
        raise ValueError("expansion contains a gaining pole")
    times = np.asarray(times, dtype=float)
    return expansion.weights @ np.exp(-np.outer(np.maximum(gammas, 0.0), times))


@dataclass
class ResonanceSearch:
    """Outcript of the full pole hunt: accepted poles and the rejects."""

    accepted: tuple
    rejected: tuple            # ({seed, reason}, ...)
    samples: ResponseSamples
    fit_residual: float
    fit_order: int


def find_resonances(trap, grid=None, N0=DEFAULT_N0, max_poles=20,
                    pole_tol=POLE_TOL, stability_tol=STABILITY_TOL,
                    model=None, extra_seeds=()):
    """Response sampling, harmonic inversion, refinement and filtering."""
    model = model or TrapModel(trap)
    samples = response_function(trap, grid=grid, N0=N0, model=model)
    candidates, fit_res, order = harmonic_inversion_fit(samples, max_poles)
    seeds = [(z, A) for z, A in candidates]
    seeds.extend((complex(z), 0.0) for z in extra_seeds)

    accepted = []
    rejected = []
    for z0, A in seeds:
        if z0.imag > 1e-6 or abs(z0.imag) > IMAG_TRUST:
            rejected.append({"seed": z0, "reason": "outside physical half-plane"})
            continue
        seed = complex(z0.real, min(z0.imag, -1e-12))
        try:
            res = refine_pole(seed, trap, pole_tol=pole_tol, model=model,
                              residue=A)
        except NoConvergence as exc:
            rejected.append({"seed": z0, "reason": str(exc)})
            continue
        if res.gamma < -1e-10:
            rejected.append({"seed": z0, "reason": f"gain: gamma={res.gamma:.2e}"})
            continue
        if res.stability > stability_tol:
            rejected.append({"seed": z0,
                             "reason": f"unstable under N+2: moved {res.stability:.2e}"})
            continue
        if any(abs(res.z - a.z) < 1e-6 for a in accepted):
            continue
        accepted.append(res)
    accepted.sort(key=lambda r: r.energy)
    return ResonanceSearch(accepted=tuple(accepted), rejected=tuple(rejected),
                           samples=samples, fit_residual=fit_res,
                           fit_order=order)
