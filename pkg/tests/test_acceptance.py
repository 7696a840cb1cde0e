"""Acceptance criteria, one test per criterion, tolerances as specified.

Each test prints one PASS/FAIL line (visible with pytest -rA).  Criteria
1, 7 (V=-2), 8 and 9 probe tolerances the truncated method cannot reach
at the stated box sizes / default geometry; the measured values and the
analysis live in the decisions ledger.  They are asserted faithfully
here rather than loosened.
"""

import math

import numpy as np
import pytest

from bhdimer.lattice import LatticeParams, OnSitePotential, dimer_lambda
from bhdimer import resonances, scattering, timedomain

from conftest import (
    FAST,
    K_BENCH,
    T_REF,
    gamov_rho,
    run_decay_cn,
)

PARAMS = LatticeParams()


def report(criterion, ok, detail):
    mode = " [FAST]" if FAST else ""
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}{mode}")


def test_criterion_01_flux_unitarity():
    # S+S = 1 on open channels over a 20x20 (K, V) grid at N = 10
    Ks = np.linspace(0.1, math.pi - 0.1, 20)
    Vs = np.linspace(-3.0, 2.0, 20)
    worst = 0.0
    where = None
    for V in Vs:
        v = (OnSitePotential.gaussian(float(V), 0.65) if V != 0
             else OnSitePotential.zero())
        for K in Ks:
            d = scattering.compute_smatrix(float(K), v, N=10).unitarity_defect()
            if d > worst:
                worst, where = d, (float(K), float(V))
    ok = worst < 1e-8
    report(1, ok, f"max |S+S - 1| = {worst:.3e} at (K, V) = "
                  f"({where[0]:.3f}, {where[1]:.3f}), tolerance 1e-8")
    assert ok


def test_criterion_02_elimination_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(10):
        K = rng.uniform(0.15, math.pi - 0.15)
        V = rng.uniform(-3.0, 2.0)
        v = OnSitePotential.gaussian(V, 0.65)
        system = scattering.assemble_bordered_system(K, v, 10,
                                                     {"dimer_L": 1.0})
        chi_b, _ = system.solve()
        sol = scattering.solve_scattering(K, v, 10, {"dimer_L": 1.0})
        worst = max(worst, float(np.max(np.abs(chi_b - sol.chi.ravel()))))
    ok = worst < 1e-10
    report(2, ok, f"max interior mismatch bordered vs H_eff = {worst:.3e}, "
                  f"tolerance 1e-10")
    assert ok


def test_criterion_03_stationary_vs_wavepacket(oracle_results):
    worst = 0.0
    lines = []
    for V, (P_t, P_r, P_d, _) in sorted(oracle_results.items()):
        v = (OnSitePotential.gaussian(V, 0.65) if V != 0
             else OnSitePotential.zero())
        pr = scattering.channel_probabilities(
            scattering.compute_smatrix(K_BENCH, v, N=10), "dimer_L")
        dt_ = abs(P_t - pr.P_t)
        dd = abs(P_d - pr.P_d)
        worst = max(worst, dt_, dd)
        lines.append(f"V={V:+.1f}: dP_t={dt_:.4f} dP_d={dd:.4f}")
    ok = worst < 0.02
    report(3, ok, "; ".join(lines) + f"; worst {worst:.4f}, tolerance 0.02")
    assert ok


def test_criterion_04_dissociation_window():
    pts = 30 if FAST else 100
    Ks = np.linspace(0.05, math.pi - 0.05, pts)
    Vs = np.linspace(-4.0, 2.0, pts)
    rows = scattering.sweep_KV(Ks, Vs, sigma=0.65, N=10, jobs=2)
    failed = [r for r in rows if r["error"]]
    repulsive = [r for r in rows if r["V"] >= 0 and not r["error"]]
    ok_zero = all(r["P_d"] == 0.0 for r in repulsive)
    window = sorted({r["V"] for r in rows
                     if not r["error"] and r["P_d"] > 0.01})
    ok_window = bool(window) and window[0] < -1.0 and window[-1] > -3.0 and any(
        -3.0 < V < -1.0 for V in window)
    ok = ok_zero and ok_window
    report(4, ok, f"P_d = 0 for V >= 0: {ok_zero}; window with P_d > 0.01: "
                  f"[{window[0]:.2f}, {window[-1]:.2f}] intersects (-3, -1): "
                  f"{ok_window}; {len(failed)} failed cells")
    assert ok


def test_criterion_05_truncation_convergence():
    all_ok = True
    lines = []
    for V in (-2.0, -1.5, 0.8):
        v = OnSitePotential.gaussian(V, 0.65)
        rows, slope = scattering.convergence_scan(K_BENCH, v, range(6, 21),
                                                  N_ref=25)
        errs = dict(rows)
        decreasing = errs[20] < errs[6]
        ratio = errs[20] / errs[10]
        ok = decreasing and slope < 0 and ratio < 0.1
        all_ok &= ok
        lines.append(f"V={V:+.1f}: slope={slope:.2f} err20/err10={ratio:.1e}")
    report(5, all_ok, "; ".join(lines) +
           "; need slope<0, ratio<0.1, overall decrease")
    assert all_ok


def test_criterion_06_resonance_validity(trap_v08, trap_vm2):
    all_ok = True
    details = []
    for name, bundle in (("V=0.8", trap_v08), ("V=-2", trap_vm2)):
        model = bundle["model"]
        worst_fp = 0.0
        for r in bundle["search"].accepted:
            evals = np.linalg.eigvals(model.heff(r.z))
            worst_fp = max(worst_fp, float(np.min(np.abs(evals - r.z))))
            all_ok &= r.gamma >= 0.0 and r.stability < 1e-4
        all_ok &= worst_fp < 1e-6
        details.append(f"{name}: {len(bundle['search'].accepted)} poles, "
                       f"max fixed-point defect {worst_fp:.1e}")
    # synthetic recovery at 40 samples per pole
    zs = [-2.75 - 0.01j, -2.6 - 0.002j, -2.45 - 0.06j, -2.3 - 0.03j,
          -2.1 - 0.005j]
    E = np.linspace(-2.82, -2.02, 200)
    g = sum(A / (E - z) for z, A in zip(zs, (1.0, 0.3, 1.5, 0.4, 0.8)))
    cands, _, _ = resonances.harmonic_inversion_fit(
        resonances.ResponseSamples(E, g, 10), 8)
    synth = max(min(abs(z - z0) for z, _ in cands) for z0 in zs)
    all_ok &= synth < 1e-8
    details.append(f"synthetic 5-pole error {synth:.1e}")
    report(6, all_ok, "; ".join(details))
    assert all_ok


@pytest.mark.slow
@pytest.mark.parametrize("V,M", [(0.8, 5), (0.8, 6), (-2.0, 5), (-2.0, 6)])
def test_criterion_07_decay_law_cross_method(V, M, trap_v08, trap_vm2,
                                             decay_cn_v08, decay_cn_vm2):
    bundle = trap_v08 if V == 0.8 else trap_vm2
    traj = (decay_cn_v08 if V == 0.8 else decay_cn_vm2)[0]
    col = {5: 0, 6: 1}[M]
    rho_cn = traj.trap[:, col]
    rho_g, expansion = gamov_rho(bundle, M, traj.times)
    gap = float(np.max(np.abs(rho_g - rho_cn)))
    ok = gap < 0.05
    report(7, ok, f"V={V} M={M}: max|rho_gamov - rho_cn| = {gap:.4f} over "
                  f"[0, 50T], tolerance 0.05 "
                  f"(sum|B|^2 = {np.sum(expansion.weights):.3f})")
    assert ok


@pytest.mark.slow
def test_criterion_07_ordering(decay_cn_v08, decay_cn_vm2):
    t8, tm2 = decay_cn_v08[0], decay_cn_vm2[0]
    i8 = int(np.searchsorted(t8.times, 20 * T_REF))
    im2 = int(np.searchsorted(tm2.times, 20 * T_REF))
    ok = tm2.trap[im2, 0] < t8.trap[i8, 0]
    report(7, ok, f"ordering at 20T: rho(V=-2) = {tm2.trap[im2, 0]:.3f} < "
                  f"rho(V=0.8) = {t8.trap[i8, 0]:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_08_dissociation_fraction(decay_cn_vm2):
    traj, grid, bound = decay_cn_vm2
    total, fractions, other = timedomain.channel_resolved_flux(traj)
    diss = float(sum(np.asarray(val)[0] for val in fractions.values()))
    ok = 0.7 <= diss <= 0.9
    report(8, ok, f"V=-2 escape fraction via dissociation = {diss:.3f} "
                  f"(per channel: "
                  f"{[f'{float(np.asarray(v)[0]):.3f}' for v in fractions.values()]}), "
                  f"band 0.8 +- 0.1")
    assert ok


@pytest.mark.slow
def test_criterion_09_strong_confinement():
    # V = +2: the open-region length is reduced to 100 sites since less
    # than 1e-4 of probability ever leaves the trap (domain effects are
    # second order in that; adequacy itself is criterion 10)
    t_max = 100 * T_REF
    traj, _, _ = run_decay_cn(2.0, t_max, open_length=100, Ms=(5,),
                              sample_every=5 * T_REF)
    loss = float(1.0 - traj.trap[-1])
    ok = loss < 1e-5
    report(9, ok, f"V=+2: 1 - rho(100T) = {loss:.2e}, tolerance 1e-5")
    assert ok


@pytest.mark.slow
def test_criterion_10_time_domain_integrity():
    # (a) norm conservation without absorbers
    grid = timedomain.Grid2D(-30, 14)
    v = OnSitePotential.gaussian(-2.0, 0.65)
    H = timedomain.pair_hamiltonian(grid, v, PARAMS)
    psi0 = timedomain.initial_wavepacket(K_BENCH, 5, dimer_lambda(K_BENCH),
                                         grid)
    traj = timedomain.crank_nicolson_propagate(H.astype(complex), psi0, 0.02,
                                               10.0, sample_every=0.02)
    drift = float(np.max(np.abs(traj.norm - 1.0)))
    ok_norm = drift < 1e-10

    # (b, c) absorber and domain adequacy at 15 T
    t_max = (5 if FAST else 15) * T_REF
    base, _, _ = run_decay_cn(-2.0, t_max, open_length=150, absorber_width=40,
                              Ms=(5,))
    wide_ab, _, _ = run_decay_cn(-2.0, t_max, open_length=150,
                                 absorber_width=80, Ms=(5,))
    wide_dom, _, _ = run_decay_cn(-2.0, t_max, open_length=300,
                                  absorber_width=40, Ms=(5,))
    d_ab = float(abs(base.trap[-1] - wide_ab.trap[-1]))
    d_dom = float(abs(base.trap[-1] - wide_dom.trap[-1]))
    ok = ok_norm and d_ab < 1e-3 and d_dom < 1e-3
    report(10, ok, f"norm drift {drift:.1e} (<1e-10); absorber doubling "
                   f"moved rho by {d_ab:.1e}, domain doubling by {d_dom:.1e} "
                   f"(<1e-3)")
    assert ok
