import cmath
import math

import numpy as np
import pytest

import bhdimer.scattering as scattering
from bhdimer.errors import ClosedChannel, DegenerateMomentum
from bhdimer.lattice import (
    LatticeParams,
    OnSitePotential,
    build_channel_set,
    dimer_dispersion,
    dimer_lambda,
)
from bhdimer.scattering import (
    ChannelBlocks,
    InteriorBox,
    assemble_bordered_system,
    build_effective_hamiltonian,
    channel_probabilities,
    compute_smatrix,
    convergence_scan,
    solve_scattering,
    sweep_KV,
)

V0 = OnSitePotential.zero()
GAUSS = {V: OnSitePotential.gaussian(V, 0.65) for V in (-2.0, -1.5, -0.5, 0.8, 2.0)}


def test_box_indexing():
    box = InteriorBox.symmetric(4)
    assert box.side == 9 and box.size == 81
    m, n = box.grids()
    flat = box.index(m, n).ravel()
    assert np.array_equal(np.sort(flat), np.arange(81))  # bijection
    h0 = box.h0(GAUSS[-2.0])
    assert np.max(np.abs(h0 - h0.T)) == 0.0


def test_interior_hamiltonian_action():
    # H0 must act like the two-particle stencil with zero outside the box
    box = InteriorBox.symmetric(3)
    v = GAUSS[-0.5]
    h0 = box.h0(v)
    rng = np.random.default_rng(0)
    psi = rng.normal(size=(7, 7))
    ref = np.zeros_like(psi)
    pad = np.zeros((9, 9))
    pad[1:-1, 1:-1] = psi
    for i in range(7):
        for j in range(7):
            m, n = i - 3, j - 3
            ref[i, j] = (-0.5 * (pad[i + 2, j + 1] + pad[i, j + 1]
                                 + pad[i + 1, j + 2] + pad[i + 1, j])
                         + (v(m) + v(n) - 2.0 * (m == n)) * psi[i, j])
    out = box.reshape(h0 @ psi.ravel())
    assert np.max(np.abs(out - ref)) < 1e-14


def test_channel_self_coupling_value():
    # P at K = pi/2 is exp(-i pi/4) / (2 sin(pi/4))
    channels = build_channel_set(V0, K=math.pi / 2, N=6)
    blocks = ChannelBlocks(channels, InteriorBox.symmetric(6))
    expect = cmath.exp(-0.25j * math.pi) / (2 * math.sin(math.pi / 4))
    assert blocks.P == pytest.approx(expect, abs=1e-14)


def test_dimer_coupling_support():
    N = 7
    channels = build_channel_set(V0, K=1.0, N=N)
    blocks = ChannelBlocks(channels, InteriorBox.symmetric(N))
    for side in ("L", "R"):
        nz = np.flatnonzero(blocks.wt[side])
        assert len(nz) == 2 * (2 * N + 1) - 1  # two boundary lines, shared corner


def test_free_propagation_identity():
    for K in np.linspace(0.05, math.pi - 0.05, 9):
        sm = compute_smatrix(K, V0, N=8)
        pr = channel_probabilities(sm, "dimer_L")
        assert abs(pr.P_t - 1.0) < 1e-10
        assert pr.P_r < 1e-10 and pr.P_d == 0.0


def test_free_interior_matches_analytic_wave():
    # with a unit left-incoming pair the interior must continue the
    # exact traveling wave, and the transmitted phase is exp(iKN)
    K, N = 1.3, 8
    p = LatticeParams()
    sol = solve_scattering(K, V0, N=N, incoming={"dimer_L": 1.0})
    lam = dimer_lambda(K, p)
    amp = math.sqrt(math.sinh(lam) / (p.J * math.sin(K / 2)))
    m, n = InteriorBox.symmetric(N).grids()
    exact = amp * np.exp(0.5j * K * (m + n + N) - lam * np.abs(m - n))
    assert np.max(np.abs(sol.chi - exact)) < 1e-9
    j = sol.labels.index("dimer_R")
    assert sol.outgoing[j] == pytest.approx(cmath.exp(1j * K * N), abs=1e-10)


def test_elimination_equivalence():
    # bordered solve and H_eff route must agree to solver precision
    rng = np.random.default_rng(7)
    for _ in range(10):
        K = rng.uniform(0.15, math.pi - 0.15)
        V = rng.uniform(-3, 2)
        v = OnSitePotential.gaussian(V, 0.65)
        system = assemble_bordered_system(K, v, 8, {"dimer_L": 1.0})
        chi_b, c_b = system.solve()
        sol = solve_scattering(K, v, 8, {"dimer_L": 1.0})
        assert np.max(np.abs(chi_b - sol.chi.ravel())) < 1e-10
        assert np.max(np.abs(c_b - sol.outgoing)) < 1e-10


def test_interior_exchange_symmetry():
    for inc in ({"dimer_L": 1.0}, {"diss0_L": 1.0}):
        sol = solve_scattering(1.2, GAUSS[-2.0], N=10, incoming=inc)
        assert np.max(np.abs(sol.chi - sol.chi.T)) < 1e-10


def test_smatrix_parity_symmetry():
    sm = compute_smatrix(1.1, GAUSS[-1.5], N=10)
    i_L, i_R = sm.index("dimer_L"), sm.index("dimer_R")
    assert abs(abs(sm.matrix[i_L, i_L]) - abs(sm.matrix[i_R, i_R])) < 1e-8
    assert abs(abs(sm.matrix[i_R, i_L]) - abs(sm.matrix[i_L, i_R])) < 1e-8


def test_unitarity_truncation_limited():
    # flux conservation is limited by the interior truncation (shallow
    # bound states leak past N = 10); the strict 1e-8 figure is tracked
    # by acceptance criterion 1 and the decisions ledger
    worst = 0.0
    for V, v in GAUSS.items():
        for K in (0.4, math.pi / 2, 2.7):
            worst = max(worst, compute_smatrix(K, v, N=10).unitarity_defect())
    assert worst < 5e-3


def test_unitarity_improves_with_box_size():
    v = GAUSS[0.8]
    defects = [compute_smatrix(math.pi / 2, v, N=N).unitarity_defect()
               for N in (8, 12, 16)]
    assert defects[2] < defects[1] < defects[0]
    assert defects[2] < 1e-12


def test_probabilities_sum_to_one():
    for (V, K) in ((-2.0, math.pi / 2), (-1.5, 0.9), (0.8, 2.0)):
        pr = channel_probabilities(compute_smatrix(K, GAUSS[V], N=10),
                                   "dimer_L")
        assert pr.total == pytest.approx(1.0, abs=5e-3)
        assert 0 <= pr.P_t <= 1 and 0 <= pr.P_r <= 1 and 0 <= pr.P_d <= 1


def test_dissociation_dominates_in_the_well():
    # an open dissociation channel splits the pair far more often than it
    # co-tunnels; at K = pi/2, V = -2 splitting and whole-pair reflection
    # are comparable (P_d = 0.456 vs P_r = 0.510, cross-checked against
    # the wave-packet oracle), and splitting wins outright near the band
    # top
    pr = channel_probabilities(compute_smatrix(math.pi / 2, GAUSS[-2.0], N=10),
                               "dimer_L")
    assert pr.P_d > 10 * pr.P_t
    assert pr.P_d > 0.4
    pr_top = channel_probabilities(compute_smatrix(3.0, GAUSS[-2.0], N=10),
                                   "dimer_L")
    assert pr_top.P_d > max(pr_top.P_t, pr_top.P_r)


def test_repulsive_barrier_closes_dissociation():
    pr = channel_probabilities(compute_smatrix(math.pi / 2, GAUSS[0.8], N=10),
                               "dimer_L")
    assert pr.P_d == 0.0
    assert pr.P_t + pr.P_r == pytest.approx(1.0, abs=1e-8)
    pr = channel_probabilities(compute_smatrix(math.pi / 2, GAUSS[2.0], N=10),
                               "dimer_L")
    assert pr.P_d == 0.0


def test_closed_channel_rejected():
    sm = compute_smatrix(math.pi / 2, GAUSS[-2.0], N=10)
    with pytest.raises(ClosedChannel):
        sm.index("diss1_L")  # shallow-state channel is evanescent here
    with pytest.raises(ClosedChannel):
        channel_probabilities(sm, "diss1_L")


def test_degenerate_momentum_guard():
    with pytest.raises(DegenerateMomentum):
        compute_smatrix(0.005, V0, N=8)
    with pytest.raises(DegenerateMomentum):
        compute_smatrix(math.pi - 1e-5, V0, N=8)


def test_heff_correction_on_boundary_only():
    N = 6
    box = InteriorBox.symmetric(N)
    channels = build_channel_set(GAUSS[-0.5], K=1.0, N=N)
    heff = build_effective_hamiltonian(channels, GAUSS[-0.5], box)
    diff = heff.matrix - heff.h0
    m, n = box.grids()
    on_edge = ((np.abs(m) == N) | (np.abs(n) == N)).ravel()
    interior = ~on_edge
    assert np.max(np.abs(diff[np.ix_(interior, interior)])) == 0.0
    assert np.max(np.abs(diff)) > 0


def test_heff_no_gain():
    # anti-Hermitian part must only remove flux (eigenvalues <= 0)
    for V, K in ((0.0, 1.0), (-2.0, math.pi / 2), (-0.5, 0.4)):
        v = GAUSS.get(V, V0)
        channels = build_channel_set(v, K=K, N=10)
        heff = build_effective_hamiltonian(channels, v, InteriorBox.symmetric(10))
        evals = np.linalg.eigvalsh(heff.antihermitian_part())
        assert evals.max() < 1e-10


def test_heff_dimer_term_decays_from_edge():
    N = 8
    channels = build_channel_set(V0, K=1.0, N=N)
    box = InteriorBox.symmetric(N)
    heff = build_effective_hamiltonian(channels, V0, box)
    diff = heff.matrix - heff.h0
    lam = channels.dimer.lam.real
    # along the edge row, the correction profile falls off like exp(-lam d)
    i0 = box.index(N, N - 1)
    i1 = box.index(N, N - 5)
    ratio = abs(diff[i0, i0]) / abs(diff[i1, i1])
    assert ratio == pytest.approx(math.exp(2 * lam * 4), rel=1e-6)


def _smatrix_without_evanescent(K, v, N):
    channels = build_channel_set(v, K=K, N=N)
    pruned = channels.__class__(E=channels.E, dimer=channels.dimer,
                                dissociation=tuple(ch for ch in channels.dissociation
                                                   if ch.is_open),
                                sides=channels.sides, params=channels.params)
    box = InteriorBox.symmetric(N)
    heff = build_effective_hamiltonian(pruned, v, box)
    blocks = heff.blocks
    import scipy.linalg as sla
    A = heff.matrix - blocks.E * np.eye(box.size)
    lu = sla.lu_factor(A)
    names = blocks.label_names()
    mask = blocks.open_mask()
    open_names = [nm for nm, o in zip(names, mask) if o]
    S = np.zeros((len(open_names), len(open_names)), dtype=complex)
    for jc, inc in enumerate(open_names):
        chi = sla.lu_solve(lu, blocks.source({inc: 1.0}))
        S[:, jc] = blocks.outgoing(chi, {inc: 1.0})[mask]
    return tuple(open_names), S


def test_evanescent_channels_harmless_when_deep():
    # removing the evanescent channel shifts open entries by the weight of
    # the virtual dissociation it carries, ~ exp(-2 kappa_b N); deep cell:
    # E_b = -1.65 (kappa_b = 1.08), channel closed at K = 0.5
    K, v = 0.5, OnSitePotential.gaussian(-1.2, 0.65)
    channels = build_channel_set(v, K=K, N=10)
    assert len(channels.dissociation) == 1
    assert not channels.dissociation[0].is_open
    N = 22
    sm_with = compute_smatrix(K, v, N=N)
    open_names, S = _smatrix_without_evanescent(K, v, N)
    assert sm_with.open_labels == open_names
    assert np.max(np.abs(S - sm_with.matrix)) < 1e-8
    # at the working box size the same removal is still visible
    sm10 = compute_smatrix(K, v, N=10)
    _, S10 = _smatrix_without_evanescent(K, v, 10)
    assert np.max(np.abs(S10 - sm10.matrix)) > 1e-5


def test_sweep_matches_single_cell():
    rows = sweep_KV([math.pi / 2], [-2.0], sigma=0.65, N=10)
    assert len(rows) == 1
    pr = channel_probabilities(compute_smatrix(math.pi / 2, GAUSS[-2.0], N=10),
                               "dimer_L")
    assert rows[0]["P_t"] == pytest.approx(pr.P_t, abs=1e-12)
    assert rows[0]["P_d"] == pytest.approx(pr.P_d, abs=1e-12)
    assert rows[0]["error"] == ""


def test_sweep_repulsive_column_no_dissociation():
    rows = sweep_KV(np.linspace(0.3, 2.8, 4), [0.5, 1.5], sigma=0.65, N=10)
    assert len(rows) == 8
    assert all(r["P_d"] == 0.0 for r in rows)
    # V-major ordering
    assert [r["V"] for r in rows] == [0.5] * 4 + [1.5] * 4


def test_sweep_records_cell_errors():
    rows = sweep_KV([0.001, 1.0], [0.8], sigma=0.65, N=10)
    assert "DegenerateMomentum" in rows[0]["error"]
    assert rows[1]["error"] == ""
    assert math.isnan(rows[0]["P_t"])


def test_sweep_parallel_matches_serial():
    K = np.linspace(0.4, 2.6, 3)
    V = [-1.5, 0.8]
    serial = sweep_KV(K, V, N=8)
    parallel = sweep_KV(K, V, N=8, jobs=2)
    for a, b in zip(serial, parallel):
        assert a == b


def test_convergence_scan_barrier():
    # without bound states the error is governed by the pair evanescent
    # tail: slope close to -2 lambda(K)
    K = math.pi / 2
    rows, slope = convergence_scan(K, GAUSS[0.8], range(6, 15), N_ref=18)
    errs = [e for _, e in rows]
    assert all(b < a for a, b in zip(errs, errs[1:]))  # strictly decreasing
    assert slope < 0
    lam = dimer_lambda(K)
    assert abs(slope - (-2 * lam)) / (2 * lam) < 0.3
    assert errs[0] < 1e-4 and errs[-1] < 1e-11


def test_convergence_scan_requires_room():
    with pytest.raises(ValueError):
        convergence_scan(1.0, GAUSS[0.8], [6, 30], N_ref=25)


def test_validate_catches_injected_sign_error(monkeypatch):
    # flipping the sign of one dimer edge profile must break flux
    # conservation detectably (mutation check for the validate command)
    from bhdimer import cli

    original = scattering._dimer_edge_vector

    def wrong(box, edge_site, outward, K, lam, params):
        vec = original(box, edge_site, outward, K, lam, params)
        # flip only the ket-side profile (K > 0); flipping both sides of
        # the rank-one term would be a harmless gauge change
        return -vec if np.real(K) > 0 else vec

    monkeypatch.setattr(scattering, "_dimer_edge_vector", wrong)
    results = {name: ok for name, ok, *_ in cli.validation_checks(quick=True)}
    assert not all(results.values())
    assert not results["free propagation P_t = 1"]
