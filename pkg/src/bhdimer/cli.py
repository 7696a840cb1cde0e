"""Command-line front end: one subcommand per experiment.

Single scattering solves, (K, V) sweeps, truncation-radius convergence
scans, resonance hunts, decay-law comparisons and a self-validation
suite.  Tabular results go to CSV (17-significant-digit floats, one
header row), structured reports to JSON (complex numbers as {re, im});
every run also writes the fully resolved configuration next to its
output so it can be reproduced bit for bit.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import lattice, resonances, scattering, timedomain
from .errors import BhdimerError
from .lattice import LatticeParams, OnSitePotential

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

EXIT_CONFIG = 2
EXIT_NUMERICS = 3

# every key a config file or the flags may set, with its default
CONFIG_DEFAULTS = {
    "J": 1.0,
    "U": -2.0,
    "V": 0.0,
    "sigma": 0.65,
    "potential_kind": "gaussian",      # gaussian | point | table | zero
    "potential_center": 0,
    "potential_table": [],             # [[site, value], ...] for kind=table
    "K": math.pi / 2,
    "N": 10,
    "N_ref": 25,
    "N_min": 6,
    "N_max": 20,
    "K_min": 0.05,
    "K_max": math.pi - 0.05,
    "K_points": 100,
    "V_min": -4.0,
    "V_max": 2.0,
    "V_points": 100,
    "wall_site": 15,
    "open_side": "left",
    "N0": 10,
    "grid_points": 2001,
    "max_poles": 20,
    "M": 5,
    "method": "both",                  # decay: gamov | cn | both
    "t_max_T": 50.0,
    "T_ref": 2 * math.pi / 0.30,
    "dt": 0.02,
    "sample_every": 0.5,
    "open_length": 300,
    "absorber_width": 40,
    "absorber_strength": 1.0,
    "packet_width": 10.0,
    "jobs": 1,
    "seed": 0,
    "out": "",
    "format": "json",                  # csv | json where a choice exists
    "selftest": False,
    "quick": False,
}


class ConfigError(Exception):
    pass


def _load_config_file(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    text = p.read_bytes()
    if p.suffix.lower() == ".toml":
        try:
            return tomllib.loads(text.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def resolve_config(args):
    """Merge defaults, config file and flags; reject unknown keys."""
    cfg = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        data = _load_config_file(args.config)
        if not isinstance(data, dict):
            raise ConfigError("config root must be a table/object")
        for key, val in data.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = val
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["command"] = args.command
    try:
        LatticeParams(cfg["J"], cfg["U"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _params(cfg):
    return LatticeParams(float(cfg["J"]), float(cfg["U"]))


def _potential(cfg):
    kind = cfg["potential_kind"]
    if kind == "zero" or (kind == "gaussian" and cfg["V"] == 0):
        return OnSitePotential.zero()
    if kind == "gaussian":
        return OnSitePotential.gaussian(float(cfg["V"]), float(cfg["sigma"]),
                                        int(cfg["potential_center"]))
    if kind == "point":
        return OnSitePotential.point(float(cfg["V"]), int(cfg["potential_center"]))
    if kind == "table":
        return OnSitePotential.table(cfg["potential_table"])
    raise ConfigError(f"unknown potential kind {kind!r}")


def _fmt(x):
    """Round-trippable float formatting for CSV."""
    return f"{x:.17g}"


def _jsonable(obj):
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(x) for x in obj.tolist()]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    return obj


def _write_json(path, payload):
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2,
                                     sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, float) else x for x in row])


def _emit_resolved(cfg, out_path):
    side = Path(out_path).with_suffix(".resolved.json")
    _write_json(side, {k: v for k, v in sorted(cfg.items())})
    return side


# --- subcommands ---------------------------------------------------------------


def cmd_scatter(cfg):
    params = _params(cfg)
    v = _potential(cfg)
    sm = scattering.compute_smatrix(float(cfg["K"]), v, N=int(cfg["N"]),
                                    params=params)
    pr = scattering.channel_probabilities(sm, "dimer_L")
    report = {
        "K": sm.K,
        "E": sm.E,
        "channels": list(sm.labels),
        "open": [bool(o) for o in sm.open_mask],
        "smatrix": [[complex(x) for x in row] for row in sm.matrix],
        "P_t": pr.P_t,
        "P_r": pr.P_r,
        "P_d": pr.P_d,
        "per_channel": pr.per_channel,
        "unitarity_defect": sm.unitarity_defect(),
    }
    out = cfg["out"] or "scatter.json"
    _write_json(out, report)
    _emit_resolved(cfg, out)
    print(f"scatter: P_t={pr.P_t:.6f} P_r={pr.P_r:.6f} P_d={pr.P_d:.6f} "
          f"unitarity_defect={sm.unitarity_defect():.2e} -> {out}")
    return 0


def cmd_sweep(cfg):
    params = _params(cfg)
    K_values = np.linspace(float(cfg["K_min"]), float(cfg["K_max"]),
                           int(cfg["K_points"]))
    V_values = np.linspace(float(cfg["V_min"]), float(cfg["V_max"]),
                           int(cfg["V_points"]))
    rows = scattering.sweep_KV(K_values, V_values, sigma=float(cfg["sigma"]),
                               N=int(cfg["N"]), params=params,
                               jobs=int(cfg["jobs"]))
    out = cfg["out"] or "sweep.csv"
    _write_csv(out, ["K", "V", "P_t", "P_r", "P_d", "unitarity_defect", "error"],
               [[r["K"], r["V"], r["P_t"], r["P_r"], r["P_d"],
                 r["unitarity_defect"], r["error"]] for r in rows])
    _emit_resolved(cfg, out)
    ok = [r for r in rows if not r["error"]]
    window = sorted({r["V"] for r in ok if r["P_d"] > 0.01})
    print(f"sweep: {len(rows)} cells ({len(rows) - len(ok)} failed); "
          f"dissociation window "
          f"{f'[{window[0]:.3f}, {window[-1]:.3f}]' if window else 'empty'} "
          f"-> {out}")
    return 0


def cmd_converge(cfg):
    params = _params(cfg)
    v = _potential(cfg)
    N_values = list(range(int(cfg["N_min"]), int(cfg["N_max"]) + 1))
    rows, slope = scattering.convergence_scan(float(cfg["K"]), v, N_values,
                                              N_ref=int(cfg["N_ref"]),
                                              params=params)
    out = cfg["out"] or "converge.csv"
    full = rows + [(int(cfg["N_ref"]), 0.0)]
    _write_csv(out, ["N", "error"], [[n, e] for n, e in full])
    _write_json(Path(out).with_suffix(".fit.json"),
                {"slope": slope, "N_ref": int(cfg["N_ref"]),
                 "K": float(cfg["K"]), "V": float(cfg["V"])})
    _emit_resolved(cfg, out)
    print(f"converge: slope of log-error {slope:.3f} per site -> {out}")
    return 0


def _trap(cfg):
    return resonances.TrapConfig(barrier=_potential(cfg),
                                 wall_site=int(cfg["wall_site"]),
                                 open_side=cfg["open_side"],
                                 N=int(cfg["N"]), params=_params(cfg))


def cmd_resonances(cfg):
    if cfg["selftest"]:
        E = np.linspace(-2.8, -2.1, 200)
        z0 = -2.5 - 0.05j
        samples = resonances.ResponseSamples(E, 1.0 / (E - z0), int(cfg["N0"]))
        cands, res, order = resonances.harmonic_inversion_fit(samples, 5)
        err = abs(cands[0][0] - z0)
        print(f"selftest: synthetic pole recovered to {err:.2e} "
              f"(fit residual {res:.2e})")
        return 0 if err < 1e-8 else EXIT_NUMERICS
    trap = _trap(cfg)
    model = resonances.TrapModel(trap)
    grid = model.default_energy_grid(int(cfg["grid_points"]))
    search = resonances.find_resonances(trap, grid=grid, N0=int(cfg["N0"]),
                                        max_poles=int(cfg["max_poles"]),
                                        model=model)
    report = {
        "accepted": [{"z": r.z, "E": r.energy, "gamma": r.gamma,
                      "residue": r.residue, "residual": r.residual,
                      "stability": r.stability} for r in search.accepted],
        "rejected": [{"seed": r["seed"], "reason": r["reason"]}
                     for r in search.rejected],
        "fit_residual": search.fit_residual,
        "fit_order": search.fit_order,
    }
    out = cfg["out"] or "resonances.json"
    _write_json(out, report)
    _emit_resolved(cfg, out)
    print(f"resonances: {len(search.accepted)} accepted, "
          f"{len(search.rejected)} rejected -> {out}")
    return 0


def cmd_decay(cfg):
    params = _params(cfg)
    K = float(cfg["K"])
    lam = lattice.dimer_lambda(K, params)
    T = float(cfg["T_ref"])
    t_max = float(cfg["t_max_T"]) * T
    trap = _trap(cfg)
    model = resonances.TrapModel(trap)
    method = cfg["method"]
    if method not in ("gamov", "cn", "both"):
        raise ConfigError(f"unknown decay method {method!r}")

    rho_g = rho_cn = None
    summary = {"V": float(cfg["V"]), "M": int(cfg["M"]), "K": K, "T": T}

    times = None
    fractions = {}
    if method in ("cn", "both"):
        v = trap.barrier
        support = v.support_radius if v.kind != "zero" else 0
        lo = -(support + int(cfg["open_length"]) + int(cfg["absorber_width"]))
        grid = timedomain.Grid2D(lo, trap.wall_site - 1)
        absorber = timedomain.Absorber(width=int(cfg["absorber_width"]),
                                       strength=float(cfg["absorber_strength"]))
        prof = absorber.profile(grid, ends=("lo",))
        H = timedomain.pair_hamiltonian(grid, v, params, absorber_diag=prof)
        psi0 = timedomain.initial_wavepacket(K, int(cfg["M"]), lam, grid)
        channels = model.channels(model.params.band_bottom + 0.5
                                  * (model.params.band_top
                                     - model.params.band_bottom))
        bound = [ch.bound_state for ch in channels.dissociation]
        cut = -(support + 10)
        acc = timedomain.FluxAccountant(grid, cut, direction=-1,
                                        bound_states=bound, params=params)
        traj = timedomain.crank_nicolson_propagate(
            H, psi0, float(cfg["dt"]), t_max,
            sample_every=float(cfg["sample_every"]),
            trap_region=(1, trap.wall_site - 1), grid=grid, flux=[acc])
        times = traj.times
        rho_cn = traj.trap
        total, fr, other = timedomain.channel_resolved_flux(traj)
        fractions = {f"diss{ib}": float(np.asarray(val))
                     for ib, val in fr.items()}
        summary["escaped_total"] = float(np.asarray(total))
        summary["escape_fractions"] = {**fractions, "pair": float(np.asarray(other))}

    if method in ("gamov", "both"):
        search = resonances.find_resonances(
            trap, grid=model.default_energy_grid(int(cfg["grid_points"])),
            N0=int(cfg["N0"]), max_poles=int(cfg["max_poles"]), model=model)
        states = [resonances.gamov_state(r, trap, model=model)
                  for r in search.accepted]
        boxgrid = timedomain.Grid2D(model.box.lo, model.box.hi)
        psi_box = timedomain.initial_wavepacket(K, int(cfg["M"]), lam, boxgrid)
        expansion = resonances.expand_initial_state(psi_box, states)
        if times is None:
            times = np.arange(0.0, t_max + 1e-9, float(cfg["sample_every"]))
        rho_g = resonances.nonescape_probability_gamov(expansion, times)
        summary["n_resonances"] = len(states)
        summary["completeness_defect"] = expansion.completeness_defect
        summary["poles"] = [{"z": r.z, "gamma": r.gamma, "B": B}
                            for r, B in expansion.terms]

    if method == "both":
        summary["max_abs_discrepancy"] = float(np.max(np.abs(rho_g - rho_cn)))

    out = cfg["out"] or "decay.csv"
    header = ["t", "t_over_T"]
    cols = [times, times / T]
    if rho_g is not None:
        header.append("rho_gamov")
        cols.append(rho_g)
    if rho_cn is not None:
        header.append("rho_cn")
        cols.append(rho_cn)
    _write_csv(out, header, list(map(list, zip(*[np.asarray(c, dtype=float)
                                                 for c in cols]))))
    _write_json(Path(out).with_suffix(".summary.json"), summary)
    _emit_resolved(cfg, out)
    msg = f"decay: method={method}"
    if "max_abs_discrepancy" in summary:
        msg += f" max|rho_gamov-rho_cn|={summary['max_abs_discrepancy']:.4f}"
    if fractions:
        msg += f" dissociation_fraction={sum(fractions.values()):.3f}"
    print(msg + f" -> {out}")
    return 0


def validation_checks(quick=True, seed=0):
    """The property suite behind `validate`; yields (name, ok, detail, dt)."""
    rng = np.random.default_rng(seed)
    params = LatticeParams()

    t0 = time.time()
    v0 = OnSitePotential.zero()
    worst = 0.0
    for K in (0.3, math.pi / 2, 2.8):
        pr = scattering.channel_probabilities(
            scattering.compute_smatrix(K, v0, N=8, params=params), "dimer_L")
        worst = max(worst, abs(pr.P_t - 1.0))
    yield ("free propagation P_t = 1", worst < 1e-10, f"max|P_t-1|={worst:.2e}",
           time.time() - t0)

    t0 = time.time()
    worst = 0.0
    n_cells = 3 if quick else 10
    for _ in range(n_cells):
        K = rng.uniform(0.15, math.pi - 0.15)
        V = rng.uniform(-3, 2)
        v = OnSitePotential.gaussian(V, 0.65)
        system = scattering.assemble_bordered_system(K, v, 8, {"dimer_L": 1.0},
                                                     params=params)
        chi_b, _ = system.solve()
        sol = scattering.solve_scattering(K, v, 8, {"dimer_L": 1.0},
                                          params=params)
        worst = max(worst, float(np.max(np.abs(chi_b - sol.chi.ravel()))))
    yield ("bordered solve matches H_eff route", worst < 1e-10,
           f"max entry diff={worst:.2e} over {n_cells} cells", time.time() - t0)

    t0 = time.time()
    Ks = np.linspace(0.3, math.pi - 0.3, 3 if quick else 6)
    Vs = np.linspace(-2.5, 1.5, 3 if quick else 6)
    worst = 0.0
    for V in Vs:
        v = OnSitePotential.gaussian(float(V), 0.65)
        for K in Ks:
            sm = scattering.compute_smatrix(float(K), v, N=10, params=params)
            worst = max(worst, sm.unitarity_defect())
    yield ("flux conservation on open channels", worst < 5e-3,
           f"max unitarity defect={worst:.2e} (truncation-limited)",
           time.time() - t0)

    t0 = time.time()
    grid = timedomain.Grid2D(-15, 15)
    H = timedomain.pair_hamiltonian(grid, OnSitePotential.gaussian(-1.0, 0.65),
                                    params)
    psi = timedomain.initial_wavepacket(math.pi / 2, 0,
                                        lattice.dimer_lambda(math.pi / 2), grid)
    traj = timedomain.crank_nicolson_propagate(H.astype(complex), psi, 0.02,
                                               2.0, sample_every=0.02)
    drift = float(np.max(np.abs(np.asarray(traj.norm) - 1.0)))
    yield ("Crank-Nicolson norm conservation", drift < 1e-10,
           f"max drift={drift:.2e} over {len(traj.norm)} samples",
           time.time() - t0)

    t0 = time.time()
    E = np.linspace(-2.8, -2.1, 240)
    zs = [-2.6 - 0.02j, -2.35 - 0.004j]
    g = sum(A / (E - z) for z, A in zip(zs, (1.0, 0.25)))
    samples = resonances.ResponseSamples(E, g, 10)
    cands, _, _ = resonances.harmonic_inversion_fit(samples, 6)
    err = max(min(abs(z - zt) for zt in zs) for z, _ in cands[:2])
    yield ("synthetic harmonic inversion", err < 1e-8, f"pole error={err:.2e}",
           time.time() - t0)


def cmd_validate(cfg):
    failures = 0
    for name, ok, detail, dt in validation_checks(quick=bool(cfg["quick"]),
                                                  seed=int(cfg["seed"])):
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}: {detail} ({dt:.2f}s)")
        failures += 0 if ok else 1
    print(f"validate: {failures} failure(s)")
    return 0 if failures == 0 else EXIT_NUMERICS


# --- argument parsing -----------------------------------------------------------


def _add_shared(p):
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--J", type=float, help="hopping energy")
    p.add_argument("--U", type=float, help="on-site interaction")
    p.add_argument("--V", type=float, help="barrier height / well depth")
    p.add_argument("--sigma", type=float, help="gaussian barrier width (sites)")
    p.add_argument("--N", type=int, help="interior truncation radius")
    p.add_argument("--K", type=float, help="pair quasimomentum")
    p.add_argument("--out", help="output path")
    p.add_argument("--format", choices=("csv", "json"), help="output format")
    p.add_argument("--jobs", type=int, help="parallel workers for sweeps")
    p.add_argument("--seed", type=int, help="seed for randomized checks")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="bhdimer",
        description="Scattering and trap decay of a bound boson pair "
                    "on a 1D lattice.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scatter", help="single (K, V) scattering solve")
    _add_shared(p)

    p = sub.add_parser("sweep", help="(K, V) grid of scattering probabilities")
    _add_shared(p)
    p.add_argument("--K-min", dest="K_min", type=float)
    p.add_argument("--K-max", dest="K_max", type=float)
    p.add_argument("--K-points", dest="K_points", type=int)
    p.add_argument("--V-min", dest="V_min", type=float)
    p.add_argument("--V-max", dest="V_max", type=float)
    p.add_argument("--V-points", dest="V_points", type=int)

    p = sub.add_parser("converge", help="truncation-radius convergence scan")
    _add_shared(p)
    p.add_argument("--N-min", dest="N_min", type=int)
    p.add_argument("--N-max", dest="N_max", type=int)
    p.add_argument("--N-ref", dest="N_ref", type=int)

    p = sub.add_parser("resonances", help="trap resonance hunt")
    _add_shared(p)
    p.add_argument("--wall-site", dest="wall_site", type=int)
    p.add_argument("--open-side", dest="open_side", choices=("left", "right"))
    p.add_argument("--N0", dest="N0", type=int, help="response driving site")
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--max-poles", dest="max_poles", type=int)
    p.add_argument("--selftest", action="store_true", default=None,
                   help="recover a synthetic pole and exit")

    p = sub.add_parser("decay", help="trap non-escape probability")
    _add_shared(p)
    p.add_argument("--wall-site", dest="wall_site", type=int)
    p.add_argument("--open-side", dest="open_side", choices=("left", "right"))
    p.add_argument("--N0", dest="N0", type=int)
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--max-poles", dest="max_poles", type=int)
    p.add_argument("--M", type=int, help="initial packet position")
    p.add_argument("--method", choices=("gamov", "cn", "both"))
    p.add_argument("--t-max-T", dest="t_max_T", type=float)
    p.add_argument("--T-ref", dest="T_ref", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--open-length", dest="open_length", type=int)
    p.add_argument("--absorber-width", dest="absorber_width", type=int)

    p = sub.add_parser("validate", help="run the property self-checks")
    _add_shared(p)
    p.add_argument("--quick", action="store_true", default=None)
    return ap


COMMANDS = {
    "scatter": cmd_scatter,
    "sweep": cmd_sweep,
    "converge": cmd_converge,
    "resonances": cmd_resonances,
    "decay": cmd_decay,
    "validate": cmd_validate,
}


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BhdimerError as exc:
        print(f"numerical failure ({type(exc).__name__}): {exc}",
              file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
