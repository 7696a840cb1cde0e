"""Scattering and trap decay of a bound boson pair on a 1D lattice."""

from .lattice import (
    BoundState,
    ChannelSet,
    DimerChannel,
    DissociationChannel,
    LatticeParams,
    OnSitePotential,
    build_channel_set,
    dimer_dispersion,
    dimer_group_velocity,
    dimer_lambda,
    dissociation_momentum,
    invert_dimer_dispersion,
    single_particle_bound_states,
)
from .scattering import (
    InteriorBox,
    SMatrix,
    ScatteringProbabilities,
    assemble_bordered_system,
    build_effective_hamiltonian,
    channel_probabilities,
    compute_smatrix,
    convergence_scan,
    solve_scattering,
    sweep_KV,
)
from .resonances import (
    DecayExpansion,
    GamovState,
    Resonance,
    ResponseSamples,
    TrapConfig,
    TrapModel,
    build_trap_heff,
    expand_initial_state,
    find_resonances,
    gamov_state,
    harmonic_inversion_fit,
    nonescape_probability_gamov,
    refine_pole,
    response_function,
)
from .timedomain import (
    Absorber,
    FluxAccountant,
    Grid2D,
    Trajectory,
    channel_resolved_flux,
    crank_nicolson_propagate,
    initial_wavepacket,
    moving_wavepacket,
    nonescape_probability_direct,
    pair_hamiltonian,
    wavepacket_scattering_oracle,
)

__version__ = "0.1.0"
