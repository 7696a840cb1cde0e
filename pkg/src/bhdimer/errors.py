"""Exception types shared by the solver modules."""


class BhdimerError(Exception):
    """Base class for all solver errors."""


class DegenerateMomentum(BhdimerError):
    """Pair quasimomentum at a band edge where 1/sin factors diverge."""


class OutOfBand(BhdimerError):
    """Requested energy lies outside the bound-pair band."""


class PoorLocalization(BhdimerError):
    """A single-particle bound state leaks out of the computation window."""


class ZeroVelocity(BhdimerError):
    """Open dissociation channel exactly at threshold (vanishing group velocity)."""


class SingularSystem(BhdimerError):
    """Interior linear system is (numerically) rank deficient."""


class ClosedChannel(BhdimerError):
    """Operation requested for a channel that carries no flux."""


class ContinuationError(BhdimerError):
    """Complex energy outside the trusted analytic-continuation region."""


class FitDiverged(BhdimerError):
    """Rational fit of the response failed at every model order."""


class NoConvergence(BhdimerError):
    """Pole refinement did not converge (candidate treated as spurious)."""


class DegeneratePole(BhdimerError):
    """Two near-null singular directions at one pole."""


class IllConditionedExpansion(BhdimerError):
    """Gamov-state overlap system too ill-conditioned to trust."""


class EmptyState(BhdimerError):
    """Initial wave packet annihilated by the hard wall."""


class SolveFailure(BhdimerError):
    """Sparse linear solve broke down during time propagation."""


class InsufficientSeparation(BhdimerError):
    """Wave packet too wide for the requested scattering geometry."""


class ProjectionLeak(UserWarning):
    """Channel projectors at a flux cut overlap more than expected."""
