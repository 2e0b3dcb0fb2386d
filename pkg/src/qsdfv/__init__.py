"""Quasi-stationary distributions and Fleming-Viot particle approximations."""

from .chain import (
    ABSORBING_LABEL,
    AbsorptionSample,
    ChainError,
    ChainSpecError,
    ChainSummary,
    Distribution,
    RateMatrix,
    ReducibleChainWarning,
    StateSpace,
    SubKernel,
    asymmetric_walk,
    characteristics,
    load_chain_spec,
    resolvent,
    semigroup,
    simulate_absorbing_chain,
    two_state_example,
    validate_chain,
)
from .conditioned import (
    ConditionedPath,
    ConditioningError,
    ConvergenceError,
    OdeStepError,
    YaglomResult,
    phi_ode,
    phi_semigroup,
    yaglom_iterate,
)
from .fv import (
    MomentEstimate,
    Occupation,
    ParticleConfiguration,
    TypeBoundReport,
    TypeLedger,
    check_type_bound,
    estimate_profile,
    estimate_stationary,
    fv_init,
    fv_run,
)
from .graphical import (
    AncestrySet,
    CouplingState,
    EventWindow,
    MarkedEvent,
    PerfectSamplingError,
    ancestry_backward,
    coupled_ancestry,
    estimate_I_probability,
    evolve_forward,
    generate_window,
    perfect_sample,
)
from .qsd import QsdResult, qsd_power, qsd_residual, qsd_via_yaglom

__version__ = "0.1.0"
