"""Boundary control of 1-D linear hyperbolic systems.

Tools for simulating n x n linear hyperbolic systems on the unit interval
with controls acting on one side, synthesizing minimal-norm boundary
controls, estimating observability constants, and characterizing the space
of initial states that cannot be steered to zero in a given time.
"""

from .errors import (
    ConfigurationError,
    ConstructionError,
    HyperctrlError,
    PreconditionError,
    SolverConvergenceError,
)
from .system import (
    BoundaryMatrix,
    CouplingField,
    SpeedProfile,
    SystemSpec,
    augment_system,
    load_system,
    optimal_time,
    time_reversal_dual_system,
    travel_time,
)
from .fields import PicardReport, SolutionField
from .rectangle_solver import boundary_observation, solve_adjoint, solve_forward
from .duality import (
    PairingReport,
    adjoint_identity_check,
    adjoint_map,
    forward_map,
    pairing_battery,
    pairing_check,
)
from .controllability import (
    ControlSolution,
    GramianOperator,
    assemble_gramian,
    hum_control,
    low_mode_projector,
    null_controllability_verdict,
    observability_constant,
    observability_scan,
)
from .omega_solver import (
    q_matrix,
    solve_omega,
    solve_rectangle_hat,
    stability_constant,
)
from .characteristics import CharacteristicFlow, OmegaCurve, omega_boundary
from .counterexample import (
    Bump,
    CounterexampleSpec,
    WitnessReport,
    build_dual_witness,
    commensurate_steps,
    observability_failure_scan,
    witness_initial_state,
    witness_terminal_state,
)

__version__ = "0.1.0"

__all__ = [
    "HyperctrlError",
    "ConfigurationError",
    "PreconditionError",
    "SolverConvergenceError",
    "ConstructionError",
    "SpeedProfile",
    "BoundaryMatrix",
    "CouplingField",
    "SystemSpec",
    "travel_time",
    "optimal_time",
    "time_reversal_dual_system",
    "augment_system",
    "load_system",
    "SolutionField",
    "PicardReport",
    "solve_forward",
    "solve_adjoint",
    "boundary_observation",
    "PairingReport",
    "forward_map",
    "adjoint_map",
    "pairing_check",
    "adjoint_identity_check",
    "pairing_battery",
    "GramianOperator",
    "ControlSolution",
    "assemble_gramian",
    "observability_constant",
    "low_mode_projector",
    "null_controllability_verdict",
    "hum_control",
    "observability_scan",
    "CharacteristicFlow",
    "OmegaCurve",
    "omega_boundary",
    "q_matrix",
    "solve_omega",
    "solve_rectangle_hat",
    "stability_constant",
    "Bump",
    "CounterexampleSpec",
    "WitnessReport",
    "build_dual_witness",
    "commensurate_steps",
    "observability_failure_scan",
    "witness_initial_state",
    "witness_terminal_state",
    "__version__",
]
