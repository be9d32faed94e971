"""Spectral simulation and control synthesis for incompressible flow on T^2."""

from .fields import (
    SpectralScalarField,
    SpectralVectorField,
    TrajectoryRecord,
    curl,
    leray_project,
    nonlinear_term,
    relaxation_norm,
    remove_streamwise_average,
    sobolev_norm,
    stream_solve,
)
from .modes import (
    ModeSpace,
    NotInExtension,
    TrigMode,
    TrigModeCombination,
    advection_bilinear,
    advection_exact,
    extend_space,
    is_saturating,
    nonlinear_term_exact,
    represent_in_extension,
    saturation_chain,
)
from .solvers import (
    SolverBlowup,
    advdiff_solve,
    euler_solve,
    flow_diagnostics,
    shear_advdiff_propagate,
    shear_block_matrix,
    shifted_record,
)
from .lagrangian import (
    area_defect,
    flow_map,
    integrate_mean,
    max_displacement,
    transport_solve,
)
from .synthesis import (
    CascadeConfig,
    CascadeReport,
    ControlSignal,
    RampTarget,
    synthesize_tracking_control,
)
from .localized import (
    ControlRegion,
    FixedPointReport,
    FixedPointResult,
    GlobalControlResult,
    ShearDecayRow,
    ShearProfile,
    ShearRelaxationReport,
    SmallnessViolation,
    TubeViolation,
    assemble_velocity_control,
    builtin_shear,
    control_replay,
    curl_integrate,
    fixed_point_solve,
    flushing_field,
    global_exact_control,
    linear_vorticity_control,
    mass_fraction_outside,
    shear_relaxation_experiment,
    strip_charges,
    vorticity_residual,
)

__version__ = "0.1.0"

__all__ = [
    "CascadeConfig",
    "CascadeReport",
    "ControlRegion",
    "ControlSignal",
    "FixedPointReport",
    "FixedPointResult",
    "GlobalControlResult",
    "ModeSpace",
    "NotInExtension",
    "RampTarget",
    "ShearDecayRow",
    "ShearProfile",
    "ShearRelaxationReport",
    "SmallnessViolation",
    "SolverBlowup",
    "SpectralScalarField",
    "SpectralVectorField",
    "TrajectoryRecord",
    "TrigMode",
    "TrigModeCombination",
    "TubeViolation",
    "advdiff_solve",
    "advection_bilinear",
    "advection_exact",
    "area_defect",
    "assemble_velocity_control",
    "builtin_shear",
    "control_replay",
    "curl",
    "curl_integrate",
    "euler_solve",
    "extend_space",
    "fixed_point_solve",
    "flow_diagnostics",
    "flow_map",
    "flushing_field",
    "global_exact_control",
    "integrate_mean",
    "is_saturating",
    "leray_project",
    "linear_vorticity_control",
    "mass_fraction_outside",
    "max_displacement",
    "nonlinear_term",
    "nonlinear_term_exact",
    "relaxation_norm",
    "remove_streamwise_average",
    "represent_in_extension",
    "saturation_chain",
    "shear_advdiff_propagate",
    "shear_block_matrix",
    "shear_relaxation_experiment",
    "shifted_record",
    "sobolev_norm",
    "stream_solve",
    "strip_charges",
    "synthesize_tracking_control",
    "transport_solve",
    "vorticity_residual",
    "__version__",
]
