"""Measurement-conditioned quantum trajectories for collision-model environments."""

__version__ = "0.1.0"

from .basis import (
    BasisEnumeration,
    CapacityError,
    DensityMatrix,
    ModeLayout,
    OccupationState,
    PureState,
    SparseOperator,
    enumerate_basis,
    expectation,
    mode_lowering,
    partial_trace_system,
)
from .collision import (
    Homodyne,
    HomodyneEigensystem,
    MeasurementError,
    MeasurementOutcome,
    Photodetection,
    apply_shift,
    homodyne_eigensystem,
    homodyne_probabilities,
    measure_homodyne,
    measure_photo,
    photo_probabilities,
    prepare_lo,
    sample_outcome,
)
from .engine import (
    CountingSpec,
    EnsembleStats,
    StepRecord,
    Trajectory,
    TrajectoryConfig,
    histogram,
    integrated_record,
    run_ensemble,
    run_trajectory,
)
from .model import (
    CouplingProfile,
    DrivenQubit,
    ExponentialCoupling,
    PointCoupling,
    RawCoupling,
    SpectralProfile,
    Squeezer,
    TwoPointFeedback,
    build_coupling,
    build_interaction,
    build_system_h,
    coupling_spectrum,
    lorentzian_density,
)
from .oracles import (
    CalibrationError,
    DDECoefficients,
    DDESpec,
    LindbladSpec,
    McwfConfig,
    calibrate_feedback_dde,
    feedback_dde,
    jc_pseudomode,
    lindblad_solve,
    mcwf_ensemble,
    mcwf_homodyne,
    mcwf_photodetection,
    qubit_population,
    single_excitation_schrodinger,
)
from .propagator import PropagatorConfig, PropagatorError, evolve
