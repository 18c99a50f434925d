from .state import (
    BASE_COLUMNS,
    CFLError,
    Diagnostics,
    DomainError,
    ParticleEnsemble,
    PhaseDensity,
    Scheme,
    SolverConfig,
    TestFunction,
)
from .grid_scheme import boundary_mass, free_step, kick, step_split
from .run import (
    RunAborted,
    Trajectory,
    particle_normals,
    particle_run,
    run,
    sample_heavy_tail,
    sample_maxwellian,
)
from .analysis import (
    MomentSlack,
    RegularityCheck,
    UniquenessResult,
    gronwall_constant,
    moment,
    moment_inequality_check,
    refinement_ratios,
    uniqueness_experiment,
    velocity_regularity_check,
    weak_residual,
)
