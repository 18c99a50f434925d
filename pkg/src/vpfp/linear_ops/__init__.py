from .singular import (
    CONTRACTION_EXPONENTS,
    ContractionResult,
    GronwallResult,
    contraction_integral,
    contraction_probe,
    gronwall_envelope,
    gronwall_weights,
    henry_gronwall_iterate,
    predicted_iterations,
    singular_beta_integral,
)
from .duhamel import (
    FieldSampler,
    GridError,
    GridFunction,
    PhaseGrid,
    WeightedKernelNorm,
    apply_T,
    energy_identity_residual,
)
from .propagator import (
    PropagatorTable,
    TableLayout,
    apply_T3,
    bridge,
    build_gamma,
    empty_table,
    fixed_point_residual,
    kernel_frame,
    picard_step,
    x_distance,
)
from .lattice import (
    LatticeGamma,
    SourceLattice,
    apply_T2,
    build_lattice_gamma,
    compose_gamma,
    source_gradient_ratio,
    t2_lattice,
)
