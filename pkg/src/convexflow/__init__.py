"""Spectral convex-integration engine for weak incompressible Euler flows.

The package builds and manipulates subsolutions of the incompressible Euler
equations on the periodic box [0, 2pi)^3 and sharpens them by adding
high-frequency corrugations (straight-tube "Mikado" fields advected by the
coarse flow, and time-windowed Beltrami waves), driving the Reynolds stress
to zero while tracking every estimate numerically.

Layout:

    fields            periodic scalar/vector/symmetric-tensor fields, norms
    invdiv            order(-1) inverse divergence, oscillatory integrals
    decompose         positive tensors as positive combinations of rank-1 /
                      Beltrami building blocks, with certified radii
    mikado            divergence-free tube flows with prescribed moments
    subsolution       trajectory container, lifting, residual audits
    perturb_mikado    flow maps, the single advected-Mikado step,
                      strict-to-strong driver
    perturb_beltrami  cutoff partitions, Beltrami modes, the windowed step
    schedule          double-exponential parameter ladders in log domain
    driver            multi-stage iteration drivers and the demo pipeline
    cli               command line front end
"""

from convexflow.fields import GridSpec, PeriodicField, NormReport
from convexflow.decompose import (
    SpdMatrix,
    NsetDescriptor,
    DecompositionBasis,
    RadiusLadder,
    build_nash_basis,
    build_beltrami_basis,
    evaluate_coefficients,
)
from convexflow.mikado import (
    MikadoFamily,
    TubeGeometry,
    RadialProfile,
    PlacementError,
    BandwidthError,
    build_mikado,
    place_tubes,
    transverse_basis,
    tube_distance,
    self_distance,
    certify_tube_distances,
    evaluate_W,
    evaluate_W_from_coefficients,
    evaluate_potential,
    moment_report,
)
from convexflow.subsolution import (
    SubsolutionFrame,
    SubsolutionTrajectory,
    Violation,
    ClassificationReport,
    ResidualReport,
    classify,
    fit_adapted_constant,
    lift,
    leray_pressure,
    material_stress_rate,
    residual_audit,
    admissibility_check,
    save_trajectory,
    load_trajectory,
)

__all__ = [
    "GridSpec",
    "PeriodicField",
    "NormReport",
    "SpdMatrix",
    "NsetDescriptor",
    "DecompositionBasis",
    "RadiusLadder",
    "build_nash_basis",
    "build_beltrami_basis",
    "evaluate_coefficients",
    "MikadoFamily",
    "TubeGeometry",
    "RadialProfile",
    "PlacementError",
    "BandwidthError",
    "build_mikado",
    "place_tubes",
    "transverse_basis",
    "tube_distance",
    "self_distance",
    "certify_tube_distances",
    "evaluate_W",
    "evaluate_W_from_coefficients",
    "evaluate_potential",
    "moment_report",
    "SubsolutionFrame",
    "SubsolutionTrajectory",
    "Violation",
    "ClassificationReport",
    "ResidualReport",
    "classify",
    "fit_adapted_constant",
    "lift",
    "leray_pressure",
    "material_stress_rate",
    "residual_audit",
    "admissibility_check",
    "save_trajectory",
    "load_trajectory",
]

__version__ = "0.1.0"
