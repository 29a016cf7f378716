//! Numerical laboratory for coupled Kähler-Einstein metrics on toric Fano
//! surfaces: Ricci potentials, the coupled Futaki invariant, the linearized
//! operator and its kernel, a projected Newton continuation in the class
//! parameter, and asymptotic-order analysis of the obstruction function.

pub mod analysis;
pub mod background;
pub mod continuation;
pub mod curvature;
pub mod error;
pub mod geom;
pub mod grid;
pub mod linalg;
pub mod obstruction;
pub mod report;

pub use background::{catalog, find_background, Decomposition, KaehlerClass, ToricBackground};
pub use curvature::{
    cke_residual, h_eta, harmonic_representative, i_eta, make_deformation, reference_metric_tuple,
    ricci_potential, trace_free_basis, HarmonicDeformation, MetricTuple, RicciPotentialTuple,
};
pub use error::{CkeError, Result};
pub use grid::{
    ddbar, integrate, pairing, poisson_solve, trace, FormField, Grid, PotentialVector,
    ScalarField, VolumeDensity,
};
pub use obstruction::{
    check_nondegeneracy, futaki_coupled, holomorphic_potential, kernel_basis, linearized_l,
    project_perp, project_z, HolomorphicField, KernelBasis, NondegeneracyReport,
};
pub use continuation::{
    continue_in_t, curly_f, operator_f, ricci_iteration_start, solve_branch, BranchPoint,
    ContinuationTrace, NewtonSettings, ProjectedResidual,
};
pub use analysis::{almost_cke_check, fit_expansion, predicted_order2, predicted_order4, ExpansionReport};
