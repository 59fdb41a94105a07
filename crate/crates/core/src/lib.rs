//! Numerical toolkit for constant-rank linear differential operators:
//! principal symbols and wave cones, Fourier-multiplier projections on the
//! torus, quasiconvex envelopes, and a discrete calculus of generalized
//! Young measures.

pub mod approximation;
pub mod error;
pub mod gallery;
pub mod integrand;
pub mod io;
pub mod linalg;
pub mod operator;
pub mod quasiconvexity;
pub mod spectral;
pub mod young;

pub use approximation::{
    afree_correct, area_strict_run, bgradient_run, circle_measure, mollify, ApproximationRun,
    ApproximationStage, BGradientRun, Mollifier,
};
pub use error::{Error, Result};
pub use integrand::{Integrand, IntegrandKind, SpatialWeight};
pub use operator::{
    constant_rank_audit, exactness_check, image_cone_membership, require_constant_rank,
    wave_cone_membership, ConeReport, ExactnessReport, LinearOperator, Membership, MultiIndex,
    SymbolMatrix, Term,
};
pub use quasiconvexity::{
    cell_energy, cell_energy_gradient, coercivity_bound_check, lambda_convexity_check,
    quasiconvex_envelope, CellSpace, EnvelopeConfig, EnvelopeResult,
};
pub use spectral::{
    a_representative, afree_part, apply_operator, decompose, poincare_check, potential_solve,
    sobolev_norm, Decomposition, SobolevNormSpec, Spectrum, TorusField,
};
pub use young::{
    area_functional, barycenter, concentration_builder, default_qc_family, divergence_flexibility,
    elementary, generation_estimate, jensen_certificate, pairing, shift, Atom, CertificateConfig,
    CertificateReport, ConcentrationConfig, ConcentrationRun, DiscreteMeasure,
    DiscreteYoungMeasure, FlexibilityResult, GridBox, LambdaAtom, LambdaSpec, Probability,
    QcMember, YoungCell,
};
