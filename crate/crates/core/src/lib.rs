//! Penalized functional mixed-effects models for replicated short time series.
//!
//! Each response unit ("gene") is modelled independently as
//! `y_i(t) = μ(t) ± α(t) ± β(t) + γ_i(t) + ε`, with the fixed curves `μ, α, β`
//! and the random individual curves `γ_i` represented by their values at the
//! design time points and penalized for roughness through cubic smoothing
//! splines. Variance components come from EM, smoothing parameters from an
//! AIC/BIC simplex search, effects are tested with pooled permutation nulls,
//! and the fitted mean curves feed a discretized functional PCA.

/// Version of this crate.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod error;
pub mod estimation;
pub mod fpca;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod seed;
pub mod selection;
pub mod simulate;
pub mod spline;

pub use error::{Factor, FmemError, Result};
pub use estimation::{blue_blup, e_step, fit_em, m_step, EStep, Effects, EmOptions, MStep, ModelFit};
pub use fpca::{decompose, discretize, CurveMatrix, FpcaResult, Normalization, Retention};
pub use inference::{
    bh_fdr, bootstrap_bands, build_null_pool, empirical_pvalue, test_effect, theoretical_bands,
    BandMethod, BootstrapOptions, ConfidenceBand, Curve, Effect, NullConfig, NullInput, NullPool,
    NullScope, SpPolicy, TemporalScheme, TestResult,
};
pub use model::{
    assemble, gll, pgll, AgeGroup, AssembledModel, Gender, GeneDataset, IndividualSeries,
    SmoothingParameters, VarianceComponents,
};
pub use selection::{
    degrees_of_freedom, score, select, select_and_fit, smoother_matrices, Criterion,
    SelectionOptions, SelectionResult, SmootherMatrices,
};
pub use simulate::{generate, GroundTruth, SimIndividual, SimulationSpec};
pub use spline::{
    build_incidence, build_roughness, l2_norm, roughness_functional, IncidenceMatrix,
    NaturalCubicSpline, RoughnessMatrix, TimeGrid,
};
