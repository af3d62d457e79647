//! Functional data analysis of sparse, irregular longitudinal performance
//! series ("aging curves").
//!
//! The crate fits penalized B-spline curves per subject, decomposes curve
//! ensembles with dense-grid functional PCA or, for sparse data, with
//! principal analysis by conditional expectation, and provides the
//! downstream analytics: permutation tests on component scores, k-means with
//! a permutation-null reference for choosing the cluster count, classical
//! tests and curve summaries.

pub mod basis;
pub mod cli;
pub mod cluster;
pub mod curveops;
pub mod error;
pub mod fpca;
pub mod ingest;
pub mod inference;
pub mod pace;
pub mod quadrature;
pub mod rng;
pub mod simulate;
pub mod smooth;
pub mod special;

pub use basis::{eval_basis, make_basis, penalty_matrix, BasisSpec};
pub use error::{Error, Result};
pub use smooth::{demean, eval_curve, fit_penalized, select_lambda_gcv, PlayerSeries, SmoothedCurve};
