//! Spatio-temporal Bayesian extreme-value modelling.
//!
//! Gumbel, GEV and Gaussian observation models whose location parameter
//! combines fixed effects with SPDE–Matérn spatial fields and AR(1) temporal
//! dynamics, fitted by a Laplace-approximation engine and evaluated with
//! DIC, WAIC, CPO/LS, PIT and hold-out metrics. Excursion functions turn a
//! fitted model into hot-spot maps.
//!
//! The numerical kernels ([`mesh`], [`fem`], [`sparse`], [`spde`],
//! [`temporal`], [`likelihoods`], [`priors`]) are generic over [`Real`];
//! model fitting and everything downstream runs in `f64`. The aliases below
//! name the `f64` instantiations used by the rest of the crate.

pub mod artifact;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod excursion;
pub mod fem;
pub mod inference;
pub mod joint;
pub mod likelihoods;
pub mod mesh;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod priors;
pub mod real;
pub mod sparse;
pub mod spde;
pub mod temporal;

pub use error::{Error, Result};
pub use real::Real;

pub type Mesh = mesh::TriangularMesh<f64>;
pub type Fem = fem::FemMatrices<f64>;
pub type Projection = mesh::ProjectionMatrix<f64>;
pub type Precision = spde::SparsePrecision<f64>;
pub type Matern = spde::MaternParams<f64>;
pub type Ar1 = temporal::Ar1Params<f64>;
