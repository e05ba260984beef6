//! Long-tail recommendation with hyperbolic graph propagation, Tucker KG
//! embeddings, SVD-initialized features and contrastive view alignment.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod linalg;
pub mod manifold;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod svd;
pub mod training;
pub mod tucker;

pub use config::{Preset, TrainConfig};
pub use data::{InteractionDataset, KnowledgeGraph, SyntheticSpec, Triple};
pub use error::{Error, Result};
pub use linalg::{Csr, Matrix};
pub use manifold::{Curvature, LorentzPoint, TangentVector};
pub use metrics::{EvalReport, Scorer, Target};
pub use model::{Model, ModelState};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Csr64 = Csr<f64>;
pub type Curvature64 = Curvature<f64>;
pub type LorentzPoint64 = LorentzPoint<f64>;
pub type TangentVector64 = TangentVector<f64>;
pub type Model64 = Model<f64>;
pub type ModelState64 = ModelState<f64>;
pub type Model32 = Model<f32>;
