//! Natural-language vehicle retrieval: a dual-branch model that embeds
//! tracked-vehicle clips and caption triplets into one space and ranks
//! tracks by distance to a query.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the precision for common use.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pca;
pub mod retrieval;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod text;
pub mod training;
pub mod visual;

pub use error::{Error, Result};
pub use metrics::{Aggregation, DistanceMatrix, IntraInterReport, Metric, Ranking, RankingTable};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
