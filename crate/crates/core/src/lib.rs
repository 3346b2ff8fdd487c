//! Geometry contrastive learning on heterogeneous graphs.
//!
//! Two geometric encoders (a Euclidean GCN-style encoder and a hyperbolic
//! encoder aggregating in the tangent space of the Poincaré ball) embed
//! stochastic views of a meta-path heterogeneous graph. Training maximizes
//! local-local and local-global agreement between the two views with
//! bilinear discriminators and a binary cross-entropy estimator.
//!
//! The numeric core ([`ndtensor`], [`manifold`], [`encoders`],
//! [`contrast`], [`trainer`]) is generic over the scalar type through
//! [`Real`]; the aliases at the crate root fix it to `f64`.

pub mod augment;
pub mod contrast;
pub mod encoders;
pub mod evalkit;
pub mod hetgraph;
pub mod manifold;
pub mod ndtensor;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod sparse;
pub mod trainer;

pub use scalar::Real;

pub type Tensor = ndtensor::Tensor<f64>;
pub type Tape = ndtensor::Tape<f64>;
pub type ParamSet = ndtensor::ParamSet<f64>;
pub type AdamState = ndtensor::AdamState<f64>;
pub type Checkpoint = ndtensor::Checkpoint<f64>;
pub type BallConfig = manifold::BallConfig<f64>;
pub type PoincarePoint = manifold::PoincarePoint<f64>;


pub type Model = encoders::Model<f64>;
pub type TrainOutcome = trainer::TrainOutcome<f64>;
