//! Named-entity disambiguation over a structured knowledge base.
//!
//! Candidates for each mention are represented by fusing a learned entity
//! embedding with type and relation embeddings, then refined by three
//! attention modules: candidates attending to words, to each other, and to
//! knowledge-graph neighbours. Entity embeddings are masked during training
//! with a probability that falls with entity popularity so rare entities
//! lean on structural signals.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix the
//! precision used by the model, trainer and tools.

pub mod attention;
pub mod corpus;
pub mod encoder;
pub mod evalsuite;
pub mod fusion;
pub mod kb;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod syncorpus;
pub mod trainer;
pub mod weaklabel;

pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type Model64 = model::Model<f64>;
