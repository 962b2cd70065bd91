pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod data;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod evalharness;
pub mod files;
pub mod numerics;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod simenv;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Agent64 = agent::Agent<f64>;
pub type Agent32 = agent::Agent<f32>;
pub type Trainer64 = agent::Trainer<f64>;
pub type Trainer32 = agent::Trainer<f32>;
pub type DenseNet64 = numerics::DenseNet<f64>;
pub type DenseNet32 = numerics::DenseNet<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type QEnsemble64 = ensemble::QEnsemble<f64>;
pub type QEnsemble32 = ensemble::QEnsemble<f32>;
