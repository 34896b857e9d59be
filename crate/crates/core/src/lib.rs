//! Layerwise probing, two-stage cross-domain adaptation and per-emotion
//! Fréchet audio distance over cached self-supervised audio embeddings.
//!
//! The pipeline reads per-layer frame embeddings for speech and sung
//! recordings ([`store`]), pools them over time ([`pooling`]), and then
//! either trains one linear probe per layer ([`probe`]), adapts a classifier
//! from one domain to the other ([`adaptation`], optionally through
//! parameter-efficient modules on a frozen encoder, [`adapter`]), or
//! measures the distance between the domains' embedding distributions
//! ([`fad`]). [`report`] and [`experiment`] turn results into CSV, JSON and
//! SVG artifacts.

pub mod adaptation;
pub mod adapter;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fad;
pub mod labels;
pub mod optim;
pub mod pooling;
pub mod probe;
pub mod report;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use labels::{Domain, Emotion, Split, Task, NUM_CLASSES};
