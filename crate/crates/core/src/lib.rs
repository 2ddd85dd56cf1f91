//! Gradient inversion attacks against spatiotemporal federated learning and
//! location-privacy defenses against them.
//!
//! The crate is organised bottom-up:
//!
//! * [`geo`] and [`network`]: coordinates, projection, grid labels, road graph.
//! * [`model`]: the local next-location model, its parameter gradients and
//!   the second-order gradient of the gradient-matching objective.
//! * [`fed`]: FedAvg training that captures every client gradient.
//! * [`attack`]: ST-GIA gradient matching with spatiotemporal initialization,
//!   road-network mapping and calibration across recoveries.
//! * [`predictor`]: candidate-set guided ST-GIA+ (Markov or remote predictor).
//! * [`defense`]: PGEM, planar Laplace, graph exponential mechanism, DP-SGD
//!   and the risk-adaptive budget allocation.
//! * [`metrics`]: attack distance, attack iterations, attack risk, recall@k.
//! * [`data`], [`config`], [`experiment`]: ingestion, synthetic data and
//!   end-to-end runs.

pub mod error;
pub mod geo;
pub mod model;
pub mod network;
pub mod rng;
pub mod fed;
pub mod predictor;
pub mod attack;
pub mod data;
pub mod defense;
pub mod metrics;
pub mod config;
pub mod experiment;

pub use error::{Error, Result};
pub use geo::{BBox, GeoPoint, GridIndex, StampedPoint, Trajectory};
pub use model::{DummyState, GradVector, Model, ModelSpec, ParamVector};
pub use network::{NodeId, RoadNetwork};
