//! Verifier-guided refinement for compositional text-to-image generation.
//!
//! A prompt is compiled into a typed visual program, each candidate image is
//! checked predicate by predicate, and a controller routes failures to targeted
//! edits or to resampling under a fixed execution budget.

pub mod backends;
pub mod controller;
pub mod evidence;
pub mod normalize;
pub mod num;
pub mod program;
pub mod relation;
pub mod rewrites;
pub mod runner;
pub mod synth;
pub mod verify;

pub use controller::{ControllerConfig, Refinement, Refiner, Variant};
pub use program::{compile, ParsedBuckets, VisualProgram};
pub use relation::Status;
pub use verify::{StateVector, Verifier, VerifierConfig};

pub type BBox32 = evidence::BBox<f32>;
pub type BBox64 = evidence::BBox<f64>;
pub type Footprint32 = evidence::Footprint<f32>;
pub type Footprint64 = evidence::Footprint<f64>;
pub type RelationScore32 = relation::RelationScore<f32>;
pub type RelationScore64 = relation::RelationScore<f64>;
pub type Thresholds32 = relation::Thresholds<f32>;
pub type Thresholds64 = relation::Thresholds<f64>;
