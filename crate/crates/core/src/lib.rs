//! Boundary-aligned moment detection for temporal sentence grounding.
//!
//! A moment is predicted as an anchor point inside it plus distances to its two
//! boundaries. The model encodes clip features against the sentence, refines
//! anchors and boundaries through dual-pathway decoder layers, matches
//! predictions to ground truth by localization cost alone, and ranks proposals
//! by a learned estimate of their IoU.

mod error;

pub use error::{Error, Result};

pub mod decoder;
pub mod encoder;
pub mod harness;
pub mod intervals;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod sample;

pub use intervals::{CenterLength, MomentSpan, MomentTriplet};
pub use model::{BamDetr, ModelConfig, Prediction};
pub use sample::{Batch, FeatureMatrix, Sample};
