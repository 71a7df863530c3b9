//! Video person re-identification: part features aligned to a quality-selected reference frame.
//!
//! Frames go through a small convolutional backbone. A global branch pools
//! each frame and fuses frames with learned temporal weights. A reference
//! frame, chosen by a learned quality score, is cut into head, body and leg
//! regions from keypoints; the pooled region features steer relation
//! attention over every frame, giving three aligned part features. The four
//! features are trained with batch-hard triplet and cross-entropy losses
//! and an inter-frame consistency penalty, and evaluated by Euclidean
//! retrieval (CMC, mAP).

pub mod ablate;
pub mod backbone;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gfe;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod pfd;
pub mod retrieval;
pub mod rfl;
pub mod rng;
pub mod synth;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
