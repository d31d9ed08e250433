//! Photo-to-photo style transfer trained on a single image pair.
//!
//! Two feed-forward networks are trained from scratch against each other:
//! one renders images in the style of photo A, the other in the style of
//! photo B. Content is preserved through cycle-consistency (a round trip
//! through both networks reproduces the input) and self-consistency (each
//! network leaves its own style's photo unchanged), while Gram-matrix
//! distances on deep features drive the stylization. The two networks share
//! one convolutional trunk and differ only in instance-normalization
//! parameters, which also makes cheap restyling possible by retraining just
//! those parameters. Semantic region masks route each region through its own
//! normalization set so styles do not bleed across region boundaries.

pub mod archive;
pub mod backbone;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod image_io;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod regions;
pub mod rng;
pub mod stylenet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
