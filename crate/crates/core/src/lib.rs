//! Automated tumor proliferation scoring for whole-slide breast histopathology.
//!
//! Stages, in pipeline order:
//!
//! 1. [`tissue`]: thumbnail, Otsu threshold, dilation, tissue blobs.
//! 2. [`patches`]: square 10-HPF patch grid over the blobs.
//! 3. [`roi`]: nucleus counting and top-K ROI ranking.
//! 4. [`stain`]: Macenko stain normalization of the ROIs.
//! 5. [`detect`]: mitosis detection with valid-region sliding inference.
//! 6. [`scoring`]: slide feature vector and RBF support vector machines.
//!
//! [`eval`] holds the detection F1, weighted kappa and Spearman metrics and
//! [`pipeline`] wires the stages together over a run directory.

pub mod bench;
pub mod detect;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod morph;
pub mod patches;
pub mod pipeline;
pub mod pixmap;
pub mod pnm;
pub mod roi;
pub mod scoring;
pub mod slide;
pub mod stain;
pub mod stats;
pub mod synth;
pub mod tissue;

pub use error::{Error, Result};
pub use pixmap::Pixmap;
