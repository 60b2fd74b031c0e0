//! Semi-supervised 3D multi-output segmentation at desk scale.
//!
//! The crate covers the full pipeline: volume storage and synthetic
//! vascular phantoms, CT-style intensity preprocessing, exact seeded
//! spatial augmentation, Dice/focal losses, a compact multi-head 3D
//! segmentation network with hand-rolled backprop, EMA-teacher
//! pseudo-labeling, the training loop and a cross-validated experiment
//! harness with CSV reports.

pub mod augment;
pub mod checkpoint;
pub mod ema;
pub mod error;
pub mod experiments;
pub mod io;
pub mod losses;
pub mod network;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod seed;
pub mod trainer;
pub mod volume;

pub use error::{Result, SegError};
