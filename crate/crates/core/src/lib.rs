//! Semi-supervised volumetric segmentation toolkit.
//!
//! Two light UNets (depthwise-separable convolutions with residual blocks)
//! are trained jointly: each learns from labeled patches and from the other's
//! pseudo-labels on CutMix-blended unlabeled patches. The crate also carries
//! the robust segmentation loss, sliding-window inference, DSC/NSD metrics and
//! a synthetic phantom generator.

pub mod error;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod ssl;
pub mod volume;

pub use error::{Error, Result};
pub use nn::{build_network, count_parameters, NetworkSpec, NetworkState, ProbField};
pub use volume::{LabelVolume, PatchSpec, Volume};

/// Environment variable that forces single-threaded reference mode.
pub const DETERMINISTIC_ENV: &str = "SSL_SEG_DETERMINISTIC";

/// Limits the global thread pool to one thread when `SSL_SEG_DETERMINISTIC=1`.
/// Must run before any parallel work; later calls are no-ops.
pub fn configure_threads() {
    if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1") {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
}
