//! Pure algorithmic core of SAMIC, an in-context point-prompt predictor for
//! promptable segmenters.
//!
//! Everything here is `no_std` + `alloc`: the point-prompt/heatmap codec, the
//! saliency losses and their gradients, the 4D-correlation network with
//! hand-written backward passes, Adam, segmentation metrics, fold and episode
//! sampling, and k-means++ clustering. File formats, caching, the annotation
//! service and the CLI live in the `samic` crate.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod backbone;
pub mod conv2d;
pub mod conv4d;
pub mod correlation;
pub mod episode;
pub mod error;
pub mod folds;
pub mod heatmap;
pub mod interp;
pub mod kmeans;
pub mod labeling;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod norm;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use heatmap::{
    average_heatmaps, encode_prompts, extract_peaks, Connectivity, HeatmapConfig, Peaks,
    PointPrompt, PromptSet, SaliencyHeatmap,
};
pub use tensor::Tensor;
