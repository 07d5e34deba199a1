//! Text-guided person image synthesis: describe a pose in words, get the
//! source person rendered in it.
//!
//! [`text2pose`] turns a text embedding into keypoint heatmaps. [`refiner`]
//! corrects the facial keypoints before [`render`] draws the source person
//! in the new pose. [`pipeline`] chains the stages, and [`synth`] builds a
//! labelled synthetic dataset to train on.

pub mod checkpoint;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod refiner;
pub mod render;
pub mod seed;
pub mod synth;
pub mod text;
pub mod text2pose;

pub use error::{Error, Result};

// Compiles and runs the code listings of the guide in `book/` as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/heatmaps.md")]
    mod heatmaps {}
    #[doc = include_str!("../../../book/src/text.md")]
    mod text {}
    #[doc = include_str!("../../../book/src/text2pose.md")]
    mod text2pose {}
    #[doc = include_str!("../../../book/src/refiner.md")]
    mod refiner {}
    #[doc = include_str!("../../../book/src/render.md")]
    mod render {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
}
