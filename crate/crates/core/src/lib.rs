//! Air-tissue boundary segmentation for real-time MRI video.
//!
//! The crate covers the full low-resource adaptation workflow:
//!
//! * [`corpus`]: frames, contour annotations and their on-disk layout
//! * [`rasterize`]: contour polygons to binary masks, cross-resolution resampling
//! * [`phantom`]: deterministic synthetic corpora with exact ground truth
//! * [`nn`]: segnet-style and unet-style encoder-decoders with three
//!   independent decoder heads, trained by hand-written backpropagation
//! * [`train`]: pretraining grids, early stopping, k-frame fine-tuning rounds
//!   and matched-condition benchmarks
//! * [`eval`]: pixel accuracy and Dice, aggregation across rounds
//! * [`report`]: grouped bar charts (SVG) and summary tables
//! * [`experiment`]: config-driven runners behind the command-line tool

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
mod fsutil;
pub mod grid;
pub mod nn;
pub mod phantom;
pub mod rasterize;
pub mod registry;
pub mod report;
pub mod seeds;
pub mod train;

pub use corpus::{
    load_corpus, save_corpus, ContourId, ContourSet, Corpus, CorpusProfile, Frame, MaskTriple,
    Point, Polyline, SubjectId, VideoClip,
};
pub use error::{Error, Result};
pub use eval::{AggregateRecord, MetricRecord};
pub use grid::{Grid, Image, Mask};
pub use nn::{Architecture, ModelConfig, PredictionTriple, SegModel};
pub use train::{AdaptationSpec, SplitSpec, TrainConfig};
