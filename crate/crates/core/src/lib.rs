//! Sketch-to-cartoon synthesis with a conditional adversarial network.
//!
//! The pipeline: [`sketch`] turns color cartoons into XDoG line art,
//! [`hints`] paints color blocks or user scribbles over sketches, [`dataset`]
//! assembles paired training data, [`nn`] holds the U-Net generator and patch
//! discriminator, [`losses`] and [`train`] optimize them, [`paint`] runs
//! inference and [`eval`] scores subjective votes.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod hints;
pub mod image;
pub mod losses;
pub mod nn;
pub mod paint;
pub mod sketch;
pub mod train;

pub use dataset::{build_pairs, load_batch, split, Batch, BuildOptions, DatasetManifest, ManifestEntry, SplitTag};
pub use error::{Error, Result};
pub use eval::{pop_algorithm, pop_image, summarize, PopReport, VarianceKind, VoteRecord, VoteTally};
pub use hints::{
    grow_block, rasterize_user_scribbles, synthesize_hints, BlockGrowthParams, ColorBlock, HintImage, Scribble,
};
pub use image::{square_crop_resize, CropBox, RasterImage};
pub use losses::{composite_loss, GeneratorLossKind, LossParts, LossWeights};
pub use nn::{
    Discriminator, DiscriminatorConfig, FeatureMap, Generator, GeneratorConfig, Mode, ParamSet, ProbGrid,
    Vgg16Features,
};
pub use paint::{ModelSummary, PaintOutput, Painter};
pub use sketch::{xdog, XdogParams, DEFAULT_GAMMAS};
pub use train::{train, train_step, StepMetrics, TrainConfig, TrainState};
