//! Networks: U-Net generator, patch discriminator, frozen feature extractor,
//! and the convolution primitives and parameter storage they share.

pub mod checkpoint;
pub mod discriminator;
pub mod features;
pub mod generator;
pub mod ops;
pub mod params;

pub use discriminator::{Discriminator, DiscriminatorConfig, ProbGrid};
pub use features::{FeatureMap, FeatureSource, IdentityFeatures, Vgg16Features};
pub use generator::{Generator, GeneratorConfig, SkipTrace};
pub use params::{config_hash, ParamSet};

/// Stddev of the zero-mean Gaussian weight init.
pub const INIT_STD: f64 = 0.02;
/// Negative slope of the leaky rectifier in the encoder and discriminator.
pub const LEAK: f64 = 0.2;

/// `Train` records the autograd graph through the parameters; `Eval` detaches
/// them so inference builds no graph. Outputs are identical in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
