//! Relational grounding for weakly supervised human-object interaction (HOI) reasoning.
//!
//! The crate implements a cross-attention interaction head that is trained from
//! image-level HOI labels and transferred to instance-level detection without
//! retraining, by restricting its patch-importance softmax to detector boxes.
//!
//! Pipeline overview:
//!
//! * [`grounding`]: patch/text similarity fields, (masked) patch importance and
//!   the spatially grounded pairwise query.
//! * [`decoder`]: single-block cross-attention decoder, action head and the
//!   ML-Decoder baseline.
//! * [`interactiveness`]: patch, image and instance interactiveness gates.
//! * [`training`]: gated classification score, focal loss, analytic gradients
//!   and a cosine-scheduled gradient-descent loop.
//! * [`detection`]: proposal filtering and fused pairwise inference.
//! * [`evaluation`]: HOI mAP with Full/Rare/Non-rare grouping.
//! * [`bench`]: throughput harness against the union-crop baseline.
//!
//! All math is generic over [`Real`]; the aliases at the crate root fix the
//! scalar to `f64`, which is what the CLI and file formats use.

pub mod bench;
pub mod decoder;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod grounding;
pub mod interactiveness;
pub mod io;
pub mod numerics;
pub mod params;
pub mod synthetic;
pub mod training;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use error::{Error, Result};

/// Floating-point scalar the model is generic over.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or statistic.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Tensor = numerics::Tensor2D<f64>;
pub type FeatureMap = grounding::FeatureMap<f64>;
pub type TextEmbeddingBank = decoder::TextEmbeddingBank<f64>;
pub type RegFormerParams = params::RegFormerParams<f64>;
pub type MlDecoderParams = params::MlDecoderParams<f64>;
pub type ImageSample = training::ImageSample<f64>;
pub type HoiPrediction = detection::HoiPrediction<f64>;
