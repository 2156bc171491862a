//! Plane-wave ultrasound beamforming toolkit: synthetic channel data,
//! classical DAS/MVDR references, a capsule-network beamformer with
//! structured kernel pruning and a 16-bit fixed-point path, and an
//! analytic model of its FPGA dataflow.

pub mod accel;
pub mod beamform;
pub mod bundle;
pub mod capsnet;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pruning;
pub mod quant;
pub mod tensor;

pub use bundle::WeightBundle;
pub use error::{Error, Result};
pub use geometry::{EnvelopeImage, PixelGrid, ProbeGeometry, RfVolume};
pub use tensor::{DType, Tensor, TensorData};
