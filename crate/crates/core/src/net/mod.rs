//! A small 3D CNN engine: valid convolutions, in-plane max pooling, dense
//! layers with dropout and a per-voxel two-class output, trained with a
//! masked cross-entropy and Adam.

mod adam;
mod arch;
mod checkpoint;
mod loss;
mod model;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use arch::{
    infer_shapes, parse_arch, ArchOptions, Layer, NetSpec, Shape, REFERENCE_DESCRIPTOR, REFERENCE_FOV, REFERENCE_ROI,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use loss::{masked_cross_entropy, MaskedLoss, CLAMP};
pub use model::{softmax_pair, Mode, Model, ParamArray, Params, Real, SampleCache, SampleOutput};
pub use train::{
    batch_gradient, evaluate_jaccard, train, train_observed, write_trace_csv, EpochRecord, PatchSet, TrainConfig,
    TrainOutcome,
};
