//! Spatially adaptive anytime inference for dense-prediction convolutional
//! networks.
//!
//! The engine attaches encoder-decoder prediction heads to a staged backbone,
//! thresholds per-pixel confidence after each exit, skips convolution work at
//! confident pixels (filling their features by neighborhood interpolation),
//! carries confident predictions forward unchanged, and accounts FLOPs
//! exactly per layer. Inference can be budgeted by exit count or FLOPs, or
//! interrupted from another thread; completed exits are always returned.

pub mod backbone;
pub mod error;
pub mod exec;
pub mod flops;
pub mod heads;
pub mod masked;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod runtime;
pub mod scenario;
pub mod tensor;
pub mod weights;

pub use backbone::{forward_all_exits, seeded_init, ExitConfig, InterpConfig, ModelConfig, StageConfig};
pub use error::{Error, Result};
pub use flops::{FlopsLedger, LayerRecord};
pub use heads::{carry_over, exit_mask, head_forward, ExitHeadConfig, ExitPrediction};
pub use masked::{
    compute_mask, confidence_map, interpolate_skipped, masked_conv2d, masked_layer, resample_mask,
    ConfidenceCriterion, InterpKernel, Mask,
};
pub use metrics::{
    miou, multi_exit_loss, run_sweep, run_sweep_parallel, sweep_csv, ClassMap, LossSpec, LossTask,
    MiouResult, SweepParameter, SweepSpec,
};
pub use runtime::{
    average_ledger, dense_flops, infer, infer_unbounded, AnytimeResult, Budget, HaltPoint,
    HaltProbe,
};
pub use tensor::{
    avg_pool2, batchnorm_infer, bilinear_resize, bilinear_upsample2, conv2d, relu,
    softmax_channels, Tensor,
};
pub use weights::{BnParams, ConvWeights, RawTensor, WeightStore};
