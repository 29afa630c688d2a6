pub mod container;
pub mod dataset;
pub mod error;
pub mod fault;
pub mod format;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod profiler;
pub mod tensor;
pub mod tuner;

pub use container::{load_model, save_model};
pub use dataset::{LabeledSample, SplitSpec};
pub use error::{Error, Result};
pub use fault::{apply_mask, draw_mask, BitFlip, FaultMask, FaultScope, FaultSpec};
pub use format::{decode_word, encode_word, NumericFormat};
pub use metrics::{compute_auc, evaluate_accuracy, run_sweep, AucResult, Evaluator, SweepConfig, SweepResult, XScale};
pub use model::{LayerKind, LayerParams, LayerSpec, Model, Network, WordTensor};
pub use profiler::{activation_histogram, profile, ActivationProfile, Histogram};
pub use tensor::Tensor;
pub use tuner::{tune_layer, tune_network, TuneConfig, TuneScope, TuneTrace};
