//! Training: execute compiled forward+backward graphs, apply
//! Quantization-Aware Scaling, run momentum-free SGD with int8 weight
//! casting, gradient accumulation, and evaluation.

mod checkpoint;
mod metrics;
mod optim;
mod pretrain;
pub mod qas;
mod state;
pub mod update;

pub use checkpoint::{load_params, read_params, save_checkpoint, write_params};
pub use metrics::{from_jsonl, to_jsonl, MetricsRecord};
pub use optim::{LrSchedule, OptState, OptimKind, OptimizerConfig};
pub use pretrain::{pretrain_and_quantize, Pretrained, PretrainConfig};
pub use qas::{qas_for_param, qas_scale, QasKind};
pub use state::{
    compile_model, evaluate, logits_tensor, ratio_report, sgd_step, slice_for_scheme,
    sync_params_from, train, train_one_epoch, CompiledModel, RatioRow, TrainState,
};
pub use update::{apply_step, grad_to_real, sgd_update, UpdateRule};
