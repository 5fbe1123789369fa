//! Training loop, coarse-to-fine inference, evaluation, ablations,
//! checkpoints and plotting.

mod ablate;
mod checkpoint;
mod eval;
mod infer;
mod plot;
mod train;

pub use ablate::{ablate, template_sweep, train_and_evaluate, write_rows, AblationAxis, AblationConfig, AblationRow};
pub use checkpoint::{decode_params, encode_params, sidecar_path, Checkpoint, CHECKPOINT_MAGIC};
pub use eval::{
    evaluate, evaluate_predictions, sample_seed, write_report, EvalReport, Prediction, SampleReport, Summary,
    RECALL_DEPTH_REL, RECALL_ROT_DEG,
};
pub use infer::{decode_hypothesis, infer, run_stage, InferOptions, Inference, Stage, StageResult};
pub use plot::{plot, read_series, render_svg, Series};
pub use train::{
    draw_noise, loss_and_grads, prepare_item, relative_target_count, supervision, train, view_input, LogRow,
    Predictor, TrainConfig, TrainItem, TrainOutcome,
};
