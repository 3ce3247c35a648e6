//! Training, persistence, evaluation and ablation tooling.

pub mod ablation;
pub mod checkpoint;
pub mod optim;
pub mod train;

pub use ablation::{
    export_latents, pca_project_2d, run_datasize_ablation, run_occlusion_ablation,
    write_rate_table, LatentSummary,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use optim::Adam;
pub use train::{
    build_samples, evaluate, evaluate_with_occlusion, make_policy, metrics_from_jsonl,
    metrics_to_jsonl, train_on, MetricsRecord, PolicyKind, TrainConfig, TrainRun,
};
