//! Config-driven runs, one per CLI subcommand. Every run writes into its
//! output directory and finishes with a `manifest.json`.

mod config;
mod optim;
mod run;
mod train;


pub use config::{preset_grid, DynamicsConfig, JudgeConfig, Preset, RunConfig, SqueezeConfig, SweepConfig};
pub use optim::{AdamW, OptimizerConfig, SchedulerConfig, SchedulerKind};
pub use run::{
    checkpoint_name, expand_checkpoints, load_checkpoint, load_corpus, preset_for, run_dynamics, run_eval, run_finetune,
    run_gen_corpus, run_retrain, run_squeeze, run_sweep, run_unlearn, sweep_points, DynamicsOutput, JudgeItem,
    JudgeSummary, RunManifest, LOSSES_FILE, LOSS_COLUMNS, MANIFEST_FILE, SWEEP_COLUMNS,
};
pub use train::train_step;
