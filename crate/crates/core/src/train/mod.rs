//! Optimization, data, checkpoints and the ablation runner.

pub mod ablate;
pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod trainer;

pub use ablate::{cells, run_ablation, AblationCell, AblationGrid, CellResult, SUPPRESSION_SWEEP};
pub use checkpoint::{Checkpoint, RngState};
pub use data::{augment, load_cifar_binary, synth_dataset, CifarLayout, Dataset, Normalization, Split};
pub use optim::{clip_grad_norm, AdamW, DecayRates, LrSchedule, OptimizerConfig};
pub use trainer::{evaluate, load_datasets, load_model, EpochRecord, StepRecord, TrainSummary, Trainer};
