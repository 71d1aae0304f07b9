//! Two-stage training, baselines and evaluation.

mod config;
pub mod metrics;
mod model;
pub mod optim;
mod report;
mod stages;

pub use config::{default_eta_grid, Mode, TrainConfig};
pub use metrics::{accuracy, auc, EvalReport};
pub use model::{encode_examples, evaluate, predict, TenantModel};
pub use report::{write_curves_csv, CurvePoint, RunReport};
pub use stages::{
    select_eta, train_baseline, train_stage1, train_stage2, train_tenant, EtaSelection,
    StageOneOutput, StageTwoOutput, TrainedTenant,
};
