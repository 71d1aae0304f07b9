//! Synthetic multi-tenant trend suite: nine teachers, one student, each
//! seed a fresh corpus and fresh training randomness.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::adapter::AdapterWeights;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::faq::{build_dataset, DatasetOptions, Split, SyntheticConfig};
use crate::trainer::{evaluate, train_tenant, Mode, TenantModel, TrainConfig};

/// Allowed shortfall of mean distilled accuracy below the adapter, in points.
pub const MEAN_SLACK_POINTS: f64 = 0.5;
pub const MIN_SEED_WINS: usize = 3;
/// Allowed gap between the two teacher-set variants, in points.
pub const SELF_TEACHER_BOUND_POINTS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub teachers: usize,
    pub teacher_points: usize,
    pub student_points: usize,
    pub questions_per_point: usize,
    pub shared_structure_fraction: f64,
    pub dataset: DatasetOptions,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            backbone: BackboneConfig {
                num_layers: 2,
                max_seq_len: 16,
                ..BackboneConfig::default()
            },
            train: TrainConfig {
                eta_grid: vec![1.0],
                ..TrainConfig::default()
            },
            teachers: 9,
            teacher_points: 60,
            student_points: 180,
            questions_per_point: 4,
            shared_structure_fraction: 0.5,
            dataset: DatasetOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub student_examples: usize,
    pub test_examples: usize,
    /// Test accuracies.
    pub adapter: f64,
    pub distill: f64,
    pub distill_no_self: f64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub seeds: Vec<SeedOutcome>,
}

fn adapter_of(model: TenantModel) -> Result<AdapterWeights> {
    match model {
        TenantModel::Adapter { adapter, .. } => Ok(adapter),
        _ => Err(Error::Usage(
            "teacher training did not produce an adapter".into(),
        )),
    }
}

/// Trains the teachers of one seed and then the student in the three
/// compared modes.
pub fn run_seed(cfg: &SuiteConfig, seed: u64) -> Result<SeedOutcome> {
    let start = Instant::now();
    let backbone = Backbone::new(cfg.backbone.clone())?;
    let tenants = SyntheticConfig {
        num_tenants: cfg.teachers + 1,
        points_per_tenant: cfg.teacher_points.max(cfg.student_points),
        questions_per_point: cfg.questions_per_point,
        shared_structure_fraction: cfg.shared_structure_fraction,
        seed,
        ..SyntheticConfig::default()
    }
    .generate()?;
    let base = TrainConfig {
        seed,
        ..cfg.train.clone()
    };

    let mut teachers = Vec::with_capacity(cfg.teachers);
    for t in &tenants[..cfg.teachers] {
        let mut kb = t.kb.clone();
        kb.points.truncate(cfg.teacher_points);
        let data = build_dataset(&kb, cfg.dataset)?;
        let mode_cfg = TrainConfig {
            mode: Mode::Adapter,
            ..base.clone()
        };
        teachers.push(adapter_of(
            train_tenant(&backbone, &data, &[], &mode_cfg, &kb.tenant_id)?.model,
        )?);
    }

    let mut kb = tenants[cfg.teachers].kb.clone();
    kb.points.truncate(cfg.student_points);
    let data = build_dataset(&kb, cfg.dataset)?;
    let test = data.split(Split::Test);
    let acc = |mode: Mode| -> Result<f64> {
        let mode_cfg = TrainConfig {
            mode,
            ..base.clone()
        };
        let trained = train_tenant(&backbone, &data, &teachers, &mode_cfg, &kb.tenant_id)?;
        Ok(evaluate(&backbone, &trained.model, &test)?.accuracy)
    };
    Ok(SeedOutcome {
        seed,
        student_examples: data.len(),
        test_examples: test.len(),
        adapter: acc(Mode::Adapter)?,
        distill: acc(Mode::AdapterDistill)?,
        distill_no_self: acc(Mode::AdapterDistillStar)?,
        elapsed: start.elapsed(),
    })
}

pub fn run_suite(
    cfg: &SuiteConfig,
    mut progress: impl FnMut(&SeedOutcome),
) -> Result<SuiteOutcome> {
    if cfg.seeds.is_empty() || cfg.teachers == 0 {
        return Err(Error::Usage("the suite needs seeds and teachers".into()));
    }
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let outcome = run_seed(cfg, s)?;
        progress(&outcome);
        seeds.push(outcome);
    }
    Ok(SuiteOutcome { seeds })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

impl SeedOutcome {
    pub fn line(&self) -> String {
        format!(
            "seed {}\texamples {}\ttest {}\tadapter {:.4}\tadapter_distill {:.4}\tno_self_teacher {:.4}\t{:.1}s",
            self.seed,
            self.student_examples,
            self.test_examples,
            self.adapter,
            self.distill,
            self.distill_no_self,
            self.elapsed.as_secs_f64()
        )
    }
}

impl SuiteOutcome {
    pub fn mean_adapter(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.adapter))
    }

    pub fn mean_distill(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.distill))
    }

    pub fn mean_no_self(&self) -> f64 {
        mean(self.seeds.iter().map(|s| s.distill_no_self))
    }

    pub fn distill_wins(&self) -> usize {
        self.seeds.iter().filter(|s| s.distill >= s.adapter).count()
    }

    /// Named pass/fail checks of the trend.
    pub fn checks(&self) -> Vec<(String, bool)> {
        let (a, d, s) = (
            self.mean_adapter(),
            self.mean_distill(),
            self.mean_no_self(),
        );
        let gap = 100.0 * (d - s);
        vec![
            (
                format!(
                    "mean distill {:.2} >= mean adapter {:.2} - {MEAN_SLACK_POINTS}",
                    100.0 * d,
                    100.0 * a
                ),
                100.0 * d >= 100.0 * a - MEAN_SLACK_POINTS,
            ),
            (
                format!(
                    "distill >= adapter on {} of {} seeds",
                    self.distill_wins(),
                    self.seeds.len()
                ),
                self.distill_wins() >= MIN_SEED_WINS.min(self.seeds.len()),
            ),
            (
                format!(
                    "|distill - no self teacher| = {:.2} <= {SELF_TEACHER_BOUND_POINTS}",
                    gap.abs()
                ),
                gap.abs() <= SELF_TEACHER_BOUND_POINTS,
            ),
        ]
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|(_, ok)| *ok)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.seeds {
            let _ = writeln!(out, "{}", s.line());
        }
        for (what, ok) in self.checks() {
            let _ = writeln!(out, "{} {what}", if ok { "ok  " } else { "FAIL" });
        }
        out
    }
}
