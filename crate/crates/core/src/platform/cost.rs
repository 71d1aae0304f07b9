//! Inference cost: analytic FLOP counts per path, cross-checked against
//! the tape, and wall-clock latency.

use std::fmt::Write as _;
use std::time::Instant;

use crate::adapter::{AdapterWeights, Stage};
use crate::backbone::{Backbone, BackboneConfig, HeadWeights};
use crate::error::{Error, Result};
use crate::fusion::FusionWeights;
use crate::tokenizer::PairEncoding;
use crate::trainer::{predict, TenantModel};

pub const DEFAULT_BATCH_SIZES: [usize; 3] = [10, 20, 30];
pub const DEFAULT_REPETITIONS: usize = 100;
/// Largest relative gap between the adapter and distilled medians that
/// still counts as equal latency.
pub const LATENCY_TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferencePath {
    /// Full fine-tuning: a private backbone, no adapter.
    Full,
    Adapter,
    /// Distilled adapters run the adapter path unchanged.
    Distill,
    Fusion {
        teachers: usize,
    },
}

impl InferencePath {
    pub fn name(&self) -> String {
        match self {
            InferencePath::Full => "full".into(),
            InferencePath::Adapter => "adapter".into(),
            InferencePath::Distill => "adapter_distill".into(),
            InferencePath::Fusion { teachers } => format!("adapter_fusion(N={teachers})"),
        }
    }
}

/// Matrix-product and attention FLOPs of one batch, counted the same way
/// as the tape: `2mkn` per product and `4·T²·d` per sequence for
/// attention. Elementwise work is not counted.
pub fn analytic_flops(
    config: &BackboneConfig,
    bottleneck: usize,
    path: InferencePath,
    batch: usize,
    seq: usize,
) -> u64 {
    let (b, t, d, f, l) = (
        batch as u64,
        seq as u64,
        config.hidden_dim as u64,
        config.ffn_dim as u64,
        config.num_layers as u64,
    );
    let m = bottleneck as u64;
    let rows = b * t;
    let projections = 4 * 2 * rows * d * d;
    let attention = 4 * b * t * t * d;
    let ffn = 2 * 2 * rows * d * f;
    let adapter = 2 * 2 * rows * d * m;
    let per_layer = projections
        + attention
        + ffn
        + match path {
            InferencePath::Full => 0,
            InferencePath::Adapter | InferencePath::Distill => adapter,
            InferencePath::Fusion { teachers } => {
                let n = teachers as u64;
                // n adapters, one query product and a key and value product per adapter
                n * adapter + 2 * rows * d * d * (1 + 2 * n)
            }
        };
    let head = 2 * b * d;
    l * per_layer + head
}

/// Randomly initialized tenant model of the given inference path. The
/// distilled path gets its own second-stage adapter.
pub fn bench_model(
    backbone: &Backbone,
    bottleneck: usize,
    path: InferencePath,
) -> Result<TenantModel> {
    let cfg = backbone.config();
    let head = HeadWeights::zeros(cfg.hidden_dim);
    let adapter =
        |i: usize| AdapterWeights::for_backbone(&format!("bench{i}"), cfg, bottleneck, i as u64);
    Ok(match path {
        InferencePath::Full => TenantModel::Full {
            weights: backbone.weights().clone(),
            head,
        },
        InferencePath::Adapter => TenantModel::Adapter {
            adapter: adapter(0)?,
            head,
        },
        InferencePath::Distill => {
            let mut distilled = adapter(1)?;
            distilled.set_stage(Stage::Final)?;
            TenantModel::Adapter {
                adapter: distilled,
                head,
            }
        }
        InferencePath::Fusion { teachers } => TenantModel::Fusion {
            adapters: (0..teachers).map(adapter).collect::<Result<_>>()?,
            omega: FusionWeights::init(cfg.num_layers, cfg.hidden_dim, 0)?,
            head,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Latency {
    pub median_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
}

impl Latency {
    pub fn iqr_ms(&self) -> f64 {
        self.q3_ms - self.q1_ms
    }

    fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (ms.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            ms[lo] + (ms[hi] - ms[lo]) * (pos - lo as f64)
        };
        Self {
            median_ms: q(0.5),
            q1_ms: q(0.25),
            q3_ms: q(0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub batch: usize,
    pub path: InferencePath,
    pub analytic_flops: u64,
    pub measured_flops: u64,
    /// Wall-clock; varies between machines and runs.
    pub latency: Latency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub teachers: usize,
    pub repetitions: usize,
    pub rows: Vec<CostRow>,
}

/// Deterministic pair encodings for benchmarking.
pub fn bench_inputs(backbone: &Backbone, count: usize) -> Result<Vec<PairEncoding>> {
    (0..count)
        .map(|i| {
            let q = format!("bench query {i} about item {}", i % 7);
            let c = format!("bench candidate {} for item {}", i * 3, i % 5);
            backbone.encode(&q, &c)
        })
        .collect()
}

/// FLOPs and median latency of every path at every batch size. Paths are
/// timed round-robin so drift affects them alike.
pub fn cost_report(
    backbone: &Backbone,
    bottleneck: usize,
    teachers: usize,
    batch_sizes: &[usize],
    repetitions: usize,
) -> Result<CostReport> {
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::Usage("batch sizes must be positive".into()));
    }
    if repetitions == 0 || teachers == 0 {
        return Err(Error::Usage(
            "need at least one repetition and one teacher".into(),
        ));
    }
    let paths = [
        InferencePath::Full,
        InferencePath::Adapter,
        InferencePath::Distill,
        InferencePath::Fusion { teachers },
    ];
    let models: Vec<TenantModel> = paths
        .iter()
        .map(|&p| bench_model(backbone, bottleneck, p))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &batch in batch_sizes {
        let inputs = bench_inputs(backbone, batch)?;
        let seq = inputs[0].len();
        let mut samples = vec![Vec::with_capacity(repetitions); paths.len()];
        for _ in 0..repetitions {
            for (i, model) in models.iter().enumerate() {
                let start = Instant::now();
                std::hint::black_box(predict(backbone, model, &inputs)?);
                samples[i].push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        for ((&path, model), ms) in paths.iter().zip(&models).zip(samples) {
            rows.push(CostRow {
                batch,
                path,
                analytic_flops: analytic_flops(backbone.config(), bottleneck, path, batch, seq),
                measured_flops: model.measured_flops(backbone, &inputs)?,
                latency: Latency::from_samples(ms),
            });
        }
    }
    Ok(CostReport {
        teachers,
        repetitions,
        rows,
    })
}

impl CostReport {
    fn row(&self, batch: usize, path: InferencePath) -> Option<&CostRow> {
        self.rows
            .iter()
            .find(|r| r.batch == batch && r.path == path)
    }

    fn batches(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.rows.iter().map(|r| r.batch).collect();
        b.dedup();
        b
    }

    /// FLOP invariants: analytic counts agree with the tape, the distilled
    /// path costs exactly what the adapter path costs, fusion costs more.
    pub fn check_flops(&self) -> Result<()> {
        for r in &self.rows {
            if r.analytic_flops != r.measured_flops {
                return Err(Error::Invariant(format!(
                    "{} at batch {}: analytic {} FLOPs but the tape counted {}",
                    r.path.name(),
                    r.batch,
                    r.analytic_flops,
                    r.measured_flops
                )));
            }
        }
        for b in self.batches() {
            let get = |p| self.row(b, p).map(|r| r.measured_flops).unwrap_or(0);
            let adapter = get(InferencePath::Adapter);
            let distill = get(InferencePath::Distill);
            let fusion = get(InferencePath::Fusion {
                teachers: self.teachers,
            });
            if distill != adapter {
                return Err(Error::Invariant(format!(
                    "batch {b}: distilled path costs {distill} FLOPs, adapter path {adapter}"
                )));
            }
            if fusion <= adapter {
                return Err(Error::Invariant(format!(
                    "batch {b}: fusion ({fusion}) is not above adapter ({adapter})"
                )));
            }
        }
        Ok(())
    }

    /// Median ordering: distilled and adapter within [`LATENCY_TOLERANCE`]
    /// of each other, both below fusion.
    pub fn check_latency_order(&self) -> Result<()> {
        for b in self.batches() {
            let get = |p| {
                self.row(b, p)
                    .map(|r| r.latency.median_ms)
                    .unwrap_or(f64::NAN)
            };
            let adapter = get(InferencePath::Adapter);
            let distill = get(InferencePath::Distill);
            let fusion = get(InferencePath::Fusion {
                teachers: self.teachers,
            });
            let gap = (distill - adapter).abs() / adapter.min(distill);
            if !(gap <= LATENCY_TOLERANCE) {
                return Err(Error::Invariant(format!(
                    "batch {b}: adapter {adapter:.3} ms vs distilled {distill:.3} ms"
                )));
            }
            if !(fusion > adapter.max(distill)) {
                return Err(Error::Invariant(format!(
                    "batch {b}: fusion {fusion:.3} ms is not slower than adapter {adapter:.3} ms"
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# teachers={} repetitions={} (latency columns are wall-clock and machine-dependent)\n",
            self.teachers, self.repetitions
        );
        out.push_str("batch\tpath\tflops\ttape_flops\tvs_full\tmedian_ms*\tiqr_ms*\n");
        for r in &self.rows {
            let full = self
                .row(r.batch, InferencePath::Full)
                .map_or(f64::NAN, |f| f.measured_flops as f64);
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:+.4}%\t{:.3}\t{:.3}",
                r.batch,
                r.path.name(),
                r.analytic_flops,
                r.measured_flops,
                (r.measured_flops as f64 / full - 1.0) * 100.0,
                r.latency.median_ms,
                r.latency.iqr_ms()
            );
        }
        out
    }
}
