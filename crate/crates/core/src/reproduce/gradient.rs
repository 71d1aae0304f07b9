//! Finite-difference check of the second-stage objective.

use autograd::{grad_check, GradCheckReport, Tensor, DEFAULT_STEP};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterWeights, Stage};
use crate::backbone::{Backbone, BackboneConfig, EncodedBatch, HeadWeights};
use crate::error::{Error, Result};
use crate::fusion::{combined_loss, DistillOptions, FusionWeights, StageTwoModel, TeacherSet};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSetup {
    pub backbone: BackboneConfig,
    pub bottleneck: usize,
    /// Teachers including the self teacher.
    pub teachers: usize,
    pub pairs: Vec<(String, String)>,
    pub labels: Vec<f64>,
    pub options: DistillOptions,
    pub seed: u64,
}

impl Default for GradientSetup {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                max_seq_len: 8,
                ..BackboneConfig::default()
            },
            bottleneck: 8,
            teachers: 3,
            pairs: vec![
                ("how do i reset my card".into(), "reset a card".into()),
                ("where is my parcel".into(), "lost card".into()),
            ],
            labels: vec![1.0, 0.0],
            options: DistillOptions::default(),
            seed: 7,
        }
    }
}

/// Replaces every entry of `t` by a uniform draw, keeping its trainability.
fn randomize(t: &mut Tensor, bound: f64, rng: &mut ChaCha8Rng) {
    let fresh = Tensor::uniform(t.shape(), bound, rng);
    t.data_mut().copy_from_slice(fresh.data());
}

fn random_adapter(name: &str, setup: &GradientSetup, seed: u64) -> Result<AdapterWeights> {
    let cfg = &setup.backbone;
    let mut a = AdapterWeights::init(name, cfg.num_layers, cfg.hidden_dim, setup.bottleneck, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada);
    for p in a.params_mut() {
        randomize(p, 0.2, &mut rng);
    }
    Ok(a)
}

/// Checks the gradient of cross-entropy plus weighted distillation with
/// respect to the student adapter, the head and the fusion weights, all
/// at random non-degenerate values. Teachers and encoder stay frozen.
pub fn check_stage_two_gradient(setup: &GradientSetup) -> Result<GradCheckReport> {
    if setup.teachers == 0 || setup.pairs.len() != setup.labels.len() {
        return Err(Error::Usage(
            "gradient setup needs teachers and one label per pair".into(),
        ));
    }
    let backbone = Backbone::new(setup.backbone.clone())?;
    let encodings = setup
        .pairs
        .iter()
        .map(|(q, c)| backbone.encode(q, c))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = encodings.iter().collect();
    let batch = EncodedBatch::from_pairs(&refs)?;

    let mut previous = Vec::new();
    for i in 1..setup.teachers {
        let mut t = random_adapter(&format!("teacher{i}"), setup, setup.seed + i as u64)?;
        t.set_stage(Stage::Final)?;
        previous.push(t);
    }
    let own = random_adapter("self", setup, setup.seed + 100)?;
    let teachers = TeacherSet::new(previous, Some(own))?;

    let student = random_adapter("student", setup, setup.seed + 200)?;
    let mut head = HeadWeights::zeros(setup.backbone.hidden_dim);
    let mut omega = FusionWeights::init(
        setup.backbone.num_layers,
        setup.backbone.hidden_dim,
        setup.seed + 300,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed + 400);
    for p in head.params_mut() {
        randomize(p, 0.5, &mut rng);
    }
    for p in omega.params_mut() {
        randomize(p, 0.3, &mut rng);
    }

    let mut params: Vec<Tensor> = student.params().into_iter().cloned().collect();
    params.push(head.weight.clone());
    params.push(head.bias.clone());
    params.extend(omega.params().into_iter().cloned());
    let n_student = student.params().len();

    let report = grad_check(
        |tape, vars| {
            let bb = backbone.weights().bind(tape);
            let mut it = vars[..n_student].iter().copied();
            let bound_student = student.bind_from(&mut it).map_err(to_tensor_error)?;
            let bound_head = crate::backbone::BoundHead {
                weight: vars[n_student],
                bias: vars[n_student + 1],
            };
            let mut it = vars[n_student + 2..].iter().copied();
            let bound_omega = omega.bind_from(&mut it).map_err(to_tensor_error)?;
            let bound_teachers = teachers.bind(tape);
            let model = StageTwoModel {
                backbone: &bb,
                student: &bound_student,
                head: &bound_head,
                teachers: &bound_teachers,
                omega: &bound_omega,
            };
            let parts = combined_loss(
                tape,
                &backbone,
                &model,
                &batch,
                &setup.labels,
                setup.options,
            )
            .map_err(to_tensor_error)?;
            Ok(parts.total)
        },
        &params,
        DEFAULT_STEP,
    )?;
    Ok(report)
}

fn to_tensor_error(e: Error) -> autograd::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => autograd::TensorError::Usage(other.to_string()),
    }
}
