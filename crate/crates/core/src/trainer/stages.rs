use autograd::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, TrainConfig};
use super::metrics::EvalReport;
use super::model::{encode_examples, predict, TenantModel};
use super::optim::{AdamW, LinearSchedule};
use super::report::CurvePoint;
use crate::adapter::{AdapterHook, AdapterWeights, Stage};
use crate::backbone::{Backbone, BackboneWeights, EncodedBatch, HeadWeights, LayerHook, NoAdapter};
use crate::error::{Error, Result};
use crate::faq::{LabeledPair, LabeledPairs, Split};
use crate::fusion::{
    combined_loss, DistillOptions, FusionHook, FusionRoute, FusionWeights, StageTwoModel,
    TeacherSet,
};
use crate::tokenizer::PairEncoding;

const SHUFFLE_STAGE1: u64 = 0x5eed_0001;
const SHUFFLE_STAGE2: u64 = 0x5eed_0002;
const FUSION_SEED: u64 = 0xf05e;

#[derive(Debug, Clone)]
pub struct StageOneOutput {
    pub adapter: AdapterWeights,
    pub head: HeadWeights,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone)]
pub struct StageTwoOutput {
    pub adapter: AdapterWeights,
    pub head: HeadWeights,
    pub eta: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone)]
pub struct EtaSelection {
    pub eta: f64,
    /// `(eta, val accuracy, val AUC)` per grid point, in grid order.
    pub scores: Vec<(f64, f64, Option<f64>)>,
    pub best: StageTwoOutput,
}

/// Result of training one tenant in any mode.
#[derive(Debug, Clone)]
pub struct TrainedTenant {
    pub mode: Mode,
    pub model: TenantModel,
    pub stage1_curve: Vec<CurvePoint>,
    pub stage2_curve: Vec<CurvePoint>,
    pub eta: Option<f64>,
    pub eta_scores: Vec<(f64, f64, Option<f64>)>,
    pub teachers: Vec<String>,
}

struct Prepared {
    enc: Vec<PairEncoding>,
    labels: Vec<f64>,
}

struct Data {
    train: Prepared,
    val: Prepared,
}

fn prepare(backbone: &Backbone, examples: &[&LabeledPair]) -> Result<Prepared> {
    Ok(Prepared {
        enc: encode_examples(backbone, examples)?,
        labels: examples.iter().map(|e| f64::from(e.label)).collect(),
    })
}

fn prepare_data(backbone: &Backbone, data: &LabeledPairs) -> Result<Data> {
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    Ok(Data {
        train: prepare(backbone, &train)?,
        val: prepare(backbone, &data.split(Split::Val))?,
    })
}

/// Parameters touched by one optimization run.
struct Params {
    backbone: Option<BackboneWeights>,
    adapter: Option<AdapterWeights>,
    head: HeadWeights,
    omega: Option<FusionWeights>,
}

impl Params {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.backbone {
            out.extend(b.params_mut());
        }
        if let Some(a) = &mut self.adapter {
            out.extend(a.params_mut());
        }
        out.extend(self.head.params_mut());
        if let Some(o) = &mut self.omega {
            out.extend(o.params_mut());
        }
        out
    }
}

enum Objective<'a> {
    /// Cross-entropy through the backbone, an optional adapter and the head.
    Plain,
    /// Cross-entropy through the fused output of frozen adapters.
    Fusion { adapters: &'a [AdapterWeights] },
    Distill {
        teachers: &'a TeacherSet,
        options: DistillOptions,
    },
}

struct StepLoss {
    total: Var,
    ce: Var,
    distill: Option<Var>,
    vars: Vec<Option<Var>>,
}

fn flatten<T: Copy>(
    layers: impl IntoIterator<Item = impl IntoIterator<Item = T>>,
) -> Vec<Option<T>> {
    layers.into_iter().flatten().map(Some).collect()
}

impl Objective<'_> {
    fn loss(
        &self,
        backbone: &Backbone,
        p: &Params,
        tape: &mut Tape,
        batch: &EncodedBatch,
        labels: &[f64],
    ) -> Result<StepLoss> {
        let bb_weights = p.backbone.as_ref().unwrap_or(backbone.weights());
        let bb = bb_weights.bind(tape);
        let mut vars = if p.backbone.is_some() {
            bb.vars()
        } else {
            Vec::new()
        };
        match self {
            Objective::Plain => {
                let student = p.adapter.as_ref().map(|a| a.bind(tape));
                let pooled = match &student {
                    Some(s) => {
                        vars.extend(flatten(s.iter().map(|l| l.params().map(|v| *v))));
                        let mut hook = AdapterHook { adapter: s };
                        backbone.forward(tape, &bb, batch, &mut hook as &mut dyn LayerHook)?
                    }
                    None => backbone.forward(tape, &bb, batch, &mut NoAdapter)?,
                };
                let head = p.head.bind(tape);
                vars.extend([Some(head.weight), Some(head.bias)]);
                let logits = head.logits(tape, pooled)?;
                let ce = tape.bce_with_logits(logits, labels)?;
                Ok(StepLoss {
                    total: ce,
                    ce,
                    distill: None,
                    vars,
                })
            }
            Objective::Fusion { adapters } => {
                let omega = p
                    .omega
                    .as_ref()
                    .ok_or_else(|| Error::Usage("fusion without weights".into()))?;
                let bound: Vec<_> = adapters.iter().map(|a| a.bind(tape)).collect();
                let om = omega.bind(tape);
                let mut hook = FusionHook::new(None, &bound, &om, FusionRoute::Fused);
                let pooled = backbone.forward(tape, &bb, batch, &mut hook)?;
                let head = p.head.bind(tape);
                vars.extend([Some(head.weight), Some(head.bias)]);
                vars.extend(flatten(om.iter().map(|l| [l.query, l.key, l.value])));
                let logits = head.logits(tape, pooled)?;
                let ce = tape.bce_with_logits(logits, labels)?;
                Ok(StepLoss {
                    total: ce,
                    ce,
                    distill: None,
                    vars,
                })
            }
            Objective::Distill { teachers, options } => {
                let student = p
                    .adapter
                    .as_ref()
                    .ok_or_else(|| Error::Usage("distillation without a student".into()))?
                    .bind(tape);
                let omega = p
                    .omega
                    .as_ref()
                    .ok_or_else(|| Error::Usage("distillation without fusion".into()))?;
                let tb = teachers.bind(tape);
                let om = omega.bind(tape);
                let head = p.head.bind(tape);
                vars.extend(flatten(student.iter().map(|l| l.params().map(|v| *v))));
                vars.extend([Some(head.weight), Some(head.bias)]);
                vars.extend(flatten(om.iter().map(|l| [l.query, l.key, l.value])));
                let model = StageTwoModel {
                    backbone: &bb,
                    student: &student,
                    head: &head,
                    teachers: &tb,
                    omega: &om,
                };
                let parts = combined_loss(tape, backbone, &model, batch, labels, *options)?;
                Ok(StepLoss {
                    total: parts.total,
                    ce: parts.ce,
                    distill: Some(parts.distill),
                    vars,
                })
            }
        }
    }

    fn inference_model(&self, p: &Params) -> TenantModel {
        match (self, &p.backbone, &p.adapter) {
            (Objective::Fusion { adapters }, _, _) => TenantModel::Fusion {
                adapters: adapters.to_vec(),
                omega: p.omega.clone().expect("fusion weights"),
                head: p.head.clone(),
            },
            (_, Some(w), _) => TenantModel::Full {
                weights: w.clone(),
                head: p.head.clone(),
            },
            (_, None, Some(a)) => TenantModel::Adapter {
                adapter: a.clone(),
                head: p.head.clone(),
            },
            (_, None, None) => TenantModel::Head {
                head: p.head.clone(),
            },
        }
    }
}

fn val_metrics(
    backbone: &Backbone,
    model: &TenantModel,
    val: &Prepared,
) -> Result<(f64, Option<f64>)> {
    if val.enc.is_empty() {
        return Ok((f64::NAN, None));
    }
    let probs = predict(backbone, model, &val.enc)?;
    let labels: Vec<u8> = val.labels.iter().map(|&l| l as u8).collect();
    let r = EvalReport::from_scores(&probs, &labels)?;
    Ok((r.accuracy, r.auc))
}

fn fit(
    backbone: &Backbone,
    params: &mut Params,
    objective: &Objective<'_>,
    data: &Data,
    cfg: &TrainConfig,
    shuffle_tag: u64,
) -> Result<Vec<CurvePoint>> {
    let n = data.train.enc.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(
        cfg.learning_rate,
        cfg.epochs * steps_per_epoch,
        cfg.warmup_fraction,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ shuffle_tag);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let sizes: Vec<usize> = params.tensors_mut().iter().map(|t| t.len()).collect();
    let mut optimizer = AdamW::new(sizes, cfg.weight_decay);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut distill_sum) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&PairEncoding> = idx.iter().map(|&i| &data.train.enc[i]).collect();
            let labels: Vec<f64> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let batch = EncodedBatch::from_pairs(&refs)?;
            let mut tape = Tape::new();
            let loss = objective.loss(backbone, params, &mut tape, &batch, &labels)?;
            tape.backward(loss.total)?;
            ce_sum += tape.value(loss.ce).item() * idx.len() as f64;
            if let Some(d) = loss.distill {
                distill_sum += tape.value(d).item() * idx.len() as f64;
            }
            let lr = schedule.lr(step);
            let tensors = params.tensors_mut();
            debug_assert_eq!(tensors.len(), loss.vars.len());
            for (slot, (t, v)) in tensors.into_iter().zip(&loss.vars).enumerate() {
                if let (true, Some(v)) = (t.requires_grad, v) {
                    let g = tape.grad(*v);
                    optimizer.step(slot, t, &g, lr);
                }
            }
            step += 1;
        }
        let model = objective.inference_model(params);
        let (val_accuracy, val_auc) = val_metrics(backbone, &model, &data.val)?;
        curve.push(CurvePoint {
            epoch,
            ce_loss: ce_sum / n as f64,
            distill_loss: matches!(objective, Objective::Distill { .. })
                .then_some(distill_sum / n as f64),
            val_accuracy,
            val_auc,
        });
    }
    Ok(curve)
}

/// First stage: a fresh adapter and head trained on local data.
pub fn train_stage1(
    backbone: &Backbone,
    data: &LabeledPairs,
    cfg: &TrainConfig,
    tenant: &str,
) -> Result<StageOneOutput> {
    cfg.validate()?;
    let prepared = prepare_data(backbone, data)?;
    let adapter =
        AdapterWeights::for_backbone(tenant, backbone.config(), cfg.bottleneck, cfg.seed)?;
    let mut params = Params {
        backbone: None,
        adapter: Some(adapter),
        head: HeadWeights::zeros(backbone.hidden_dim()),
        omega: None,
    };
    let curve = fit(
        backbone,
        &mut params,
        &Objective::Plain,
        &prepared,
        cfg,
        SHUFFLE_STAGE1,
    )?;
    Ok(StageOneOutput {
        adapter: params.adapter.expect("adapter"),
        head: params.head,
        curve,
    })
}

/// Second stage: refine the student under cross-entropy plus `eta` times
/// the distillation loss against fusion over `teachers`. The fusion
/// weights are dropped afterwards.
pub fn train_stage2(
    backbone: &Backbone,
    data: &LabeledPairs,
    student_first: &AdapterWeights,
    head: &HeadWeights,
    teachers: &TeacherSet,
    cfg: &TrainConfig,
    eta: f64,
) -> Result<StageTwoOutput> {
    cfg.validate()?;
    if student_first.stage() != Stage::First {
        return Err(Error::Usage(
            "second stage needs a first-stage student".into(),
        ));
    }
    student_first.check_matches(backbone.config())?;
    if teachers.hidden_dim() != backbone.hidden_dim()
        || teachers.num_layers() != backbone.num_layers()
    {
        return Err(Error::Dimension(
            "teacher adapters do not fit the backbone".into(),
        ));
    }
    let prepared = prepare_data(backbone, data)?;
    let mut student = student_first.clone();
    student.set_trainable(true);
    let mut head = head.clone();
    head.set_trainable(true);
    let mut params = Params {
        backbone: None,
        adapter: Some(student),
        head,
        omega: Some(FusionWeights::init(
            backbone.num_layers(),
            backbone.hidden_dim(),
            cfg.seed ^ FUSION_SEED,
        )?),
    };
    let objective = Objective::Distill {
        teachers,
        options: DistillOptions {
            eta,
            norm: cfg.distill_norm,
            stop_gradient: cfg.stop_gradient,
        },
    };
    let curve = fit(
        backbone,
        &mut params,
        &objective,
        &prepared,
        cfg,
        SHUFFLE_STAGE2,
    )?;
    let mut adapter = params.adapter.expect("student");
    adapter.set_stage(Stage::Final)?;
    Ok(StageTwoOutput {
        adapter,
        head: params.head,
        eta,
        curve,
    })
}

/// Index of the winning grid point: highest validation accuracy, then
/// highest AUC, then smallest eta.
pub(crate) fn pick_eta(scores: &[(f64, f64, Option<f64>)]) -> usize {
    let key = |i: usize| {
        let (eta, acc, auc) = scores[i];
        (acc, auc.unwrap_or(f64::NEG_INFINITY), -eta)
    };
    (0..scores.len())
        .max_by(|&a, &b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0)
                .then(ka.1.total_cmp(&kb.1))
                .then(ka.2.total_cmp(&kb.2))
        })
        .unwrap_or(0)
}

/// Runs the second stage once per grid value with the same seed and keeps
/// the best on the validation split.
pub fn select_eta(
    backbone: &Backbone,
    data: &LabeledPairs,
    student_first: &AdapterWeights,
    head: &HeadWeights,
    teachers: &TeacherSet,
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<EtaSelection> {
    if grid.is_empty() {
        return Err(Error::Config("eta grid is empty".into()));
    }
    if grid.len() == 1 {
        let best = train_stage2(backbone, data, student_first, head, teachers, cfg, grid[0])?;
        return Ok(EtaSelection {
            eta: grid[0],
            scores: Vec::new(),
            best,
        });
    }
    let val = data.split(Split::Val);
    if val.is_empty() {
        return Err(Error::Usage(
            "eta selection needs a validation split".into(),
        ));
    }
    let val = prepare(backbone, &val)?;
    let mut scores = Vec::with_capacity(grid.len());
    let mut outputs = Vec::with_capacity(grid.len());
    for &eta in grid {
        let out = train_stage2(backbone, data, student_first, head, teachers, cfg, eta)?;
        let model = TenantModel::Adapter {
            adapter: out.adapter.clone(),
            head: out.head.clone(),
        };
        let (acc, auc) = val_metrics(backbone, &model, &val)?;
        scores.push((eta, acc, auc));
        outputs.push(out);
    }
    let i = pick_eta(&scores);
    Ok(EtaSelection {
        eta: scores[i].0,
        best: outputs.swap_remove(i),
        scores,
    })
}

/// Baselines: full fine-tuning, head only, single adapter, adapter fusion.
/// `previous` are the final adapters of earlier tenants, used by fusion.
pub fn train_baseline(
    mode: Mode,
    backbone: &Backbone,
    data: &LabeledPairs,
    previous: &[AdapterWeights],
    cfg: &TrainConfig,
    tenant: &str,
) -> Result<TrainedTenant> {
    cfg.validate()?;
    let empty = |mode, model, stage1_curve| TrainedTenant {
        mode,
        model,
        stage1_curve,
        stage2_curve: Vec::new(),
        eta: None,
        eta_scores: Vec::new(),
        teachers: Vec::new(),
    };
    match mode {
        Mode::Head | Mode::Full => {
            let prepared = prepare_data(backbone, data)?;
            let mut params = Params {
                backbone: (mode == Mode::Full).then(|| backbone.trainable_copy()),
                adapter: None,
                head: HeadWeights::zeros(backbone.hidden_dim()),
                omega: None,
            };
            let curve = fit(
                backbone,
                &mut params,
                &Objective::Plain,
                &prepared,
                cfg,
                SHUFFLE_STAGE1,
            )?;
            let model = Objective::Plain.inference_model(&params);
            Ok(empty(mode, model, curve))
        }
        Mode::Adapter => {
            let s1 = train_stage1(backbone, data, cfg, tenant)?;
            let mut adapter = s1.adapter;
            adapter.set_stage(Stage::Final)?;
            Ok(empty(
                mode,
                TenantModel::Adapter {
                    adapter,
                    head: s1.head,
                },
                s1.curve,
            ))
        }
        Mode::AdapterFusion => {
            let s1 = train_stage1(backbone, data, cfg, tenant)?;
            let mut own = s1.adapter.frozen_copy();
            own.set_stage(Stage::Final)?;
            let mut adapters: Vec<AdapterWeights> =
                previous.iter().map(AdapterWeights::frozen_copy).collect();
            adapters.push(own);
            let prepared = prepare_data(backbone, data)?;
            let mut params = Params {
                backbone: None,
                adapter: None,
                head: s1.head,
                omega: Some(FusionWeights::init(
                    backbone.num_layers(),
                    backbone.hidden_dim(),
                    cfg.seed ^ FUSION_SEED,
                )?),
            };
            let objective = Objective::Fusion {
                adapters: &adapters,
            };
            let curve = fit(
                backbone,
                &mut params,
                &objective,
                &prepared,
                cfg,
                SHUFFLE_STAGE2,
            )?;
            let model = objective.inference_model(&params);
            let mut t = empty(mode, model, s1.curve);
            t.stage2_curve = curve;
            t.teachers = previous
                .iter()
                .map(|a| a.tenant_name().to_string())
                .collect();
            Ok(t)
        }
        Mode::AdapterDistill | Mode::AdapterDistillStar => {
            Err(Error::Config(format!("{mode} is not a baseline mode")))
        }
    }
}

/// Trains a tenant in any mode. Distillation modes use every adapter in
/// `previous` as a teacher, plus the first-stage self copy unless the
/// mode is the starred variant.
pub fn train_tenant(
    backbone: &Backbone,
    data: &LabeledPairs,
    previous: &[AdapterWeights],
    cfg: &TrainConfig,
    tenant: &str,
) -> Result<TrainedTenant> {
    if !cfg.mode.uses_distillation() {
        return train_baseline(cfg.mode, backbone, data, previous, cfg, tenant);
    }
    cfg.validate()?;
    let s1 = train_stage1(backbone, data, cfg, tenant)?;
    let include_self = cfg.mode == Mode::AdapterDistill;
    let previous_final: Vec<AdapterWeights> = previous.to_vec();
    if !include_self && previous_final.is_empty() {
        return Err(Error::Usage(
            "distillation without the self teacher needs at least one earlier tenant".into(),
        ));
    }
    let teachers = TeacherSet::new(previous_final, include_self.then(|| s1.adapter.clone()))?;
    let sel = select_eta(
        backbone,
        data,
        &s1.adapter,
        &s1.head,
        &teachers,
        cfg,
        &cfg.eta_grid,
    )?;
    Ok(TrainedTenant {
        mode: cfg.mode,
        model: TenantModel::Adapter {
            adapter: sel.best.adapter,
            head: sel.best.head,
        },
        stage1_curve: s1.curve,
        stage2_curve: sel.best.curve,
        eta: Some(sel.eta),
        eta_scores: sel.scores,
        teachers: previous
            .iter()
            .map(|a| a.tenant_name().to_string())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta_tie_breaks() {
        assert_eq!(pick_eta(&[(0.5, 0.8, Some(0.9)), (1.0, 0.9, Some(0.1))]), 1);
        assert_eq!(pick_eta(&[(0.5, 0.8, Some(0.7)), (1.0, 0.8, Some(0.9))]), 1);
        assert_eq!(
            pick_eta(&[
                (2.0, 0.8, Some(0.9)),
                (0.5, 0.8, Some(0.9)),
                (1.0, 0.8, Some(0.9))
            ]),
            1
        );
        assert_eq!(pick_eta(&[(0.3, 0.1, None)]), 0);
    }
}
