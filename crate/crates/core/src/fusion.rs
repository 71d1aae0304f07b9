//! Fusion attention over teacher adapters and the distillation objective.
//!
//! At each layer the feed-forward output `h` queries the outputs `z_n` of
//! N frozen teacher adapters:
//! `p = softmax_n(⟨hQ, z_n K⟩)`, `o = Σ_n p_n · z_n V`, computed per token.
//! The student adapter output is then pulled towards `o`.

use autograd::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{forward_layer, AdapterWeights, BoundAdapter, Stage};
use crate::artifact::{ArtifactReader, ArtifactWriter};
use crate::backbone::{Backbone, BoundBackbone, BoundHead, EncodedBatch, LayerHook};
use crate::error::{Error, Result};

pub const FUSION_INIT_BOUND: f64 = 1e-3;
const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer<T = Tensor> {
    pub query: T,
    pub key: T,
    pub value: T,
}

pub type BoundFusion = Vec<FusionLayer<Var>>;

/// Query, key and value matrices for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    hidden_dim: usize,
    pub layers: Vec<FusionLayer>,
}

impl FusionWeights {
    /// Small uniform query/key, identity-plus-noise value.
    pub fn init(num_layers: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if num_layers == 0 || hidden_dim == 0 {
            return Err(Error::Config(
                "fusion needs at least one layer and one dimension".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = hidden_dim;
        let layers = (0..num_layers)
            .map(|_| {
                let query = Tensor::uniform(&[d, d], FUSION_INIT_BOUND, &mut rng).trainable();
                let key = Tensor::uniform(&[d, d], FUSION_INIT_BOUND, &mut rng).trainable();
                let mut value = Tensor::uniform(&[d, d], FUSION_INIT_BOUND, &mut rng).trainable();
                for i in 0..d {
                    value.data_mut()[i * d + i] += 1.0;
                }
                FusionLayer { query, key, value }
            })
            .collect();
        Ok(Self { hidden_dim, layers })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        3 * self.hidden_dim * self.hidden_dim * self.layers.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.query, &l.key, &l.value])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.query, &mut l.key, &mut l.value])
            .collect()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.requires_grad = trainable;
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundFusion {
        self.layers
            .iter()
            .map(|l| FusionLayer {
                query: tape.leaf(&l.query),
                key: tape.leaf(&l.key),
                value: tape.leaf(&l.value),
            })
            .collect()
    }

    pub fn bind_from(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundFusion> {
        let mut next = || {
            vars.next()
                .ok_or_else(|| Error::Usage("not enough vars for fusion".into()))
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for _ in &self.layers {
            out.push(FusionLayer {
                query: next()?,
                key: next()?,
                value: next()?,
            });
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ArtifactWriter::new(b"FUSN");
        w.u16(self.layers.len() as u16).u32(self.hidden_dim as u32);
        for p in self.params() {
            w.reals(p.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ArtifactReader::open(bytes, b"FUSN")?;
        let num_layers = r.u16()? as usize;
        let d = r.u32()? as usize;
        if num_layers == 0 || d == 0 {
            return Err(Error::Format("empty fusion header".into()));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let mut m =
                || -> Result<Tensor> { Ok(Tensor::new(&[d, d], r.reals(d * d)?)?.trainable()) };
            layers.push(FusionLayer {
                query: m()?,
                key: m()?,
                value: m()?,
            });
        }
        r.expect_end()?;
        Ok(Self {
            hidden_dim: d,
            layers,
        })
    }
}

/// Frozen teacher adapters in registration order, optionally followed by
/// the current tenant's own first-stage adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSet {
    teachers: Vec<AdapterWeights>,
    include_self: bool,
}

impl TeacherSet {
    pub fn new(previous: Vec<AdapterWeights>, self_first: Option<AdapterWeights>) -> Result<Self> {
        if let Some(bad) = previous.iter().find(|a| a.stage() != Stage::Final) {
            return Err(Error::Usage(format!(
                "teacher {} has not finished training",
                bad.tenant_name()
            )));
        }
        let include_self = self_first.is_some();
        let mut teachers = previous;
        if let Some(s) = self_first {
            if s.stage() != Stage::First {
                return Err(Error::Usage(
                    "self teacher must be a first-stage copy".into(),
                ));
            }
            teachers.push(s);
        }
        if teachers.is_empty() {
            return Err(Error::Usage("teacher set is empty".into()));
        }
        let (l, d) = (teachers[0].num_layers(), teachers[0].hidden_dim());
        if teachers
            .iter()
            .any(|t| t.num_layers() != l || t.hidden_dim() != d)
        {
            return Err(Error::Dimension(
                "teachers disagree on layer count or width".into(),
            ));
        }
        let teachers = teachers.into_iter().map(|t| t.frozen_copy()).collect();
        Ok(Self {
            teachers,
            include_self,
        })
    }

    pub fn members(&self) -> &[AdapterWeights] {
        &self.teachers
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn include_self(&self) -> bool {
        self.include_self
    }

    pub fn hidden_dim(&self) -> usize {
        self.teachers[0].hidden_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.teachers[0].num_layers()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<BoundAdapter> {
        self.teachers.iter().map(|t| t.bind(tape)).collect()
    }
}

/// Fusion attention on the tape. Returns `(o [T×d], p [T×N])`.
pub fn fusion_attend_vars(
    tape: &mut Tape,
    h: Var,
    teacher_outputs: &[Var],
    layer: &FusionLayer<Var>,
) -> Result<(Var, Var)> {
    if teacher_outputs.is_empty() {
        return Err(Error::Usage("fusion over an empty teacher list".into()));
    }
    let query = tape.matmul(h, layer.query)?;
    let mut scores = Vec::with_capacity(teacher_outputs.len());
    let mut values = Vec::with_capacity(teacher_outputs.len());
    for &z in teacher_outputs {
        let key = tape.matmul(z, layer.key)?;
        let prod = tape.mul(query, key)?;
        scores.push(tape.sum_rows(prod));
        values.push(tape.matmul(z, layer.value)?);
    }
    let scores = tape.concat_cols(&scores)?;
    let p = tape.softmax(scores)?;
    // o = v_1 + sum_{n>1} p_n (v_n - v_1), equal to sum_n p_n v_n because
    // the weights sum to one, and exactly v_1 when all values coincide.
    let mut o = values[0];
    for (n, &v) in values.iter().enumerate().skip(1) {
        let weight = tape.column(p, n)?;
        let diff = tape.sub(v, values[0])?;
        let term = tape.mul_col(diff, weight)?;
        o = tape.add(o, term)?;
    }
    Ok((o, p))
}

/// Fusion attention over plain tensors.
pub fn fusion_attend(
    h: &Tensor,
    teacher_outputs: &[Tensor],
    omega: &FusionLayer,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let zs: Vec<Var> = teacher_outputs
        .iter()
        .map(|z| tape.constant(z.clone()))
        .collect();
    let layer = FusionLayer {
        query: tape.constant(omega.query.clone()),
        key: tape.constant(omega.key.clone()),
        value: tape.constant(omega.value.clone()),
    };
    let (o, p) = fusion_attend_vars(&mut tape, hv, &zs, &layer)?;
    Ok((tape.value(o).clone(), tape.value(p).clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistillNorm {
    /// Mean of squared differences over layers, real tokens and dimensions.
    #[default]
    MeanSquared,
    /// Mean over layers and real tokens of the per-token Euclidean distance.
    L2,
}

impl std::str::FromStr for DistillNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" | "mean_squared" => Ok(Self::MeanSquared),
            "l2" => Ok(Self::L2),
            other => Err(Error::Config(format!("unknown distill norm {other:?}"))),
        }
    }
}

/// Distillation loss between fused outputs `o` and student outputs `z`,
/// one `[rows × d]` pair per layer; `mask` holds one 0/1 entry per row.
pub fn distill_loss_vars(
    tape: &mut Tape,
    o: &[Var],
    z: &[Var],
    mask: &[f64],
    norm: DistillNorm,
) -> Result<Var> {
    if o.len() != z.len() || o.is_empty() {
        return Err(Error::Dimension(format!(
            "{} fused outputs against {} student outputs",
            o.len(),
            z.len()
        )));
    }
    let real: f64 = mask.iter().sum();
    if real <= 0.0 {
        return Err(Error::Usage("distillation mask selects no tokens".into()));
    }
    let mask_col = tape.constant(Tensor::new(&[mask.len(), 1], mask.to_vec())?);
    let mut total: Option<Var> = None;
    let mut width = 1;
    for (&a, &b) in o.iter().zip(z) {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::Dimension(format!(
                "fused {:?} vs student {:?}",
                tape.shape(a),
                tape.shape(b)
            )));
        }
        width = tape.value(a).last_dim();
        let diff = tape.sub(a, b)?;
        let sq = tape.mul(diff, diff)?;
        let per_layer = match norm {
            DistillNorm::MeanSquared => tape.mul_col(sq, mask_col)?,
            DistillNorm::L2 => {
                let rows = tape.sum_rows(sq);
                let eps = tape.constant(Tensor::full(tape.shape(rows), L2_EPS));
                let rows = tape.add(rows, eps)?;
                let dist = tape.sqrt(rows)?;
                tape.mul(dist, mask_col)?
            }
        };
        let s = tape.sum(per_layer);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let denom = match norm {
        DistillNorm::MeanSquared => o.len() as f64 * real * width as f64,
        DistillNorm::L2 => o.len() as f64 * real,
    };
    Ok(tape.scale(total.expect("nonempty"), 1.0 / denom))
}

pub fn distill_loss(o: &[Tensor], z: &[Tensor], mask: &[f64], norm: DistillNorm) -> Result<f64> {
    let mut tape = Tape::new();
    let ov: Vec<Var> = o.iter().map(|t| tape.constant(t.clone())).collect();
    let zv: Vec<Var> = z.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = distill_loss_vars(&mut tape, &ov, &zv, mask, norm)?;
    Ok(tape.value(loss).item())
}

/// Which representation continues through the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionRoute {
    /// The student adapter output (distillation; fusion is a side branch).
    Student,
    /// The fused output (the fusion baseline keeps fusion at inference).
    Fused,
}

/// Layer hook running the teachers, the fusion layer and optionally a
/// student adapter, recording what the distillation loss needs.
pub struct FusionHook<'a> {
    pub student: Option<&'a BoundAdapter>,
    pub teachers: &'a [BoundAdapter],
    pub omega: &'a BoundFusion,
    pub route: FusionRoute,
    pub stop_gradient: bool,
    pub fused: Vec<Var>,
    pub student_out: Vec<Var>,
    pub attention: Vec<Var>,
}

impl<'a> FusionHook<'a> {
    pub fn new(
        student: Option<&'a BoundAdapter>,
        teachers: &'a [BoundAdapter],
        omega: &'a BoundFusion,
        route: FusionRoute,
    ) -> Self {
        Self {
            student,
            teachers,
            omega,
            route,
            stop_gradient: false,
            fused: Vec::new(),
            student_out: Vec::new(),
            attention: Vec::new(),
        }
    }
}

impl LayerHook for FusionHook<'_> {
    fn after_ffn(&mut self, tape: &mut Tape, layer: usize, h: Var) -> Result<Var> {
        let omega = self
            .omega
            .get(layer)
            .ok_or_else(|| Error::Usage(format!("no fusion weights for layer {layer}")))?;
        let mut outs = Vec::with_capacity(self.teachers.len());
        for t in self.teachers {
            let tl = t
                .get(layer)
                .ok_or_else(|| Error::Usage(format!("teacher has no layer {layer}")))?;
            outs.push(forward_layer(tape, tl, h)?);
        }
        let (o, p) = fusion_attend_vars(tape, h, &outs, omega)?;
        let o = if self.stop_gradient {
            tape.detach(o)
        } else {
            o
        };
        self.fused.push(o);
        self.attention.push(p);
        let student = match self.student {
            Some(s) => {
                let sl = s
                    .get(layer)
                    .ok_or_else(|| Error::Usage(format!("student has no layer {layer}")))?;
                let z = forward_layer(tape, sl, h)?;
                self.student_out.push(z);
                Some(z)
            }
            None => None,
        };
        match (self.route, student) {
            (FusionRoute::Student, Some(z)) => Ok(z),
            (FusionRoute::Student, None) => Err(Error::Usage(
                "student route without a student adapter".into(),
            )),
            (FusionRoute::Fused, _) => Ok(o),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillOptions {
    pub eta: f64,
    pub norm: DistillNorm,
    /// Treat the fused output as a constant target.
    pub stop_gradient: bool,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            eta: 1.0,
            norm: DistillNorm::MeanSquared,
            stop_gradient: false,
        }
    }
}

/// Bound parameters taking part in the second-stage objective.
pub struct StageTwoModel<'a> {
    pub backbone: &'a BoundBackbone<'a>,
    pub student: &'a BoundAdapter,
    pub head: &'a BoundHead,
    pub teachers: &'a [BoundAdapter],
    pub omega: &'a BoundFusion,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub distill: Var,
    /// `[batch × 1]` logits of the student path.
    pub logits: Var,
}

/// Cross-entropy of the student path plus `eta` times the distillation
/// loss. The fused output only enters the distillation term.
pub fn combined_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    model: &StageTwoModel<'_>,
    batch: &EncodedBatch,
    labels: &[f64],
    options: DistillOptions,
) -> Result<LossParts> {
    if !(options.eta >= 0.0) || !options.eta.is_finite() {
        return Err(Error::Config(format!(
            "eta must be finite and nonnegative, got {}",
            options.eta
        )));
    }
    let mut hook = FusionHook::new(
        Some(model.student),
        model.teachers,
        model.omega,
        FusionRoute::Student,
    );
    hook.stop_gradient = options.stop_gradient;
    let pooled = backbone.forward(tape, model.backbone, batch, &mut hook)?;
    let logits = model.head.logits(tape, pooled)?;
    let ce = tape.bce_with_logits(logits, labels)?;
    let distill = distill_loss_vars(
        tape,
        &hook.fused,
        &hook.student_out,
        &batch.mask,
        options.norm,
    )?;
    let weighted = tape.scale(distill, options.eta);
    let total = tape.add(ce, weighted)?;
    Ok(LossParts {
        total,
        ce,
        distill,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_teacher_takes_all_weight() {
        let omega = FusionWeights::init(1, 4, 2).unwrap();
        let h = rand_t(&[3, 4], 1);
        let z = rand_t(&[3, 4], 2);
        let (o, p) = fusion_attend(&h, &[z.clone()], &omega.layers[0]).unwrap();
        assert!(p.data().iter().all(|&x| x == 1.0));
        let mut expect = vec![0.0; 12];
        autograd::kernels::matmul_acc(z.data(), omega.layers[0].value.data(), &mut expect, 3, 4, 4);
        assert!(o
            .data()
            .iter()
            .zip(&expect)
            .all(|(a, b)| (a - b).abs() <= 1e-15));
    }

    #[test]
    fn identity_value_and_equal_teachers_return_them() {
        let mut omega = FusionWeights::init(1, 3, 5).unwrap();
        omega.layers[0].value = Tensor::eye(3);
        let h = rand_t(&[2, 3], 3);
        let z = rand_t(&[2, 3], 4);
        let (o, _) =
            fusion_attend(&h, &[z.clone(), z.clone(), z.clone()], &omega.layers[0]).unwrap();
        assert!(o.max_abs_diff(&z) <= 1e-15);
    }

    #[test]
    fn empty_teacher_list_rejected() {
        let omega = FusionWeights::init(1, 3, 5).unwrap();
        assert!(matches!(
            fusion_attend(&rand_t(&[2, 3], 1), &[], &omega.layers[0]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn distill_conventions() {
        let a = rand_t(&[3, 2], 1);
        let ones = Tensor::new(&[3, 2], a.data().iter().map(|x| x + 1.0).collect()).unwrap();
        let mask = [1.0, 1.0, 0.0];
        assert_eq!(
            distill_loss(&[a.clone()], &[a.clone()], &mask, DistillNorm::MeanSquared).unwrap(),
            0.0
        );
        let v = distill_loss(&[ones], &[a.clone()], &mask, DistillNorm::MeanSquared).unwrap();
        assert!((v - 1.0).abs() <= 1e-12);
        assert!(matches!(
            distill_loss(&[a.clone()], &[a], &[0.0; 3], DistillNorm::MeanSquared),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn teacher_set_order_and_validation() {
        let mut prev = AdapterWeights::init("a", 2, 4, 2, 0).unwrap();
        prev.set_stage(Stage::Final).unwrap();
        let me = AdapterWeights::init("me", 2, 4, 2, 1).unwrap();
        let set = TeacherSet::new(vec![prev.clone()], Some(me.clone())).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.members()[1].tenant_name(), "me");
        assert!(set.members().iter().all(|t| t.is_frozen()));
        assert!(TeacherSet::new(vec![me.clone()], None).is_err());
        assert!(TeacherSet::new(vec![], None).is_err());
        let wide = {
            let mut w = AdapterWeights::init("w", 2, 6, 2, 0).unwrap();
            w.set_stage(Stage::Final).unwrap();
            w
        };
        assert!(matches!(
            TeacherSet::new(vec![prev, wide], Some(me)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fusion_bytes_round_trip() {
        let f = FusionWeights::init(2, 3, 8).unwrap();
        let back = FusionWeights::from_bytes(&f.to_bytes()).unwrap();
        assert!(back
            .params()
            .iter()
            .zip(f.params())
            .all(|(a, b)| a.bit_eq(b)));
    }
}
