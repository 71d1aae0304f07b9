use autograd::{Tape, Var};

use super::metrics::EvalReport;
use crate::adapter::{AdapterHook, AdapterWeights};
use crate::backbone::{classify, Backbone, BackboneWeights, EncodedBatch, HeadWeights, NoAdapter};
use crate::error::{Error, Result};
use crate::faq::LabeledPair;
use crate::fusion::{FusionHook, FusionRoute, FusionWeights};
use crate::tokenizer::PairEncoding;

pub const INFERENCE_BATCH: usize = 32;

/// Everything a tenant needs at inference time besides the shared encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum TenantModel {
    Head {
        head: HeadWeights,
    },
    /// Plain and distilled adapters share this variant and its code path.
    Adapter {
        adapter: AdapterWeights,
        head: HeadWeights,
    },
    Full {
        weights: BackboneWeights,
        head: HeadWeights,
    },
    /// Fusion baseline: every fused adapter, the fusion weights and head.
    Fusion {
        adapters: Vec<AdapterWeights>,
        omega: FusionWeights,
        head: HeadWeights,
    },
}

impl TenantModel {
    pub fn head(&self) -> &HeadWeights {
        match self {
            TenantModel::Head { head }
            | TenantModel::Adapter { head, .. }
            | TenantModel::Full { head, .. }
            | TenantModel::Fusion { head, .. } => head,
        }
    }

    /// Pooled `[batch × d]` representation on `tape`.
    pub fn pooled(
        &self,
        backbone: &Backbone,
        tape: &mut Tape,
        batch: &EncodedBatch,
    ) -> Result<Var> {
        match self {
            TenantModel::Head { .. } => {
                let bb = backbone.weights().bind(tape);
                backbone.forward(tape, &bb, batch, &mut NoAdapter)
            }
            TenantModel::Adapter { adapter, .. } => {
                adapter.check_matches(backbone.config())?;
                let bb = backbone.weights().bind(tape);
                let bound = adapter.bind(tape);
                backbone.forward(tape, &bb, batch, &mut AdapterHook { adapter: &bound })
            }
            TenantModel::Full { weights, .. } => {
                let bb = weights.bind(tape);
                backbone.forward(tape, &bb, batch, &mut NoAdapter)
            }
            TenantModel::Fusion {
                adapters, omega, ..
            } => {
                let bb = backbone.weights().bind(tape);
                let bound: Vec<_> = adapters.iter().map(|a| a.bind(tape)).collect();
                let om = omega.bind(tape);
                let mut hook = FusionHook::new(None, &bound, &om, FusionRoute::Fused);
                backbone.forward(tape, &bb, batch, &mut hook)
            }
        }
    }

    /// Matrix-product and attention FLOPs of one inference batch, as
    /// counted by the tape.
    pub fn measured_flops(&self, backbone: &Backbone, encodings: &[PairEncoding]) -> Result<u64> {
        let refs: Vec<&PairEncoding> = encodings.iter().collect();
        let batch = EncodedBatch::from_pairs(&refs)?;
        let mut tape = Tape::new();
        let pooled = self.pooled(backbone, &mut tape, &batch)?;
        let head = self.head().bind(&mut tape);
        head.logits(&mut tape, pooled)?;
        Ok(tape.flops())
    }
}

pub fn encode_examples(
    backbone: &Backbone,
    examples: &[&LabeledPair],
) -> Result<Vec<PairEncoding>> {
    examples
        .iter()
        .map(|e| backbone.encode(&e.query, &e.candidate))
        .collect()
}

/// Matching probabilities, in input order.
pub fn predict(
    backbone: &Backbone,
    model: &TenantModel,
    encodings: &[PairEncoding],
) -> Result<Vec<f64>> {
    let d = backbone.hidden_dim();
    let mut out = Vec::with_capacity(encodings.len());
    for chunk in encodings.chunks(INFERENCE_BATCH) {
        let refs: Vec<&PairEncoding> = chunk.iter().collect();
        let batch = EncodedBatch::from_pairs(&refs)?;
        let mut tape = Tape::new();
        let pooled = model.pooled(backbone, &mut tape, &batch)?;
        for row in tape.value(pooled).data().chunks(d) {
            let v = autograd::Tensor::vector(row.to_vec());
            out.push(classify(&v, model.head())?);
        }
    }
    Ok(out)
}

pub fn evaluate(
    backbone: &Backbone,
    model: &TenantModel,
    examples: &[&LabeledPair],
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let enc = encode_examples(backbone, examples)?;
    let probs = predict(backbone, model, &enc)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    EvalReport::from_scores(&probs, &labels)
}
