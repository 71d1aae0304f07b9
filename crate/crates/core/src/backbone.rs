//! Frozen transformer encoder shared by every tenant.
//!
//! The weights are a seeded random initialization that is never updated
//! after construction (except in a tenant-private copy for full
//! fine-tuning). Attention key projections are drawn as the query
//! projection plus noise, so the frozen heads attend preferentially to
//! tokens with similar embeddings; this gives adapters a usable
//! token-matching signal to build on.

use autograd::{AttentionLayout, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifact::{sha256_hex, ArtifactReader, ArtifactWriter};
use crate::error::{Error, Result};
use crate::tokenizer::{PairEncoding, Tokenizer};

pub const LAYERNORM_EPS: f64 = 1e-5;
/// Probabilities at or above this value are labelled positive.
pub const CLASSIFICATION_THRESHOLD: f64 = 0.5;
const SEGMENTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8192,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 128,
            max_seq_len: 32,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Dimensions of a BERT-base encoder with a 21128-entry vocabulary.
    pub fn bert_base() -> Self {
        Self {
            vocab_size: 21128,
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_dim: 3072,
            max_seq_len: 512,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.num_layers > u16::MAX as usize {
            return Err(Error::Config("too many layers".into()));
        }
        Tokenizer::new(self.vocab_size)?;
        Ok(())
    }

    /// Closed-form parameter count of the encoder (no classification head).
    pub fn param_count(&self) -> usize {
        let (v, d, f, t) = (
            self.vocab_size,
            self.hidden_dim,
            self.ffn_dim,
            self.max_seq_len,
        );
        let embeddings = v * d + t * d + SEGMENTS * d + 2 * d;
        let per_layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
        embeddings + self.num_layers * per_layer
    }
}

/// Parameters of one encoder layer. Generic so the same layout serves
/// stored tensors and their tape bindings.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T = Tensor> {
    pub query: T,
    pub query_bias: T,
    pub key: T,
    pub key_bias: T,
    pub value: T,
    pub value_bias: T,
    pub output: T,
    pub output_bias: T,
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub ffn_in: T,
    pub ffn_in_bias: T,
    pub ffn_out: T,
    pub ffn_out_bias: T,
    pub ffn_norm_gain: T,
    pub ffn_norm_bias: T,
}

impl<T> LayerWeights<T> {
    pub fn params(&self) -> Vec<&T> {
        vec![
            &self.query,
            &self.query_bias,
            &self.key,
            &self.key_bias,
            &self.value,
            &self.value_bias,
            &self.output,
            &self.output_bias,
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut T> {
        vec![
            &mut self.query,
            &mut self.query_bias,
            &mut self.key,
            &mut self.key_bias,
            &mut self.value,
            &mut self.value_bias,
            &mut self.output,
            &mut self.output_bias,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerWeights<U> {
        LayerWeights {
            query: f(&self.query),
            query_bias: f(&self.query_bias),
            key: f(&self.key),
            key_bias: f(&self.key_bias),
            value: f(&self.value),
            value_bias: f(&self.value_bias),
            output: f(&self.output),
            output_bias: f(&self.output_bias),
            attn_norm_gain: f(&self.attn_norm_gain),
            attn_norm_bias: f(&self.attn_norm_bias),
            ffn_in: f(&self.ffn_in),
            ffn_in_bias: f(&self.ffn_in_bias),
            ffn_out: f(&self.ffn_out),
            ffn_out_bias: f(&self.ffn_out_bias),
            ffn_norm_gain: f(&self.ffn_norm_gain),
            ffn_norm_bias: f(&self.ffn_norm_bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub segment_embedding: Tensor,
    pub embed_norm_gain: Tensor,
    pub embed_norm_bias: Tensor,
    pub layers: Vec<LayerWeights>,
}

/// Token table of a bound backbone. A frozen table stays off the tape and
/// only the gathered rows enter it as constants.
#[derive(Clone, Copy)]
pub enum TokenTable<'a> {
    Bound(Var),
    Frozen(&'a Tensor),
}

/// Backbone weights bound to a tape.
pub struct BoundBackbone<'a> {
    pub token_embedding: TokenTable<'a>,
    pub position_embedding: Var,
    pub segment_embedding: Var,
    pub embed_norm_gain: Var,
    pub embed_norm_bias: Var,
    pub layers: Vec<LayerWeights<Var>>,
}

impl BoundBackbone<'_> {
    /// Vars in the order of [`BackboneWeights::params_mut`].
    pub fn vars(&self) -> Vec<Option<Var>> {
        let token = match self.token_embedding {
            TokenTable::Bound(v) => Some(v),
            TokenTable::Frozen(_) => None,
        };
        let mut out = vec![
            token,
            Some(self.position_embedding),
            Some(self.segment_embedding),
            Some(self.embed_norm_gain),
            Some(self.embed_norm_bias),
        ];
        for l in &self.layers {
            out.extend(l.params().into_iter().map(|v| Some(*v)));
        }
        out
    }
}

impl BackboneWeights {
    fn init(config: &BackboneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let wd = (3.0 / d as f64).sqrt();
        let wf = (3.0 / f as f64).sqrt();
        let token_embedding = Tensor::uniform(&[config.vocab_size, d], 1.0, &mut rng);
        let position_embedding = Tensor::uniform(&[config.max_seq_len, d], 0.2, &mut rng);
        let segment_embedding = Tensor::uniform(&[SEGMENTS, d], 0.5, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| {
                let query = Tensor::uniform(&[d, d], wd, &mut rng);
                let noise = Tensor::uniform(&[d, d], 0.1 * wd, &mut rng);
                let key_data = query
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(a, b)| a + b)
                    .collect();
                LayerWeights {
                    key: Tensor::new(&[d, d], key_data).expect("square"),
                    query,
                    query_bias: Tensor::zeros(&[d]),
                    key_bias: Tensor::zeros(&[d]),
                    value: Tensor::uniform(&[d, d], wd, &mut rng),
                    value_bias: Tensor::zeros(&[d]),
                    output: Tensor::uniform(&[d, d], wd, &mut rng),
                    output_bias: Tensor::zeros(&[d]),
                    attn_norm_gain: Tensor::full(&[d], 1.0),
                    attn_norm_bias: Tensor::zeros(&[d]),
                    ffn_in: Tensor::uniform(&[d, f], wd, &mut rng),
                    ffn_in_bias: Tensor::zeros(&[f]),
                    ffn_out: Tensor::uniform(&[f, d], wf, &mut rng),
                    ffn_out_bias: Tensor::zeros(&[d]),
                    ffn_norm_gain: Tensor::full(&[d], 1.0),
                    ffn_norm_bias: Tensor::zeros(&[d]),
                }
            })
            .collect();
        Self {
            token_embedding,
            position_embedding,
            segment_embedding,
            embed_norm_gain: Tensor::full(&[d], 1.0),
            embed_norm_bias: Tensor::zeros(&[d]),
            layers,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.segment_embedding,
            &self.embed_norm_gain,
            &self.embed_norm_bias,
        ];
        for l in &self.layers {
            out.extend(l.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.segment_embedding,
            &mut self.embed_norm_gain,
            &mut self.embed_norm_bias,
        ];
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.requires_grad = trainable;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.requires_grad)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBackbone<'_> {
        let token_embedding = if self.token_embedding.requires_grad {
            TokenTable::Bound(tape.leaf(&self.token_embedding))
        } else {
            TokenTable::Frozen(&self.token_embedding)
        };
        BoundBackbone {
            token_embedding,
            position_embedding: tape.leaf(&self.position_embedding),
            segment_embedding: tape.leaf(&self.segment_embedding),
            embed_norm_gain: tape.leaf(&self.embed_norm_gain),
            embed_norm_bias: tape.leaf(&self.embed_norm_bias),
            layers: self
                .layers
                .iter()
                .map(|l| l.map(|t| tape.leaf(t)))
                .collect(),
        }
    }

    fn write_payload(&self, w: &mut ArtifactWriter) {
        for p in self.params() {
            w.reals(p.data());
        }
    }

    /// SHA-256 over the serialized weights.
    pub fn fingerprint(&self) -> String {
        let mut w = ArtifactWriter::new(b"BKBN");
        self.write_payload(&mut w);
        sha256_hex(&w.finish())
    }
}

/// Hook invoked on each layer's feed-forward output `h` (before the
/// residual and normalization). Returns what enters the residual sum.
pub trait LayerHook {
    fn after_ffn(&mut self, tape: &mut Tape, layer: usize, h: Var) -> Result<Var>;
}

/// Leaves the feed-forward output untouched.
pub struct NoAdapter;

impl LayerHook for NoAdapter {
    fn after_ffn(&mut self, _tape: &mut Tape, _layer: usize, h: Var) -> Result<Var> {
        Ok(h)
    }
}

/// Records every hidden state passed through it.
#[derive(Default)]
pub struct RecordHidden {
    pub hidden: Vec<Var>,
}

impl LayerHook for RecordHidden {
    fn after_ffn(&mut self, _tape: &mut Tape, _layer: usize, h: Var) -> Result<Var> {
        self.hidden.push(h);
        Ok(h)
    }
}

/// A padded batch of pair encodings, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub mask: Vec<f64>,
    pub batch: usize,
    pub seq: usize,
}

impl EncodedBatch {
    pub fn from_pairs(pairs: &[&PairEncoding]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Usage("empty batch".into()))?;
        let seq = first.len();
        let mut ids = Vec::with_capacity(seq * pairs.len());
        let mut segments = Vec::with_capacity(seq * pairs.len());
        let mut mask = Vec::with_capacity(seq * pairs.len());
        for p in pairs {
            if p.len() != seq {
                return Err(Error::Dimension(format!(
                    "pair of length {} in a batch of length {seq}",
                    p.len()
                )));
            }
            ids.extend_from_slice(&p.ids);
            segments.extend_from_slice(&p.segments);
            mask.extend(p.mask.iter().map(|&m| f64::from(m)));
        }
        Ok(Self {
            ids,
            segments,
            mask,
            batch: pairs.len(),
            seq,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Hidden states produced by [`Backbone::encode_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairStates {
    /// Feed-forward output of every layer, `[max_seq_len × d]` each.
    pub hidden: Vec<Tensor>,
    /// Masked mean of the final layer output, `[d]`.
    pub pooled: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    tokenizer: Tokenizer,
    weights: BackboneWeights,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let weights = BackboneWeights::init(&config);
        let tokenizer = Tokenizer::new(config.vocab_size)?;
        Ok(Self {
            config,
            tokenizer,
            weights,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn weights(&self) -> &BackboneWeights {
        &self.weights
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn encode(&self, query: &str, candidate: &str) -> Result<PairEncoding> {
        self.tokenizer
            .encode_pair(query, candidate, self.config.max_seq_len)
    }

    /// Runs the encoder over `batch` and returns the pooled `[batch × d]`
    /// representation. `weights` is either the shared frozen set or a
    /// tenant-private copy with the same configuration.
    pub fn forward<H: LayerHook + ?Sized>(
        &self,
        tape: &mut Tape,
        weights: &BoundBackbone<'_>,
        batch: &EncodedBatch,
        hook: &mut H,
    ) -> Result<Var> {
        let x = self.forward_tokens(tape, weights, batch, hook)?;
        masked_mean(tape, x, batch)
    }

    /// Final-layer token states, `[batch · seq × d]`.
    pub fn forward_tokens<H: LayerHook + ?Sized>(
        &self,
        tape: &mut Tape,
        weights: &BoundBackbone<'_>,
        batch: &EncodedBatch,
        hook: &mut H,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch.seq > cfg.max_seq_len {
            return Err(Error::Dimension(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, cfg.max_seq_len
            )));
        }
        let tokens = match weights.token_embedding {
            TokenTable::Bound(table) => tape.gather_rows(table, &batch.ids)?,
            TokenTable::Frozen(table) => {
                let d = cfg.hidden_dim;
                let mut data = Vec::with_capacity(batch.ids.len() * d);
                for &id in &batch.ids {
                    if id >= cfg.vocab_size {
                        return Err(Error::Dimension(format!(
                            "token id {id} outside vocabulary"
                        )));
                    }
                    data.extend_from_slice(table.row(id));
                }
                tape.constant(Tensor::new(&[batch.ids.len(), d], data)?)
            }
        };
        let positions: Vec<usize> = (0..batch.rows()).map(|r| r % batch.seq).collect();
        let pos = tape.gather_rows(weights.position_embedding, &positions)?;
        let seg = tape.gather_rows(weights.segment_embedding, &batch.segments)?;
        let x = tape.add(tokens, pos)?;
        let x = tape.add(x, seg)?;
        let mut x = tape.layernorm(
            x,
            weights.embed_norm_gain,
            weights.embed_norm_bias,
            LAYERNORM_EPS,
        )?;

        let layout = AttentionLayout {
            batch: batch.batch,
            seq: batch.seq,
            heads: cfg.num_heads,
        };
        for (l, lw) in weights.layers.iter().enumerate() {
            let q = linear(tape, x, lw.query, lw.query_bias)?;
            let k = linear(tape, x, lw.key, lw.key_bias)?;
            let v = linear(tape, x, lw.value, lw.value_bias)?;
            let a = tape.attention(q, k, v, layout, &batch.mask)?;
            let a = linear(tape, a, lw.output, lw.output_bias)?;
            let r = tape.add(x, a)?;
            let x1 = tape.layernorm(r, lw.attn_norm_gain, lw.attn_norm_bias, LAYERNORM_EPS)?;
            let f = linear(tape, x1, lw.ffn_in, lw.ffn_in_bias)?;
            let f = tape.gelu(f);
            let h = linear(tape, f, lw.ffn_out, lw.ffn_out_bias)?;
            let z = hook.after_ffn(tape, l, h)?;
            let r = tape.add(x1, z)?;
            x = tape.layernorm(r, lw.ffn_norm_gain, lw.ffn_norm_bias, LAYERNORM_EPS)?;
        }
        Ok(x)
    }

    /// Per-layer hidden states of one query/candidate pair.
    pub fn encode_pair(&self, query: &str, candidate: &str) -> Result<PairStates> {
        let enc = self.encode(query, candidate)?;
        let batch = EncodedBatch::from_pairs(&[&enc])?;
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape);
        let mut rec = RecordHidden::default();
        let pooled = self.forward(&mut tape, &bound, &batch, &mut rec)?;
        let hidden = rec.hidden.iter().map(|&h| tape.value(h).clone()).collect();
        let pooled = tape
            .value(pooled)
            .clone()
            .reshape(&[self.config.hidden_dim])?;
        Ok(PairStates { hidden, pooled })
    }

    /// Copy of the shared weights for a tenant that fine-tunes everything.
    pub fn trainable_copy(&self) -> BackboneWeights {
        let mut w = self.weights.clone();
        w.set_trainable(true);
        w
    }

    pub fn save_weights(&self, weights: &BackboneWeights) -> Vec<u8> {
        let c = &self.config;
        let mut w = ArtifactWriter::new(b"BKBN");
        w.u32(c.vocab_size as u32)
            .u32(c.hidden_dim as u32)
            .u16(c.num_layers as u16)
            .u16(c.num_heads as u16)
            .u32(c.ffn_dim as u32)
            .u32(c.max_seq_len as u32);
        weights.write_payload(&mut w);
        w.finish()
    }

    /// Loads a tenant-private weight set saved by [`Backbone::save_weights`].
    pub fn load_weights(&self, bytes: &[u8]) -> Result<BackboneWeights> {
        let c = &self.config;
        let mut r = ArtifactReader::open(bytes, b"BKBN")?;
        let dims = (
            r.u32()? as usize,
            r.u32()? as usize,
            r.u16()? as usize,
            r.u16()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        if dims
            != (
                c.vocab_size,
                c.hidden_dim,
                c.num_layers,
                c.num_heads,
                c.ffn_dim,
                c.max_seq_len,
            )
        {
            return Err(Error::Format(format!(
                "backbone header {dims:?} does not match configuration"
            )));
        }
        let mut weights = self.weights.clone();
        for p in weights.params_mut() {
            let data = r.reals(p.len())?;
            p.data_mut().copy_from_slice(&data);
        }
        r.expect_end()?;
        Ok(weights)
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

fn masked_mean(tape: &mut Tape, x: Var, batch: &EncodedBatch) -> Result<Var> {
    let mask = tape.constant(Tensor::new(&[batch.rows(), 1], batch.mask.clone())?);
    let kept = tape.mul_col(x, mask)?;
    let sums = tape.sum_row_groups(kept, batch.seq)?;
    let inv: Vec<f64> = batch
        .mask
        .chunks(batch.seq)
        .map(|m| 1.0 / m.iter().sum::<f64>().max(1.0))
        .collect();
    let inv = tape.constant(Tensor::new(&[batch.batch, 1], inv)?);
    Ok(tape.mul_col(sums, inv)?)
}

/// Sigmoid classification head over the pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `[d × 1]`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

impl HeadWeights {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[hidden_dim, 1]).trainable(),
            bias: Tensor::zeros(&[1]).trainable(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.weight.requires_grad = trainable;
        self.bias.requires_grad = trainable;
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ArtifactWriter::new(b"HEAD");
        w.u32(self.hidden_dim() as u32);
        w.reals(self.weight.data()).reals(self.bias.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ArtifactReader::open(bytes, b"HEAD")?;
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(Error::Format("head with zero width".into()));
        }
        let weight = Tensor::new(&[d, 1], r.reals(d)?)?.trainable();
        let bias = Tensor::new(&[1], r.reals(1)?)?.trainable();
        r.expect_end()?;
        Ok(Self { weight, bias })
    }
}

impl BoundHead {
    /// `[batch × 1]` logits.
    pub fn logits(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        linear(tape, pooled, self.weight, self.bias)
    }
}

/// Probability that a pooled vector is a matching pair.
pub fn classify(pooled: &Tensor, head: &HeadWeights) -> Result<f64> {
    if pooled.len() != head.hidden_dim() {
        return Err(Error::Dimension(format!(
            "pooled vector of {} values for a head of width {}",
            pooled.len(),
            head.hidden_dim()
        )));
    }
    let logit = autograd::kernels::dot(pooled.data(), head.weight.data()) + head.bias.item();
    // keep saturated logits strictly inside (0, 1)
    let below_one = 1.0 - f64::EPSILON / 2.0;
    Ok(autograd::kernels::sigmoid(logit).clamp(f64::MIN_POSITIVE, below_one))
}

pub fn predicted_label(probability: f64) -> bool {
    probability >= CLASSIFICATION_THRESHOLD
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 64,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 12,
            max_seq_len: 10,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(matches!(Backbone::new(c), Err(Error::Config(_))));
        let mut c = tiny();
        c.max_seq_len = 1;
        assert!(Backbone::new(c).is_err());
    }

    #[test]
    fn param_count_matches_enumeration() {
        let b = Backbone::new(tiny()).unwrap();
        let enumerated: usize = b.weights().params().iter().map(|p| p.len()).sum();
        assert_eq!(enumerated, tiny().param_count());
    }

    #[test]
    fn weights_are_frozen_and_reproducible() {
        let a = Backbone::new(tiny()).unwrap();
        let b = Backbone::new(tiny()).unwrap();
        assert!(a.weights().is_frozen());
        assert_eq!(a.weights().fingerprint(), b.weights().fingerprint());
        let mut other = tiny();
        other.seed = 4;
        assert_ne!(
            a.weights().fingerprint(),
            Backbone::new(other).unwrap().weights().fingerprint()
        );
    }

    #[test]
    fn encode_pair_shapes_and_determinism() {
        let b = Backbone::new(tiny()).unwrap();
        let s1 = b
            .encode_pair("reset my password", "how to change password")
            .unwrap();
        let s2 = b
            .encode_pair("reset my password", "how to change password")
            .unwrap();
        assert_eq!(s1.hidden.len(), 2);
        for h in &s1.hidden {
            assert_eq!(h.shape(), &[10, 8]);
        }
        assert_eq!(s1.pooled.shape(), &[8]);
        assert!(s1.hidden.iter().zip(&s2.hidden).all(|(a, b)| a.bit_eq(b)));
        let long = "word ".repeat(40);
        let s3 = b.encode_pair(&long, &long).unwrap();
        assert_eq!(s3.hidden[0].shape(), &[10, 8]);
    }

    #[test]
    fn classify_contract() {
        let head = HeadWeights::zeros(4);
        assert_eq!(
            classify(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]), &head).unwrap(),
            0.5
        );
        assert!(predicted_label(0.5));
        assert!(!predicted_label(0.4999));
        assert!(matches!(
            classify(&Tensor::vector(vec![1.0]), &head),
            Err(Error::Dimension(_))
        ));
        let mut head = HeadWeights::zeros(2);
        head.weight.data_mut().copy_from_slice(&[30.0, -30.0]);
        let p = classify(&Tensor::vector(vec![1.0, -1.0]), &head).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn private_weights_round_trip() {
        let b = Backbone::new(tiny()).unwrap();
        let mut w = b.trainable_copy();
        w.layers[1].ffn_out.data_mut()[3] = 42.0;
        let bytes = b.save_weights(&w);
        let back = b.load_weights(&bytes).unwrap();
        assert!(back
            .params()
            .iter()
            .zip(w.params())
            .all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn head_round_trip() {
        let mut h = HeadWeights::zeros(3);
        h.weight.data_mut()[1] = -0.5;
        h.bias.data_mut()[0] = 0.25;
        let back = HeadWeights::from_bytes(&h.to_bytes()).unwrap();
        assert!(back.weight.bit_eq(&h.weight) && back.bias.bit_eq(&h.bias));
    }
}
