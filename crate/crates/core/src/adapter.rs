//! Per-tenant bottleneck adapters.
//!
//! One adapter sits after every layer's feed-forward output:
//! `z = h + up(gelu(down(h)))`. The up-projection starts at zero, so a
//! fresh adapter leaves the backbone's function unchanged.

use std::fs;
use std::path::Path;

use autograd::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifact::{sha256_hex, write_atomic, ArtifactReader, ArtifactWriter};
use crate::backbone::{BackboneConfig, LayerHook};
use crate::error::{Error, Result};

pub const DOWN_INIT_BOUND: f64 = 1e-2;
pub const DEFAULT_BOTTLENECK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Trained on local data only.
    First,
    /// Refined by distillation (or final by decree for plain adapters).
    Final,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::First => 0,
            Stage::Final => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Stage::First),
            1 => Ok(Stage::Final),
            other => Err(Error::Format(format!("unknown adapter stage {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer<T = Tensor> {
    /// `[d × m]`
    pub down: T,
    /// `[m]`
    pub down_bias: T,
    /// `[m × d]`
    pub up: T,
    /// `[d]`
    pub up_bias: T,
}

impl<T> AdapterLayer<T> {
    pub fn params(&self) -> [&T; 4] {
        [&self.down, &self.down_bias, &self.up, &self.up_bias]
    }

    pub fn params_mut(&mut self) -> [&mut T; 4] {
        [
            &mut self.down,
            &mut self.down_bias,
            &mut self.up,
            &mut self.up_bias,
        ]
    }
}

pub type BoundAdapter = Vec<AdapterLayer<Var>>;

pub fn per_layer_param_count(hidden_dim: usize, bottleneck: usize) -> usize {
    hidden_dim * bottleneck + bottleneck + bottleneck * hidden_dim + hidden_dim
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    tenant_name: String,
    stage: Stage,
    hidden_dim: usize,
    bottleneck: usize,
    pub layers: Vec<AdapterLayer>,
}

impl AdapterWeights {
    /// Seeded near-identity initialization: small uniform down-projection,
    /// zero up-projection and biases.
    pub fn init(
        tenant_name: &str,
        num_layers: usize,
        hidden_dim: usize,
        bottleneck: usize,
        seed: u64,
    ) -> Result<Self> {
        check_dims(num_layers, hidden_dim, bottleneck)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..num_layers)
            .map(|_| AdapterLayer {
                down: Tensor::uniform(&[hidden_dim, bottleneck], DOWN_INIT_BOUND, &mut rng)
                    .trainable(),
                down_bias: Tensor::zeros(&[bottleneck]).trainable(),
                up: Tensor::zeros(&[bottleneck, hidden_dim]).trainable(),
                up_bias: Tensor::zeros(&[hidden_dim]).trainable(),
            })
            .collect();
        Ok(Self {
            tenant_name: tenant_name.to_string(),
            stage: Stage::First,
            hidden_dim,
            bottleneck,
            layers,
        })
    }

    pub fn for_backbone(
        tenant_name: &str,
        config: &BackboneConfig,
        bottleneck: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::init(
            tenant_name,
            config.num_layers,
            config.hidden_dim,
            bottleneck,
            seed,
        )
    }

    pub fn tenant_name(&self) -> &str {
        &self.tenant_name
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Moves the adapter forward to `stage`; going back is refused.
    pub fn set_stage(&mut self, stage: Stage) -> Result<()> {
        if stage < self.stage {
            return Err(Error::Usage(format!(
                "adapter of {} cannot move from {:?} back to {:?}",
                self.tenant_name, self.stage, stage
            )));
        }
        self.stage = stage;
        Ok(())
    }

    pub fn renamed(mut self, tenant_name: &str) -> Self {
        self.tenant_name = tenant_name.to_string();
        self
    }

    pub fn param_count(&self) -> usize {
        self.layers.len() * per_layer_param_count(self.hidden_dim, self.bottleneck)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.requires_grad = trainable;
        }
    }

    pub fn frozen_copy(&self) -> Self {
        let mut c = self.clone();
        c.set_trainable(false);
        c
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.requires_grad)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAdapter {
        self.layers
            .iter()
            .map(|l| AdapterLayer {
                down: tape.leaf(&l.down),
                down_bias: tape.leaf(&l.down_bias),
                up: tape.leaf(&l.up),
                up_bias: tape.leaf(&l.up_bias),
            })
            .collect()
    }

    /// Rebuilds the binding from vars listed in [`AdapterWeights::params`]
    /// order, consuming exactly `4 · L` of them.
    pub fn bind_from(&self, vars: &mut impl Iterator<Item = Var>) -> Result<BoundAdapter> {
        let mut next = || {
            vars.next()
                .ok_or_else(|| Error::Usage("not enough vars for adapter".into()))
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for _ in &self.layers {
            out.push(AdapterLayer {
                down: next()?,
                down_bias: next()?,
                up: next()?,
                up_bias: next()?,
            });
        }
        Ok(out)
    }

    pub fn check_matches(&self, config: &BackboneConfig) -> Result<()> {
        if self.hidden_dim != config.hidden_dim || self.layers.len() != config.num_layers {
            return Err(Error::Dimension(format!(
                "adapter of {} has L={} d={} but the backbone has L={} d={}",
                self.tenant_name,
                self.layers.len(),
                self.hidden_dim,
                config.num_layers,
                config.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ArtifactWriter::new(b"ADPT");
        w.str(&self.tenant_name)?;
        w.u8(self.stage.code())
            .u16(self.layers.len() as u16)
            .u32(self.hidden_dim as u32)
            .u32(self.bottleneck as u32);
        for p in self.params() {
            w.reals(p.data());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ArtifactReader::open(bytes, b"ADPT")?;
        let tenant_name = r.str()?;
        let stage = Stage::from_code(r.u8()?)?;
        let num_layers = r.u16()? as usize;
        let d = r.u32()? as usize;
        let m = r.u32()? as usize;
        check_dims(num_layers, d, m).map_err(|e| Error::Format(e.to_string()))?;
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            layers.push(AdapterLayer {
                down: Tensor::new(&[d, m], r.reals(d * m)?)?.trainable(),
                down_bias: Tensor::new(&[m], r.reals(m)?)?.trainable(),
                up: Tensor::new(&[m, d], r.reals(m * d)?)?.trainable(),
                up_bias: Tensor::new(&[d], r.reals(d)?)?.trainable(),
            });
        }
        r.expect_end()?;
        Ok(Self {
            tenant_name,
            stage,
            hidden_dim: d,
            bottleneck: m,
            layers,
        })
    }

    /// Writes the adapter and returns the SHA-256 of the file bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads the adapter after checking the file against a recorded hash.
    pub fn load_verified(path: &Path, expected_hash: &str) -> Result<Self> {
        let bytes = fs::read(path)?;
        let actual = sha256_hex(&bytes);
        if actual != expected_hash {
            return Err(Error::Integrity(format!(
                "{} hashes to {actual}, expected {expected_hash}",
                path.display()
            )));
        }
        Self::from_bytes(&bytes)
    }
}

/// Exact size in bytes of a serialized adapter.
pub fn file_size(
    tenant_name: &str,
    num_layers: usize,
    hidden_dim: usize,
    bottleneck: usize,
) -> usize {
    let header = 4 + 2 + 2 + tenant_name.len() + 1 + 2 + 4 + 4;
    header + 8 * per_layer_param_count(hidden_dim, bottleneck) * num_layers + 32
}

fn check_dims(num_layers: usize, hidden_dim: usize, bottleneck: usize) -> Result<()> {
    if num_layers == 0 || num_layers > u16::MAX as usize {
        return Err(Error::Config(format!(
            "adapter layer count {num_layers} out of range"
        )));
    }
    if bottleneck == 0 || bottleneck >= hidden_dim {
        return Err(Error::Config(format!(
            "bottleneck {bottleneck} must be positive and below hidden_dim {hidden_dim}"
        )));
    }
    Ok(())
}

/// `h + up(gelu(down · h))` for one layer of a bound adapter.
pub fn forward_layer(tape: &mut Tape, layer: &AdapterLayer<Var>, h: Var) -> Result<Var> {
    let a = tape.matmul(h, layer.down)?;
    let a = tape.add_row(a, layer.down_bias)?;
    let a = tape.gelu(a);
    let b = tape.matmul(a, layer.up)?;
    let b = tape.add_row(b, layer.up_bias)?;
    Ok(tape.add(h, b)?)
}

/// Adapter applied to a `[T × d]` hidden state outside any training run.
/// `layer` is zero-based.
pub fn adapter_forward(h: &Tensor, w: &AdapterWeights, layer: usize) -> Result<Tensor> {
    if layer >= w.num_layers() {
        return Err(Error::Usage(format!(
            "layer {layer} out of range for an adapter with {} layers",
            w.num_layers()
        )));
    }
    if h.rank() != 2 || h.last_dim() != w.hidden_dim() {
        return Err(Error::Dimension(format!(
            "hidden state {:?} does not have width {}",
            h.shape(),
            w.hidden_dim()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let l = &w.layers[layer];
    let bound = AdapterLayer {
        down: tape.constant(l.down.clone()),
        down_bias: tape.constant(l.down_bias.clone()),
        up: tape.constant(l.up.clone()),
        up_bias: tape.constant(l.up_bias.clone()),
    };
    let z = forward_layer(&mut tape, &bound, x)?;
    Ok(tape.value(z).clone())
}

/// Layer hook that runs a single adapter.
pub struct AdapterHook<'a> {
    pub adapter: &'a BoundAdapter,
}

impl LayerHook for AdapterHook<'_> {
    fn after_ffn(&mut self, tape: &mut Tape, layer: usize, h: Var) -> Result<Var> {
        let l = self
            .adapter
            .get(layer)
            .ok_or_else(|| Error::Usage(format!("no adapter for layer {layer}")))?;
        forward_layer(tape, l, h)
    }
}

/// Added trainable parameters as a percentage of the backbone's.
/// With `include_fusion` the per-layer query, key and value matrices of
/// the fusion layer are counted too.
pub fn added_params_fraction(
    adapter: &AdapterWeights,
    backbone: &BackboneConfig,
    include_fusion: bool,
) -> f64 {
    fraction_for_dims(backbone, adapter.bottleneck(), include_fusion)
}

pub fn fraction_for_dims(
    backbone: &BackboneConfig,
    bottleneck: usize,
    include_fusion: bool,
) -> f64 {
    let (d, l) = (backbone.hidden_dim, backbone.num_layers);
    let mut added = l * per_layer_param_count(d, bottleneck);
    if include_fusion {
        added += 3 * d * d * l;
    }
    100.0 * added as f64 / backbone.param_count() as f64
}

/// Bottleneck width whose adapter-only fraction is closest to `target_percent`.
pub fn bottleneck_for_fraction(backbone: &BackboneConfig, target_percent: f64) -> usize {
    (1..backbone.hidden_dim)
        .min_by(|&a, &b| {
            let ea = (fraction_for_dims(backbone, a, false) - target_percent).abs();
            let eb = (fraction_for_dims(backbone, b, false) - target_percent).abs();
            ea.total_cmp(&eb)
        })
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_layer_count() {
        assert_eq!(per_layer_param_count(64, 8), 1096);
        let a = AdapterWeights::init("t", 4, 64, 8, 1).unwrap();
        let enumerated: usize = a.params().iter().map(|p| p.len()).sum();
        assert_eq!(enumerated, 4 * 1096);
        assert_eq!(a.param_count(), enumerated);
    }

    #[test]
    fn bottleneck_must_be_narrower() {
        assert!(AdapterWeights::init("t", 2, 8, 8, 0).is_err());
        assert!(AdapterWeights::init("t", 2, 8, 0, 0).is_err());
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let a = AdapterWeights::init("t", 2, 6, 3, 9).unwrap();
        let h = Tensor::uniform(&[5, 6], 2.0, &mut ChaCha8Rng::seed_from_u64(4));
        let z = adapter_forward(&h, &a, 1).unwrap();
        assert!(z.bit_eq(&h));
        assert!(matches!(adapter_forward(&h, &a, 2), Err(Error::Usage(_))));
    }

    #[test]
    fn stage_only_moves_forward() {
        let mut a = AdapterWeights::init("t", 1, 4, 2, 0).unwrap();
        assert_eq!(a.stage(), Stage::First);
        a.set_stage(Stage::Final).unwrap();
        assert!(a.set_stage(Stage::First).is_err());
        a.set_stage(Stage::Final).unwrap();
    }

    #[test]
    fn bytes_round_trip_and_size() {
        let mut a = AdapterWeights::init("tenant-7", 4, 64, 8, 3).unwrap();
        a.layers[2].up.data_mut()[5] = -1.25;
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes.len(), file_size("tenant-7", 4, 64, 8));
        let back = AdapterWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back.tenant_name(), "tenant-7");
        assert!(back
            .params()
            .iter()
            .zip(a.params())
            .all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn fusion_fraction_is_larger() {
        let cfg = BackboneConfig::default();
        let a = AdapterWeights::for_backbone("t", &cfg, 8, 0).unwrap();
        assert!(added_params_fraction(&a, &cfg, true) > added_params_fraction(&a, &cfg, false));
    }
}
