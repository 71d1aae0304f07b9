//! Flat `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so typos do not pass silently.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::faq::DatasetOptions;
use crate::fusion::DistillNorm;
use crate::trainer::TrainConfig;

pub const DEFAULT_CACHE_CAPACITY: usize = 8;

/// Ordered `key=value` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    pub entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            if entries.iter().any(|(e, _)| *e == k) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key {k:?}"),
                });
            }
            entries.push((k, v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
            })
            .transpose()
    }
}

/// Everything a platform directory or a command needs besides the mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub dataset: DatasetOptions,
    pub cache_capacity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetOptions::default(),
            cache_capacity: DEFAULT_CACHE_CAPACITY,
        }
    }
}

const KEYS: &[&str] = &[
    "vocab_size",
    "hidden_dim",
    "num_layers",
    "num_heads",
    "ffn_dim",
    "max_seq_len",
    "backbone_seed",
    "epochs",
    "learning_rate",
    "warmup_fraction",
    "weight_decay",
    "batch_size",
    "bottleneck",
    "eta_grid",
    "distill_norm",
    "stop_gradient",
    "seed",
    "positive_cap",
    "negatives_per_positive",
    "cache_capacity",
];

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad {what} entry {x:?}")))
        })
        .collect()
}

impl RunConfig {
    /// Defaults overridden by every key present in `kv`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        if let Some((k, _)) = kv.entries.iter().find(|(k, _)| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown configuration key {k:?}")));
        }
        let mut c = Self::default();
        let b = &mut c.backbone;
        macro_rules! take {
            ($field:expr, $key:literal) => {
                if let Some(v) = kv.typed($key)? {
                    $field = v;
                }
            };
        }
        take!(b.vocab_size, "vocab_size");
        take!(b.hidden_dim, "hidden_dim");
        take!(b.num_layers, "num_layers");
        take!(b.num_heads, "num_heads");
        take!(b.ffn_dim, "ffn_dim");
        take!(b.max_seq_len, "max_seq_len");
        take!(b.seed, "backbone_seed");
        let t = &mut c.train;
        take!(t.epochs, "epochs");
        take!(t.learning_rate, "learning_rate");
        take!(t.warmup_fraction, "warmup_fraction");
        take!(t.weight_decay, "weight_decay");
        take!(t.batch_size, "batch_size");
        take!(t.bottleneck, "bottleneck");
        take!(t.stop_gradient, "stop_gradient");
        take!(t.seed, "seed");
        if let Some(v) = kv.get("eta_grid") {
            t.eta_grid = parse_list(v, "eta_grid").map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(v) = kv.get("distill_norm") {
            t.distill_norm = v.parse::<DistillNorm>()?;
        }
        take!(c.dataset.positive_cap, "positive_cap");
        take!(c.dataset.negatives_per_positive, "negatives_per_positive");
        take!(c.cache_capacity, "cache_capacity");
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let mut t = self.train.clone();
        t.mode = crate::trainer::Mode::AdapterDistill;
        t.validate()?;
        if self.cache_capacity == 0 {
            return Err(Error::Config("cache_capacity must be at least 1".into()));
        }
        if self.dataset.negatives_per_positive == 0 {
            return Err(Error::Config(
                "negatives_per_positive must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let (b, t) = (&self.backbone, &self.train);
        let mut kv = KeyValues::default();
        kv.set("vocab_size", b.vocab_size);
        kv.set("hidden_dim", b.hidden_dim);
        kv.set("num_layers", b.num_layers);
        kv.set("num_heads", b.num_heads);
        kv.set("ffn_dim", b.ffn_dim);
        kv.set("max_seq_len", b.max_seq_len);
        kv.set("backbone_seed", b.seed);
        kv.set("epochs", t.epochs);
        kv.set("learning_rate", t.learning_rate);
        kv.set("warmup_fraction", t.warmup_fraction);
        kv.set("weight_decay", t.weight_decay);
        kv.set("batch_size", t.batch_size);
        kv.set("bottleneck", t.bottleneck);
        let grid: Vec<String> = t.eta_grid.iter().map(f64::to_string).collect();
        kv.set("eta_grid", grid.join(","));
        kv.set(
            "distill_norm",
            match t.distill_norm {
                DistillNorm::MeanSquared => "mse",
                DistillNorm::L2 => "l2",
            },
        );
        kv.set("stop_gradient", t.stop_gradient);
        kv.set("seed", t.seed);
        kv.set("positive_cap", self.dataset.positive_cap);
        kv.set(
            "negatives_per_positive",
            self.dataset.negatives_per_positive,
        );
        kv.set("cache_capacity", self.cache_capacity);
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.train.eta_grid = vec![0.5, 2.0];
        c.backbone.hidden_dim = 32;
        c.train.distill_norm = DistillNorm::L2;
        let back = RunConfig::from_kv(&KeyValues::parse(&c.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_errors() {
        let kv = KeyValues::parse("# note\n\nepochs = 3\n").unwrap();
        assert_eq!(RunConfig::from_kv(&kv).unwrap().train.epochs, 3);
        assert!(matches!(
            KeyValues::parse("a=1\nnope"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            KeyValues::parse("a=1\na=2"),
            Err(Error::Parse { line: 2, .. })
        ));
        let kv = KeyValues::parse("epoch=3").unwrap();
        assert!(matches!(RunConfig::from_kv(&kv), Err(Error::Config(_))));
        let kv = KeyValues::parse("epochs=three").unwrap();
        assert!(matches!(RunConfig::from_kv(&kv), Err(Error::Config(_))));
    }
}
