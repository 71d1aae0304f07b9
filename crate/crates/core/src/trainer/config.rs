use std::fmt;
use std::str::FromStr;

use crate::adapter::DEFAULT_BOTTLENECK;
use crate::error::{Error, Result};
use crate::fusion::DistillNorm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Tenant-private copy of the whole encoder plus head.
    Full,
    /// Classification head only.
    Head,
    /// First-stage adapter and head.
    Adapter,
    /// Fusion over frozen adapters, kept at inference.
    AdapterFusion,
    /// Two stages, the tenant's first-stage copy among the teachers.
    AdapterDistill,
    /// Two stages without the self teacher.
    AdapterDistillStar,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Full,
        Mode::Head,
        Mode::Adapter,
        Mode::AdapterFusion,
        Mode::AdapterDistill,
        Mode::AdapterDistillStar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Head => "head",
            Mode::Adapter => "adapter",
            Mode::AdapterFusion => "adapter_fusion",
            Mode::AdapterDistill => "adapter_distill",
            Mode::AdapterDistillStar => "adapter_distill_star",
        }
    }

    pub fn uses_distillation(self) -> bool {
        matches!(self, Mode::AdapterDistill | Mode::AdapterDistillStar)
    }

    /// Modes whose inference artifact is a single adapter plus head.
    pub fn has_adapter(self) -> bool {
        matches!(
            self,
            Mode::Adapter | Mode::AdapterDistill | Mode::AdapterDistillStar
        )
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode {s:?}")))
    }
}

/// `[e^-2, e^-1, 1, e, e^2]`
pub fn default_eta_grid() -> Vec<f64> {
    (-2..=2).map(|k| (k as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Peak learning rate of the warmup-then-linear-decay schedule.
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub bottleneck: usize,
    pub eta_grid: Vec<f64>,
    pub distill_norm: DistillNorm,
    pub stop_gradient: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::AdapterDistill,
            epochs: 10,
            learning_rate: 0.01,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            batch_size: 8,
            bottleneck: DEFAULT_BOTTLENECK,
            eta_grid: default_eta_grid(),
            distill_norm: DistillNorm::MeanSquared,
            stop_gradient: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.mode.uses_distillation() {
            if self.eta_grid.is_empty() {
                return Err(Error::Config("eta grid is empty".into()));
            }
            if let Some(bad) = self
                .eta_grid
                .iter()
                .find(|e| !(**e >= 0.0 && e.is_finite()))
            {
                return Err(Error::Config(format!(
                    "eta {bad} is not a finite nonnegative value"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_five_points() {
        let g = default_eta_grid();
        assert_eq!(g.len(), 5);
        assert!((g[0] - (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(g[2], 1.0);
        assert!((g[4] - 2.0f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn modes_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!(matches!("lora".parse::<Mode>(), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.eta_grid.clear();
        assert!(c.validate().is_err());
        c.mode = Mode::Adapter;
        c.validate().unwrap();
        c.epochs = 0;
        assert!(c.validate().is_err());
    }
}
