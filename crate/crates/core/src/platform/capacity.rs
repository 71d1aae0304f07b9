//! How many tenants fit in a given amount of storage.
//!
//! Full fine-tuning stores a whole encoder per tenant. Every other mode
//! shares one encoder and stores per-tenant artifacts only. With the default
//! sizes the full and distill counts match the reference table exactly. The
//! reference fusion counts (0, 6, 53, 111, 578, 1161) are not consistent with
//! any single per-tenant fusion size; this formula gives 1, 7 and 112 at
//! 500MB, 1GB and 10GB, so fusion is compared within one tenant.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Artifact sizes in MB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageModel {
    pub base_mb: f64,
    pub fusion_mb: f64,
    pub adapter_mb: f64,
    pub head_mb: f64,
    pub mb_per_gb: f64,
}

impl Default for StorageModel {
    fn default() -> Self {
        Self {
            base_mb: 391.0,
            fusion_mb: 82.0,
            adapter_mb: 3.5,
            head_mb: 2.3,
            mb_per_gb: 1024.0,
        }
    }
}

impl StorageModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("base_mb", self.base_mb),
            ("fusion_mb", self.fusion_mb),
            ("adapter_mb", self.adapter_mb),
            ("head_mb", self.head_mb),
            ("mb_per_gb", self.mb_per_gb),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Usage(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn distill_tenant_mb(&self) -> f64 {
        self.adapter_mb + self.head_mb
    }

    pub fn fusion_tenant_mb(&self) -> f64 {
        self.fusion_mb + self.adapter_mb + self.head_mb
    }
}

/// A storage size as typed on the command line: `500MB`, `1GB`, `2.5GB`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Space {
    pub amount: f64,
    pub unit: SpaceUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceUnit {
    Mb,
    Gb,
}

impl Space {
    pub fn megabytes(&self, model: &StorageModel) -> f64 {
        match self.unit {
            SpaceUnit::Mb => self.amount,
            SpaceUnit::Gb => self.amount * model.mb_per_gb,
        }
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let upper = t.to_ascii_uppercase();
        let (num, unit) = if let Some(n) = upper.strip_suffix("GB") {
            (n, SpaceUnit::Gb)
        } else if let Some(n) = upper.strip_suffix("MB") {
            (n, SpaceUnit::Mb)
        } else {
            return Err(Error::Usage(format!("size {s:?} needs an MB or GB suffix")));
        };
        let amount: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("unparsable size {s:?}")))?;
        if !(amount > 0.0 && amount.is_finite()) {
            return Err(Error::Usage(format!("size {s:?} must be positive")));
        }
        Ok(Space { amount, unit })
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = match self.unit {
            SpaceUnit::Mb => "MB",
            SpaceUnit::Gb => "GB",
        };
        write!(f, "{}{unit}", self.amount)
    }
}

pub fn parse_spaces(list: &str) -> Result<Vec<Space>> {
    let spaces: Vec<Space> = list.split(',').map(str::parse).collect::<Result<_>>()?;
    if spaces.is_empty() {
        return Err(Error::Usage("no sizes given".into()));
    }
    Ok(spaces)
}

pub const DEFAULT_SPACES: &str = "500MB,1GB,5GB,10GB,50GB,100GB";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityRow {
    pub space: Space,
    pub full: u64,
    pub fusion: u64,
    pub distill: u64,
}

/// Full fine-tuning stores a backbone per tenant; fusion and distillation
/// share one backbone and store their per-tenant parts next to it.
pub fn capacity(model: &StorageModel, space: Space) -> Result<CapacityRow> {
    model.validate()?;
    let s = space.megabytes(model);
    let spare = (s - model.base_mb).max(0.0);
    Ok(CapacityRow {
        space,
        full: (s / model.base_mb).floor() as u64,
        fusion: (spare / model.fusion_tenant_mb()).floor() as u64,
        distill: (spare / model.distill_tenant_mb()).floor() as u64,
    })
}

pub fn capacity_table(model: &StorageModel, spaces: &[Space]) -> Result<Vec<CapacityRow>> {
    spaces.iter().map(|&s| capacity(model, s)).collect()
}

pub fn format_table(model: &StorageModel, rows: &[CapacityRow]) -> String {
    let mut out = format!(
        "# base_mb={} fusion_mb={} adapter_mb={} head_mb={} mb_per_gb={}\n",
        model.base_mb, model.fusion_mb, model.adapter_mb, model.head_mb, model.mb_per_gb
    );
    out.push_str("space\tfull\tfusion\tdistill\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.space, r.full, r.fusion, r.distill
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(
            "1GB"
                .parse::<Space>()
                .unwrap()
                .megabytes(&StorageModel::default()),
            1024.0
        );
        assert_eq!(" 500mb".parse::<Space>().unwrap().amount, 500.0);
        assert!("12".parse::<Space>().is_err());
        assert!("-1GB".parse::<Space>().is_err());
        assert!("xGB".parse::<Space>().is_err());
    }

    #[test]
    fn below_base_holds_no_shared_tenants() {
        let r = capacity(&StorageModel::default(), "300MB".parse().unwrap()).unwrap();
        assert_eq!((r.full, r.fusion, r.distill), (0, 0, 0));
    }

    #[test]
    fn zero_base_rejected() {
        let m = StorageModel {
            base_mb: 0.0,
            ..StorageModel::default()
        };
        assert!(matches!(
            capacity(&m, "1GB".parse().unwrap()),
            Err(Error::Usage(_))
        ));
    }
}
