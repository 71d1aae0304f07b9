use std::fmt::Write as _;

use super::metrics::EvalReport;

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub ce_loss: f64,
    pub distill_loss: Option<f64>,
    pub val_accuracy: f64,
    pub val_auc: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

/// `epoch,ce_loss,distill_loss,val_accuracy,val_auc`, one row per epoch of
/// each stage in order, with a leading `stage` column.
pub fn write_curves_csv(stages: &[(&str, &[CurvePoint])]) -> String {
    let mut out = String::from("stage,epoch,ce_loss,distill_loss,val_accuracy,val_auc\n");
    for (stage, points) in stages {
        for p in *points {
            let _ = writeln!(
                out,
                "{stage},{},{:.6},{},{:.6},{}",
                p.epoch,
                p.ce_loss,
                opt(p.distill_loss),
                p.val_accuracy,
                opt(p.val_auc)
            );
        }
    }
    out
}

/// Structured run report: `key=value` lines, a blank line, then a
/// tab-separated metrics table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub fields: Vec<(String, String)>,
    pub metrics: Vec<(String, EvalReport)>,
}

impl RunReport {
    pub fn field(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.fields {
            let _ = writeln!(out, "{k}={v}");
        }
        out.push_str("\nsplit\texamples\tpositives\taccuracy\tauc\n");
        for (name, r) in &self.metrics {
            let _ = writeln!(
                out,
                "{name}\t{}\t{}\t{:.6}\t{}",
                r.examples,
                r.positives,
                r.accuracy,
                opt(r.auc)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_layout() {
        let mut r = RunReport::default();
        r.field("tenant", "a").field("mode", "adapter");
        r.metrics.push((
            "test".into(),
            EvalReport {
                accuracy: 0.75,
                auc: None,
                examples: 4,
                positives: 4,
            },
        ));
        let text = r.to_text();
        assert!(text.starts_with("tenant=a\nmode=adapter\n\nsplit"));
        assert!(text.ends_with("test\t4\t4\t0.750000\tnan\n"));
        assert_eq!(r.get("mode"), Some("adapter"));
    }

    #[test]
    fn csv_rows() {
        let p = CurvePoint {
            epoch: 1,
            ce_loss: 0.5,
            distill_loss: Some(0.25),
            val_accuracy: 1.0,
            val_auc: Some(1.0),
        };
        let csv = write_curves_csv(&[("stage2", &[p])]);
        assert_eq!(
            csv.lines().nth(1),
            Some("stage2,1,0.500000,0.250000,1.000000,1.000000")
        );
    }
}
