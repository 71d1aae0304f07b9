//! FLOPs and latency of full, adapter, distilled and fusion inference.

use adapter_distill::backbone::{Backbone, BackboneConfig};
use adapter_distill::platform::cost_report;

fn main() -> adapter_distill::Result<()> {
    let backbone = Backbone::new(BackboneConfig::default())?;
    let report = cost_report(&backbone, 8, 9, &[10, 20, 30], 20)?;
    print!("{}", report.to_text());
    report.check_flops()?;
    println!("distilled inference costs exactly what a plain adapter costs");
    Ok(())
}
