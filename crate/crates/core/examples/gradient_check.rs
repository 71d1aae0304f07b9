//! Finite-difference check of the distillation objective on a small
//! encoder. Pass `--desk` for the 64-wide, 4-layer configuration (a few
//! minutes in release mode).

use adapter_distill::backbone::BackboneConfig;
use adapter_distill::fusion::DistillNorm;
use adapter_distill::reproduce::{check_stage_two_gradient, GradientSetup};

fn main() -> adapter_distill::Result<()> {
    let mut setup = GradientSetup::default();
    if !std::env::args().any(|a| a == "--desk") {
        setup.backbone = BackboneConfig {
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            num_layers: 2,
            ..setup.backbone
        };
        setup.bottleneck = 4;
    }
    for norm in [DistillNorm::MeanSquared, DistillNorm::L2] {
        for stop_gradient in [false, true] {
            setup.options.norm = norm;
            setup.options.stop_gradient = stop_gradient;
            let r = check_stage_two_gradient(&setup)?;
            println!(
                "{norm:?} stop_gradient={stop_gradient}: {} scalars, max relative error {:.2e}",
                r.scalars_checked, r.max_rel_error
            );
        }
    }
    Ok(())
}
