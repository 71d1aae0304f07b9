//! Teachers first, then one student trained as a plain adapter and with
//! distillation from the fused teachers. Prints curves and test accuracy.

use adapter_distill::backbone::{Backbone, BackboneConfig};
use adapter_distill::faq::{build_dataset, DatasetOptions, Split, SyntheticConfig};
use adapter_distill::trainer::{evaluate, train_tenant, Mode, TenantModel, TrainConfig};

fn main() -> adapter_distill::Result<()> {
    let backbone = Backbone::new(BackboneConfig {
        num_layers: 2,
        max_seq_len: 16,
        ..BackboneConfig::default()
    })?;
    let tenants = SyntheticConfig {
        num_tenants: 4,
        points_per_tenant: 40,
        seed: 1,
        ..SyntheticConfig::default()
    }
    .generate()?;
    let base = TrainConfig {
        epochs: 6,
        eta_grid: vec![0.5, 1.0, 2.0],
        ..TrainConfig::default()
    };

    let mut teachers = Vec::new();
    for t in &tenants[..3] {
        let data = build_dataset(&t.kb, DatasetOptions::default())?;
        let cfg = TrainConfig {
            mode: Mode::Adapter,
            ..base.clone()
        };
        if let TenantModel::Adapter { adapter, .. } =
            train_tenant(&backbone, &data, &[], &cfg, &t.kb.tenant_id)?.model
        {
            teachers.push(adapter);
        }
    }

    let student = &tenants[3].kb;
    let data = build_dataset(student, DatasetOptions::default())?;
    let test = data.split(Split::Test);
    for mode in [Mode::Adapter, Mode::AdapterDistill] {
        let cfg = TrainConfig {
            mode,
            ..base.clone()
        };
        let trained = train_tenant(&backbone, &data, &teachers, &cfg, &student.tenant_id)?;
        println!("== {mode}");
        for p in trained.stage1_curve.iter().chain(&trained.stage2_curve) {
            println!(
                "  epoch {} ce {:.4} distill {} val acc {:.3}",
                p.epoch,
                p.ce_loss,
                p.distill_loss.map_or("-".into(), |d| format!("{d:.5}")),
                p.val_accuracy
            );
        }
        if let Some(eta) = trained.eta {
            println!("  selected eta {eta} from {:?}", trained.eta_scores);
        }
        println!(
            "  test accuracy {:.3}",
            evaluate(&backbone, &trained.model, &test)?.accuracy
        );
    }
    Ok(())
}
