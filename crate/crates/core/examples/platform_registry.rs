//! A platform directory with three tenants: register, route, reload and
//! verify that earlier tenants' artifacts never change.

use adapter_distill::faq::SyntheticConfig;
use adapter_distill::platform::{Platform, RegisterOptions, TenantData};
use adapter_distill::reproduce::small_platform_config;
use adapter_distill::trainer::Mode;

fn main() -> adapter_distill::Result<()> {
    let root = std::env::temp_dir().join(format!("adistill-example-{}", std::process::id()));
    let mut platform = Platform::init(&root, small_platform_config())?;
    let kbs = SyntheticConfig {
        num_tenants: 3,
        points_per_tenant: 12,
        seed: 3,
        ..SyntheticConfig::default()
    }
    .generate()?;

    for (i, (t, mode)) in kbs
        .iter()
        .zip([Mode::Adapter, Mode::AdapterDistill, Mode::AdapterFusion])
        .enumerate()
    {
        let name = format!("shop{}", i + 1);
        let reg = platform.register_tenant(
            &name,
            TenantData::Kb(t.kb.clone()),
            &RegisterOptions::new(mode),
        )?;
        println!(
            "{name} ({mode}): test accuracy {:.3}, teachers {:?}, {} earlier tenants unchanged",
            reg.test.accuracy, reg.record.teachers, reg.prior_checked
        );
    }

    let reopened = Platform::open(&root)?;
    let q = &kbs[0].kb.points[0];
    for name in ["shop1", "shop2", "shop3"] {
        println!(
            "{name}: p(match) = {:.4}",
            reopened.route(name, &q.standard_question, &q.similar_questions[0])?
        );
    }
    for (name, hash) in reopened.verify_all()? {
        println!("{name}\t{hash}");
    }
    std::fs::remove_dir_all(&root)?;
    Ok(())
}
