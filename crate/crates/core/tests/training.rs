use adapter_distill::adapter::{AdapterWeights, Stage};
use adapter_distill::backbone::{Backbone, BackboneConfig};
use adapter_distill::faq::{build_dataset, LabeledPairs, SyntheticConfig};
use adapter_distill::platform::capacity::SpaceUnit;
use adapter_distill::platform::{capacity, Space, StorageModel};
use adapter_distill::trainer::{
    encode_examples, train_stage1, train_tenant, Mode, TenantModel, TrainConfig,
};
use proptest::prelude::*;

fn tiny_backbone() -> Backbone {
    Backbone::new(BackboneConfig {
        vocab_size: 1024,
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 32,
        max_seq_len: 12,
        seed: 3,
    })
    .unwrap()
}

fn data(seed: u64) -> LabeledPairs {
    let t = SyntheticConfig {
        num_tenants: 1,
        points_per_tenant: 8,
        seed,
        ..SyntheticConfig::default()
    }
    .generate()
    .unwrap();
    build_dataset(&t[0].kb, Default::default()).unwrap()
}

fn cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 1,
        eta_grid: vec![0.5, 2.0],
        ..TrainConfig::default()
    }
}

fn bits(ts: Vec<&autograd::Tensor>) -> Vec<u64> {
    ts.iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

#[test]
fn full_mode_trains_a_private_copy() {
    let bb = tiny_backbone();
    let shared = bits(bb.weights().params());
    let t = train_tenant(&bb, &data(1), &[], &cfg(Mode::Full), "full").unwrap();
    let TenantModel::Full { weights, .. } = &t.model else {
        panic!("not a full model")
    };
    assert_ne!(bits(weights.params()), shared);
    assert_eq!(bits(bb.weights().params()), shared);
}

#[test]
fn head_mode_changes_only_the_head() {
    let bb = tiny_backbone();
    let shared = bits(bb.weights().params());
    let t = train_tenant(&bb, &data(2), &[], &cfg(Mode::Head), "head").unwrap();
    let TenantModel::Head { head } = &t.model else {
        panic!("not a head model")
    };
    assert!(head.weight.data().iter().any(|&w| w != 0.0));
    assert_eq!(bits(bb.weights().params()), shared);
}

fn adapter_of(t: &TenantModel) -> &AdapterWeights {
    match t {
        TenantModel::Adapter { adapter, .. } => adapter,
        _ => panic!("not an adapter model"),
    }
}

#[test]
fn distillation_leaves_encoder_and_teachers_untouched() {
    let bb = tiny_backbone();
    let shared = bits(bb.weights().params());
    let teacher = train_tenant(&bb, &data(3), &[], &cfg(Mode::Adapter), "teacher").unwrap();
    let teacher = adapter_of(&teacher.model).clone();
    let teacher_bits = bits(teacher.params());
    let student = train_tenant(
        &bb,
        &data(4),
        &[teacher.clone()],
        &cfg(Mode::AdapterDistill),
        "student",
    )
    .unwrap();
    assert_eq!(bits(bb.weights().params()), shared);
    assert_eq!(bits(teacher.params()), teacher_bits);
    assert_eq!(adapter_of(&student.model).stage(), Stage::Final);
    assert_eq!(student.teachers, vec!["teacher".to_string()]);
    assert!([0.5, 2.0].contains(&student.eta.unwrap()));
    assert_eq!(student.eta_scores.len(), 2);

    // Same inference cost as a plain adapter.
    let d = data(4);
    let enc = encode_examples(&bb, &d.examples.iter().take(5).collect::<Vec<_>>()).unwrap();
    let plain = train_tenant(&bb, &d, &[], &cfg(Mode::Adapter), "plain").unwrap();
    assert_eq!(
        student.model.measured_flops(&bb, &enc).unwrap(),
        plain.model.measured_flops(&bb, &enc).unwrap()
    );
}

#[test]
fn training_is_deterministic() {
    let bb = tiny_backbone();
    let d = data(5);
    let a = train_tenant(&bb, &d, &[], &cfg(Mode::AdapterDistill), "x").unwrap();
    let b = train_tenant(&bb, &d, &[], &cfg(Mode::AdapterDistill), "x").unwrap();
    assert_eq!(
        bits(adapter_of(&a.model).params()),
        bits(adapter_of(&b.model).params())
    );
    assert_eq!(a.stage2_curve, b.stage2_curve);
}

#[test]
fn zero_learning_rate_keeps_the_initial_adapter() {
    let bb = tiny_backbone();
    let c = TrainConfig {
        learning_rate: 0.0,
        ..cfg(Mode::Adapter)
    };
    let out = train_stage1(&bb, &data(6), &c, "frozen").unwrap();
    let init = AdapterWeights::for_backbone("frozen", bb.config(), c.bottleneck, c.seed).unwrap();
    assert_eq!(bits(out.adapter.params()), bits(init.params()));
    assert!(out.head.weight.data().iter().all(|&w| w == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn capacity_is_monotone(a in 0.0f64..200_000.0, b in 0.0f64..200_000.0) {
        let m = StorageModel::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let at = |mb| capacity(&m, Space { amount: mb, unit: SpaceUnit::Mb }).unwrap();
        let (x, y) = (at(lo), at(hi));
        prop_assert!(x.full <= y.full && x.fusion <= y.fusion && x.distill <= y.distill);
        prop_assert!(y.fusion <= y.distill);
    }
}
