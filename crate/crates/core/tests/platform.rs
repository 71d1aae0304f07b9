use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use adapter_distill::faq::{build_dataset, KnowledgeBase, SyntheticConfig};
use adapter_distill::platform::{Platform, RegisterOptions, TenantData};
use adapter_distill::reproduce::small_platform_config;
use adapter_distill::trainer::Mode;
use adapter_distill::Error;

fn tenants(n: usize) -> Vec<KnowledgeBase> {
    SyntheticConfig {
        num_tenants: n,
        points_per_tenant: 8,
        seed: 21,
        ..SyntheticConfig::default()
    }
    .generate()
    .unwrap()
    .into_iter()
    .map(|t| t.kb)
    .collect()
}

fn platform_with(root: &Path, modes: &[Mode]) -> (Platform, Vec<KnowledgeBase>) {
    let mut p = Platform::init(root, small_platform_config()).unwrap();
    let kbs = tenants(modes.len());
    for (i, (kb, &mode)) in kbs.iter().zip(modes).enumerate() {
        p.register_tenant(
            &format!("t{}", i + 1),
            TenantData::Kb(kb.clone()),
            &RegisterOptions::new(mode),
        )
        .unwrap();
    }
    (p, kbs)
}

fn log_lines(p: &Platform) -> Vec<(String, String, String)> {
    fs::read_to_string(p.access_log_path())
        .unwrap_or_default()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[1].to_string(), f[2].to_string(), f[3].to_string())
        })
        .collect()
}

#[test]
fn routing_reads_only_the_routed_tenant() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = platform_with(
        dir.path(),
        &[Mode::Adapter, Mode::AdapterDistill, Mode::Head],
    );
    let p = Platform::open(p.root()).unwrap();
    let before = log_lines(&p).len();
    let prob = p.route("t2", "where is my card", "card location").unwrap();
    assert!(prob > 0.0 && prob < 1.0);
    let touched: BTreeSet<String> = log_lines(&p)[before..]
        .iter()
        .map(|(t, _, _)| t.clone())
        .collect();
    assert_eq!(touched, BTreeSet::from(["t2".to_string()]));

    // A cached model is served without touching disk.
    let n = log_lines(&p).len();
    p.route("t2", "another", "question").unwrap();
    assert_eq!(log_lines(&p).len(), n);
}

#[test]
fn distillation_reads_earlier_adapters_as_teachers() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = platform_with(
        dir.path(),
        &[Mode::Adapter, Mode::Head, Mode::AdapterDistill],
    );
    let teacher_reads: BTreeSet<String> = log_lines(&p)
        .into_iter()
        .filter(|(_, _, op)| op == "teacher")
        .map(|(t, _, _)| t)
        .collect();
    assert_eq!(teacher_reads, BTreeSet::from(["t1".to_string()]));
    assert_eq!(p.record("t3").unwrap().teachers, vec!["t1".to_string()]);
}

#[test]
fn duplicate_names_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let (mut p, kbs) = platform_with(dir.path(), &[Mode::Head]);
    let err = p
        .register_tenant(
            "t1",
            TenantData::Kb(kbs[0].clone()),
            &RegisterOptions::new(Mode::Head),
        )
        .unwrap_err();
    assert!(matches!(err, Error::Conflict(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(matches!(
        Platform::init(dir.path(), small_platform_config()),
        Err(Error::Conflict(_))
    ));
}

#[test]
fn held_lock_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let (mut p, kbs) = platform_with(dir.path(), &[Mode::Head]);
    fs::write(dir.path().join("platform.lock"), "1").unwrap();
    let err = p
        .register_tenant(
            "t2",
            TenantData::Kb(kbs[0].clone()),
            &RegisterOptions::new(Mode::Head),
        )
        .unwrap_err();
    assert!(matches!(err, Error::Conflict(_)), "{err}");
    assert!(p.records().len() == 1 && !p.tenant_dir("t2").exists());
}

#[test]
fn unknown_tenant_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = platform_with(dir.path(), &[Mode::Adapter]);
    assert!(matches!(
        p.route("nobody", "a", "b"),
        Err(Error::NotFound(_))
    ));
    assert!(matches!(
        Platform::open(&dir.path().join("missing")),
        Err(Error::NotFound(_))
    ));

    let head = p
        .tenant_dir("t1")
        .join(p.record("t1").unwrap().head_path().unwrap());
    let mut bytes = fs::read(&head).unwrap();
    bytes[10] ^= 1;
    fs::write(&head, bytes).unwrap();
    let err = Platform::open(dir.path())
        .unwrap()
        .route("t1", "a", "b")
        .unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn invalid_names_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Platform::init(dir.path(), small_platform_config()).unwrap();
    let kb = tenants(1).remove(0);
    for bad in ["", "-x", "a/b", "sp ace"] {
        assert!(p
            .register_tenant(
                bad,
                TenantData::Kb(kb.clone()),
                &RegisterOptions::new(Mode::Head)
            )
            .is_err());
    }
    assert!(p.records().is_empty());
}

#[test]
fn no_self_teacher_needs_an_earlier_tenant() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Platform::init(dir.path(), small_platform_config()).unwrap();
    let kb = tenants(1).remove(0);
    let err = p
        .register_tenant(
            "t1",
            TenantData::Kb(kb.clone()),
            &RegisterOptions::new(Mode::AdapterDistillStar),
        )
        .unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    assert!(!p.tenant_dir("t1").exists());
    // The self-teacher variant works on an empty platform.
    p.register_tenant(
        "t1",
        TenantData::Kb(kb),
        &RegisterOptions::new(Mode::AdapterDistill),
    )
    .unwrap();
}

#[test]
fn fusion_and_full_tenants_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (p, kbs) = platform_with(
        dir.path(),
        &[Mode::Adapter, Mode::AdapterFusion, Mode::Full],
    );
    let data = build_dataset(&kbs[1], Default::default()).unwrap();
    let first = p.evaluate("t2", Some(&data)).unwrap();
    let reopened = Platform::open(dir.path()).unwrap();
    assert_eq!(reopened.evaluate("t2", Some(&data)).unwrap(), first);
    let full = reopened.evaluate("t3", None).unwrap();
    assert!((reopened.registered_metrics("t3").unwrap().0 - full.accuracy).abs() <= 5e-7);
}
