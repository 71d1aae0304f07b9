use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn adistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adistill"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_kb(path: &Path, lines: &[&str]) {
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

const KB: &[&str] = &[
    "p1\treset my card pin\tforgot card pin\tchange pin of card",
    "p2\tcard was stolen\tlost my card\treport stolen card",
    "p3\topen a new account\tcreate account online\tnew account for child",
    "p4\tclose my account\taccount closing fee\tshut account down",
];

#[test]
fn capacity_defaults_and_custom_model() {
    let o = adistill(&["capacity"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("1GB\t2\t7\t109"), "{text}");
    assert!(text.contains("100GB\t261\t1161\t17587"), "{text}");

    let o = adistill(&["capacity", "--spaces", "2GB", "--adapter-mb", "1.7"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("# base_mb=391 fusion_mb=82 adapter_mb=1.7"));

    assert_eq!(
        adistill(&["capacity", "--base-mb", "0"]).status.code(),
        Some(2)
    );
    assert_eq!(
        adistill(&["capacity", "--spaces", "12XB"]).status.code(),
        Some(2)
    );
}

#[test]
fn build_dataset_is_deterministic_and_write_once() {
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("bank.kb");
    write_kb(&kb, KB);
    let run = |out: &str| {
        adistill(&[
            "build-dataset",
            "--kb",
            kb.to_str().unwrap(),
            "--out",
            out,
            "--seed",
            "4",
        ])
    };
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    let oa = run(a.to_str().unwrap());
    let ob = run(b.to_str().unwrap());
    assert!(
        oa.status.success(),
        "{}",
        String::from_utf8_lossy(&oa.stderr)
    );
    let hash = |o: &Output| {
        stdout(o)
            .lines()
            .last()
            .unwrap()
            .split(' ')
            .last()
            .unwrap()
            .to_string()
    };
    assert_eq!(hash(&oa), hash(&ob));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(stdout(&oa).contains("split\tpositive\tnegative"));
    let manifest = fs::read_to_string(dir.path().join("a.tsv.manifest")).unwrap();
    assert!(manifest.contains("command=build-dataset") && manifest.contains("seed=4"));

    assert_eq!(run(a.to_str().unwrap()).status.code(), Some(3));
}

#[test]
fn build_dataset_errors() {
    let dir = tempfile::tempdir().unwrap();
    let single = dir.path().join("single.kb");
    write_kb(&single, &KB[..1]);
    let out = dir.path().join("out.tsv");
    let o = adistill(&[
        "build-dataset",
        "--kb",
        single.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.kb");
    write_kb(&bad, &[KB[0], "only-an-id"]);
    let o = adistill(&[
        "build-dataset",
        "--kb",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn register_route_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let kbs = dir.path().join("kbs");
    let o = adistill(&[
        "synth-kb",
        "--out-dir",
        kbs.to_str().unwrap(),
        "--tenants",
        "2",
        "--points",
        "8",
        "--seed",
        "2",
    ]);
    assert!(o.status.success());
    let platform = dir.path().join("platform");
    let p = platform.to_str().unwrap();
    let small = [
        "--set",
        "hidden_dim=16",
        "--set",
        "num_heads=2",
        "--set",
        "ffn_dim=32",
        "--set",
        "num_layers=2",
        "--set",
        "max_seq_len=12",
        "--set",
        "epochs=1",
    ];
    let t1 = kbs.join("tenant01.kb");
    let t2 = kbs.join("tenant02.kb");
    let mut args = vec![
        "register",
        "--platform",
        p,
        "--name",
        "first",
        "--data",
        t1.to_str().unwrap(),
        "--mode",
        "adapter_distill",
        "--eta-grid",
        "1",
    ];
    args.extend(small);
    let o = adistill(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("non-destructive check: 0 earlier tenants unchanged"));
    assert!(platform.join("manifests/first.manifest").exists());

    // The configuration is fixed once the platform exists.
    let mut again = vec![
        "register",
        "--platform",
        p,
        "--name",
        "second",
        "--data",
        t2.to_str().unwrap(),
    ];
    again.extend(["--set", "epochs=3"]);
    assert_eq!(adistill(&again).status.code(), Some(2));

    let o = adistill(&[
        "register",
        "--platform",
        p,
        "--name",
        "second",
        "--data",
        t2.to_str().unwrap(),
        "--eta-grid",
        "1",
        "--no-self-teacher",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(
        text.contains("(adapter_distill_star)") && text.contains("teachers first"),
        "{text}"
    );
    assert!(text.contains("1 earlier tenants unchanged"));

    let dup = adistill(&[
        "register",
        "--platform",
        p,
        "--name",
        "second",
        "--data",
        t2.to_str().unwrap(),
    ]);
    assert_eq!(dup.status.code(), Some(3));
    let bad_flag = adistill(&[
        "register",
        "--platform",
        p,
        "--name",
        "third",
        "--data",
        t2.to_str().unwrap(),
        "--mode",
        "head",
        "--no-self-teacher",
    ]);
    assert_eq!(bad_flag.status.code(), Some(2));

    let o = adistill(&[
        "route",
        "--platform",
        p,
        "--name",
        "first",
        "--query",
        "a b",
        "--candidate",
        "a c",
    ]);
    assert!(o.status.success());
    let prob: f64 = stdout(&o).trim().parse().unwrap();
    assert!(prob > 0.0 && prob < 1.0);
    assert_eq!(
        adistill(&[
            "route",
            "--platform",
            p,
            "--name",
            "ghost",
            "--query",
            "a",
            "--candidate",
            "b"
        ])
        .status
        .code(),
        Some(2)
    );

    let o = adistill(&["evaluate", "--platform", p, "--name", "second"]);
    assert!(stdout(&o).starts_with("test examples"));
}

#[test]
fn bench_and_reproduce_subset() {
    let o = adistill(&[
        "bench",
        "--batch-sizes",
        "2,3",
        "--repetitions",
        "2",
        "--teachers",
        "2",
        "--set",
        "hidden_dim=16",
        "--set",
        "num_heads=2",
        "--set",
        "ffn_dim=32",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(
        text.contains("wall-clock") && text.contains("flops: distill == adapter < fusion"),
        "{text}"
    );

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = adistill(&[
        "reproduce",
        "--suite",
        "paper",
        "--only",
        "1,2,9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(),
        3
    );
    assert!(out.join("manifest.txt").exists() && out.join("summary.txt").exists());
    let again = adistill(&["reproduce", "--only", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(3));
    assert_eq!(
        adistill(&["reproduce", "--suite", "other"]).status.code(),
        Some(2)
    );
}
