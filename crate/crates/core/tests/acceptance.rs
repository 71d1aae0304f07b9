//! One test per acceptance criterion. Each prints a PASS/FAIL line
//! straight to stdout so the lines survive output capture.

use std::io::Write;
use std::sync::Mutex;

use adapter_distill::reproduce::{run_criterion, ReproduceOptions};

// Several criteria are timed; running them one at a time keeps the
// timings meaningful.
static SERIAL: Mutex<()> = Mutex::new(());

fn criterion(id: u8) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let outcome = run_criterion(id, &ReproduceOptions::default());
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", outcome.line());
    let _ = out.flush();
    assert!(outcome.passed, "{}", outcome.line());
}

#[test]
fn criterion_01_capacity_table() {
    criterion(1);
}

#[test]
fn criterion_02_parameter_fractions() {
    criterion(2);
}

#[test]
fn criterion_03_gradient() {
    criterion(3);
}

#[test]
fn criterion_04_fusion_oracle() {
    criterion(4);
}

#[test]
fn criterion_05_distillation_identity() {
    criterion(5);
}

#[test]
fn criterion_06_non_destructive() {
    criterion(6);
}

#[test]
fn criterion_07_inference_cost() {
    criterion(7);
}

#[test]
fn criterion_08_trend() {
    criterion(8);
}

#[test]
fn criterion_09_oracles() {
    criterion(9);
}

#[test]
fn criterion_10_persistence() {
    criterion(10);
}
